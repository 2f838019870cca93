use serde::{Deserialize, Serialize};

use crate::cardio::CardioBaselines;
use crate::error::{Error, Result};

/// Per-lab generative model `base + slope·σ + N(0, sd)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabSpec {
    pub base: f64,
    pub slope: f64,
    pub sd: f64,
}

const fn lab(base: f64, slope: f64, sd: f64) -> LabSpec {
    LabSpec { base, slope, sd }
}

/// Order matches [`crate::simulator::LAB_NAMES`].
pub const DEFAULT_LABS: [LabSpec; 12] = [
    lab(12.0, 8.0, 1.0),
    lab(24.0, -8.0, 1.0),
    lab(1.0, 3.0, 0.2),
    lab(104.0, 2.0, 2.0),
    lab(120.0, 60.0, 15.0),
    lab(33.0, -6.0, 2.0),
    lab(11.0, -2.0, 0.7),
    lab(220.0, -150.0, 30.0),
    lab(4.1, 0.6, 0.3),
    lab(139.0, 2.0, 2.0),
    lab(20.0, 40.0, 4.0),
    lab(11.0, 10.0, 2.5),
];

/// Stochastic clinician: logistic propensities for giving any vasopressor /
/// fluid and, given one, for the higher level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClinicianConfig {
    pub vaso_slope: f64,
    pub vaso_center: f64,
    pub vaso_high_slope: f64,
    pub vaso_high_center: f64,
    pub fluid_slope: f64,
    pub fluid_center: f64,
    pub fluid_high_slope: f64,
    pub fluid_high_center: f64,
}

impl Default for ClinicianConfig {
    fn default() -> Self {
        Self {
            vaso_slope: 0.25,
            vaso_center: 16.5,
            vaso_high_slope: 0.3,
            vaso_high_center: 14.0,
            fluid_slope: 0.1,
            fluid_center: 65.0,
            fluid_high_slope: 0.1,
            fluid_high_center: 55.0,
        }
    }
}

/// Every coefficient of the synthetic patient model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Population reference values; each patient's own baselines are these
    /// scaled by `1 ± baseline_jitter`.
    pub baselines: CardioBaselines,
    pub baseline_jitter: f64,
    pub age_min: f64,
    pub age_max: f64,
    pub female_prob: f64,
    pub weight_mean: f64,
    pub weight_sd: f64,
    pub weight_min: f64,
    pub weight_max: f64,
    pub volume_init_sd: f64,
    pub severity_min: f64,
    pub severity_max: f64,
    pub severity_beta: [f64; 2],

    pub map_target: f64,
    pub severity_up: f64,
    pub severity_down: f64,
    pub severity_sd: f64,
    /// Per-patient progression rate ~ Normal(mean, sd), fixed over the stay.
    pub progression_mean: f64,
    pub progression_sd: f64,
    /// Severity added per hour per vasopressor level while MAP is already
    /// at or above target.
    pub vaso_toxicity: f64,

    pub resistance_relax: f64,
    pub vasodilation: f64,
    pub vaso_resistance: f64,
    pub resistance_sd: f64,

    pub fluid_volume: f64,
    pub volume_loss: f64,
    pub volume_sd: f64,
    pub volume_min: f64,
    pub volume_max: f64,

    pub hr_map_ref: f64,
    pub hr_compensation: f64,
    pub hr_vaso: f64,
    pub hr_sd: f64,
    pub hr_min: f64,
    pub hr_max: f64,

    pub compliance_loss: f64,
    pub compliance_sd: f64,

    /// Relative measurement noise on SBP, DBP, MAP and HR.
    pub measurement_sd: f64,
    pub temp_sd: f64,
    pub spo2_sd: f64,
    pub rr_sd: f64,
    pub labs: [LabSpec; 12],
    pub lab_interval: u32,

    pub death_severity: f64,
    pub discharge_severity: f64,
    pub min_discharge_hour: u32,
    pub max_hours: u32,
    pub terminal_reward: f64,
    pub sofa_repeat_penalty: f64,
    pub sofa_delta_penalty: f64,

    pub clinician: ClinicianConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            baselines: CardioBaselines::default(),
            baseline_jitter: 0.1,
            age_min: 17.0,
            age_max: 95.0,
            female_prob: 0.42,
            weight_mean: 80.0,
            weight_sd: 15.0,
            weight_min: 40.0,
            weight_max: 160.0,
            volume_init_sd: 0.05,
            severity_min: 0.05,
            severity_max: 0.9,
            severity_beta: [2.0, 6.0],
            map_target: 65.0,
            severity_up: 0.12,
            severity_down: 0.01,
            severity_sd: 0.01,
            progression_mean: -0.01,
            progression_sd: 0.01,
            vaso_toxicity: 0.02,
            resistance_relax: 0.3,
            vasodilation: 0.8,
            vaso_resistance: 0.25,
            resistance_sd: 0.02,
            fluid_volume: 0.03,
            volume_loss: 0.05,
            volume_sd: 0.01,
            volume_min: 0.2,
            volume_max: 2.0,
            hr_map_ref: 70.0,
            hr_compensation: 0.8,
            hr_vaso: 5.0,
            hr_sd: 2.0,
            hr_min: 40.0,
            hr_max: 180.0,
            compliance_loss: 0.2,
            compliance_sd: 0.02,
            measurement_sd: 0.02,
            temp_sd: 0.3,
            spo2_sd: 1.0,
            rr_sd: 1.0,
            labs: DEFAULT_LABS,
            lab_interval: 12,
            death_severity: 0.95,
            discharge_severity: 0.05,
            min_discharge_hour: 24,
            max_hours: 336,
            terminal_reward: 15.0,
            sofa_repeat_penalty: 0.025,
            sofa_delta_penalty: 0.125,
            clinician: ClinicianConfig::default(),
        }
    }
}

impl SimConfig {
    /// Same dynamics with every noise term switched off.
    pub fn noiseless(mut self) -> Self {
        self.severity_sd = 0.0;
        self.progression_sd = 0.0;
        self.resistance_sd = 0.0;
        self.volume_sd = 0.0;
        self.hr_sd = 0.0;
        self.compliance_sd = 0.0;
        self.measurement_sd = 0.0;
        self.temp_sd = 0.0;
        self.spo2_sd = 0.0;
        self.rr_sd = 0.0;
        for l in &mut self.labs {
            l.sd = 0.0;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.baselines.validate()?;
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(0.0..1.0).contains(&self.baseline_jitter) {
            return bad("baseline_jitter must lie in [0, 1)");
        }
        if !(self.age_min >= 17.0 && self.age_max >= self.age_min) {
            return bad("ages must satisfy 17 <= age_min <= age_max");
        }
        if !(0.0..=1.0).contains(&self.female_prob) {
            return bad("female_prob must be a probability");
        }
        if !(self.weight_min > 0.0 && self.weight_max >= self.weight_min) {
            return bad("weight bounds must be positive and ordered");
        }
        if !(0.0 <= self.severity_min && self.severity_min <= self.severity_max && self.severity_max <= 1.0) {
            return bad("initial severity range must lie inside [0, 1]");
        }
        if self.severity_beta.iter().any(|&a| !(a > 0.0)) {
            return bad("severity_beta shape parameters must be positive");
        }
        if !(self.volume_min > 0.0 && self.volume_max > self.volume_min) {
            return bad("volume bounds must be positive and ordered");
        }
        if !(self.hr_min > 0.0 && self.hr_max > self.hr_min) {
            return bad("heart-rate bounds must be positive and ordered");
        }
        if !(self.discharge_severity < self.death_severity) {
            return bad("discharge severity must be below death severity");
        }
        if !(self.vaso_toxicity >= 0.0) {
            return bad("vaso_toxicity must be non-negative");
        }

        if self.max_hours == 0 || self.lab_interval == 0 {
            return bad("max_hours and lab_interval must be positive");
        }
        let sds = [
            self.severity_sd,
            self.progression_sd,
            self.resistance_sd,
            self.volume_sd,
            self.hr_sd,
            self.compliance_sd,
            self.measurement_sd,
            self.temp_sd,
            self.spo2_sd,
            self.rr_sd,
        ];
        if sds.iter().chain(self.labs.iter().map(|l| &l.sd)).any(|&s| !(s >= 0.0 && s.is_finite())) {
            return bad("noise standard deviations must be finite and non-negative");
        }
        Ok(())
    }
}
