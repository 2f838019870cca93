//! Synthetic septic-patient cohort: hidden hemodynamics and severity,
//! treatment effects, noisy observations, rewards and a stochastic
//! clinician policy.

mod config;
mod trajectory;

pub use config::{ClinicianConfig, LabSpec, SimConfig, DEFAULT_LABS};
pub use trajectory::{read_jsonl, write_jsonl, HourRecord, Trajectory};

use rand::Rng as _;
use rand_distr::{Beta, Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cardio::{self, CardioBaselines, CardioParams, SECONDS_PER_MINUTE};
use crate::error::{Error, Result};
use crate::nnet::sigmoid;
use crate::rng::{derive_seed, seeded, Rng};

pub const VITAL_NAMES: [&str; 7] = ["HR", "SBP", "DBP", "MAP", "Temp", "SpO2", "RR"];
pub const SCORE_NAMES: [&str; 5] = ["SOFA", "Liver", "Renal", "CNS", "Cardiovascular"];
pub const LAB_NAMES: [&str; 12] = [
    "AnionGap",
    "Bicarbonate",
    "Creatinine",
    "Chloride",
    "Glucose",
    "Hematocrit",
    "Hemoglobin",
    "Platelet",
    "Potassium",
    "Sodium",
    "BUN",
    "WBC",
];
pub const NUM_ACTIONS: usize = 9;

/// Sub-score shares of `24σ`, in score order Liver, Renal, CNS, Cardiovascular.
const SUBSCORE_FRACTIONS: [f64; 4] = [0.15, 0.25, 0.3, 0.3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientStatic {
    pub age: f64,
    /// 1 = female.
    pub gender: u8,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HiddenState {
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "SV")]
    pub sv: f64,
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "T")]
    pub t: f64,
    pub volume: f64,
    pub sigma: f64,
    /// Per-patient hourly severity drift independent of perfusion.
    #[serde(default)]
    pub progression: f64,
}

impl HiddenState {
    pub fn cardio(&self) -> Result<CardioParams> {
        CardioParams::new(self.r, self.c, self.sv, self.f, self.t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub vitals: [f64; 7],
    pub scores: [f64; 5],
    pub labs: [f64; 12],
    pub labs_fresh: bool,
}

impl Observation {
    pub fn hr(&self) -> f64 {
        self.vitals[0]
    }
    pub fn map(&self) -> f64 {
        self.vitals[3]
    }
    pub fn sofa(&self) -> f64 {
        self.scores[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Action {
    pub vaso: u8,
    pub fluid: u8,
}

impl Action {
    pub fn new(vaso: u8, fluid: u8) -> Result<Self> {
        if vaso > 2 || fluid > 2 {
            return Err(Error::Domain(format!("action levels must be 0..=2, got ({vaso}, {fluid})")));
        }
        Ok(Self { vaso, fluid })
    }

    pub fn flat(self) -> usize {
        3 * self.vaso as usize + self.fluid as usize
    }

    pub fn from_flat(index: usize) -> Result<Self> {
        if index >= NUM_ACTIONS {
            return Err(Error::Domain(format!("action index {index} outside 0..9")));
        }
        Ok(Self { vaso: (index / 3) as u8, fluid: (index % 3) as u8 })
    }

    pub fn all() -> impl Iterator<Item = Action> {
        (0..NUM_ACTIONS).map(|i| Self::from_flat(i).expect("in range"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Survivor,
    Nonsurvivor,
    /// Reached the horizon; rewarded and analysed as a survivor.
    Censored,
}

impl Outcome {
    pub fn survived(self) -> bool {
        !matches!(self, Outcome::Nonsurvivor)
    }
}

/// Everything needed to continue a rollout from a given hour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientState {
    #[serde(rename = "static")]
    pub static_: PatientStatic,
    /// The patient's own reference values.
    pub baseline: CardioBaselines,
    pub hidden: HiddenState,
    pub hour: u32,
    pub obs: Observation,
    /// Set once a terminal transition has been taken.
    pub outcome: Option<Outcome>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next: PatientState,
    pub reward: f64,
    pub done: bool,
    pub outcome: Option<Outcome>,
}

fn normal(rng: &mut Rng, sd: f64) -> f64 {
    if sd == 0.0 {
        0.0
    } else {
        Normal::new(0.0, sd).expect("non-negative finite sd").sample(rng)
    }
}

/// Samples demographics, patient baselines and the initial hidden state.
pub fn init_patient_with(rng: &mut Rng, config: &SimConfig) -> (PatientStatic, CardioBaselines, HiddenState) {
    let age = rng.random_range(config.age_min..=config.age_max);
    let gender = u8::from(rng.random_bool(config.female_prob));
    let weight = (config.weight_mean + normal(rng, config.weight_sd)).clamp(config.weight_min, config.weight_max);

    let j = config.baseline_jitter;
    let jitter = |rng: &mut Rng| if j > 0.0 { rng.random_range(1.0 - j..=1.0 + j) } else { 1.0 };
    let pop = config.baselines;
    let baseline = CardioBaselines {
        r0: pop.r0 * jitter(rng),
        c0: pop.c0 * jitter(rng),
        sv0: pop.sv0 * jitter(rng),
        f0: pop.f0 * jitter(rng),
    };
    let volume = (1.0 + normal(rng, config.volume_init_sd)).clamp(config.volume_min, config.volume_max);
    let [a, b] = config.severity_beta;
    let u: f64 = Beta::new(a, b).expect("validated shape").sample(rng);
    let sigma = config.severity_min + (config.severity_max - config.severity_min) * u;
    let f = (baseline.f0 * jitter(rng)).clamp(config.hr_min, config.hr_max);
    let hidden = HiddenState {
        r: baseline.r0 * jitter(rng),
        c: baseline.c0 * jitter(rng),
        sv: baseline.sv0 * volume.sqrt().clamp(0.3, 1.3),
        f,
        t: SECONDS_PER_MINUTE / f,
        volume,
        sigma,
        progression: config.progression_mean + normal(rng, config.progression_sd),
    };
    (PatientStatic { age, gender, weight }, baseline, hidden)
}

pub fn init_patient(seed: u64, config: &SimConfig) -> (PatientStatic, CardioBaselines, HiddenState) {
    init_patient_with(&mut seeded(seed), config)
}

/// `[SOFA, Liver, Renal, CNS, Cardiovascular]` for severity `σ`. Sub-scores
/// are fixed shares of `24σ`; respiratory and coagulation make up the rest.
pub fn severity_scores(sigma: f64) -> [f64; 5] {
    let raw = 24.0 * sigma.clamp(0.0, 1.0);
    let sofa = raw.round();
    let mut sub = SUBSCORE_FRACTIONS.map(|f| (f * raw).round().clamp(0.0, 4.0));
    while sub.iter().sum::<f64>() > sofa {
        let (imax, _) =
            sub.iter().enumerate().fold((0, f64::MIN), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        sub[imax] -= 1.0;
    }
    [sofa, sub[0], sub[1], sub[2], sub[3]]
}

/// Non-terminal reward from consecutive SOFA scores.
pub fn sofa_reward(sofa: f64, next_sofa: f64, config: &SimConfig) -> f64 {
    let repeat = if next_sofa == sofa && next_sofa > 0.0 { config.sofa_repeat_penalty } else { 0.0 };
    -repeat - config.sofa_delta_penalty * (next_sofa - sofa)
}

/// Observation of `hidden` at `hour`; labs are resampled on lab-interval
/// boundaries and otherwise carried over from `prev_labs`.
pub fn observe(
    hidden: &HiddenState,
    hour: u32,
    prev_labs: Option<&[f64; 12]>,
    config: &SimConfig,
    rng: &mut Rng,
) -> Result<Observation> {
    let p = cardio::decode(&hidden.cardio()?)?;
    let mut noisy = |v: f64, lo: f64, hi: f64| (v * (1.0 + normal(rng, config.measurement_sd))).clamp(lo, hi);
    let sys = noisy(p.sys, 20.0, 250.0);
    let dias = noisy(p.dias, 20.0, 250.0);
    let map = noisy(p.map, 20.0, 250.0);
    let hr = noisy(p.hr, 20.0, 220.0);
    let s = hidden.sigma;
    let temp = 37.0 + 2.0 * s + normal(rng, config.temp_sd);
    let spo2 = (98.0 - 8.0 * s + normal(rng, config.spo2_sd)).min(100.0);
    let rr = 14.0 + 12.0 * s + normal(rng, config.rr_sd);
    let fresh = hour.is_multiple_of(config.lab_interval) || prev_labs.is_none();
    let labs = match prev_labs {
        Some(prev) if !fresh => *prev,
        _ => {
            let mut labs = [0.0; 12];
            for (l, spec) in labs.iter_mut().zip(&config.labs) {
                *l = spec.base + spec.slope * s + normal(rng, spec.sd);
            }
            labs
        }
    };
    Ok(Observation {
        vitals: [hr, sys, dias, map, temp, spo2, rr],
        scores: severity_scores(s),
        labs,
        labs_fresh: fresh,
    })
}

/// Fresh patient at hour 0.
pub fn admit(rng: &mut Rng, config: &SimConfig) -> Result<PatientState> {
    let (static_, baseline, hidden) = init_patient_with(rng, config);
    let obs = observe(&hidden, 0, None, config, rng)?;
    Ok(PatientState { static_, baseline, hidden, hour: 0, obs, outcome: None })
}

/// Advances one hour under `action`.
pub fn step(state: &PatientState, action: Action, config: &SimConfig, rng: &mut Rng) -> Result<StepResult> {
    if state.outcome.is_some() {
        return Err(Error::Contract("cannot step a patient whose trajectory has ended".into()));
    }
    let h = &state.hidden;
    let b = &state.baseline;
    let map = cardio::decode(&h.cardio()?)?.map;
    let vaso = f64::from(action.vaso);
    let fluid = f64::from(action.fluid);

    // hemodynamics respond within the hour, driven by the entering severity
    let r_target = b.r0 * (1.0 - config.vasodilation * h.sigma) + config.vaso_resistance * b.r0 * vaso;
    let r =
        (h.r + config.resistance_relax * (r_target - h.r) + normal(rng, config.resistance_sd) * b.r0).max(0.05 * b.r0);
    let volume = (h.volume + config.fluid_volume * fluid - config.volume_loss * h.sigma * h.volume
        + normal(rng, config.volume_sd))
    .clamp(config.volume_min, config.volume_max);
    let sv = b.sv0 * volume.sqrt().clamp(0.3, 1.3);
    let comp = config.hr_compensation * ((config.hr_map_ref - map) / config.hr_map_ref).max(0.0);
    let f =
        (b.f0 * (1.0 + comp) + config.hr_vaso * vaso + normal(rng, config.hr_sd)).clamp(config.hr_min, config.hr_max);
    let c =
        (b.c0 * (1.0 - config.compliance_loss * h.sigma) + normal(rng, config.compliance_sd) * b.c0).max(0.05 * b.c0);
    let mut hidden =
        HiddenState { r, c, sv, f, t: SECONDS_PER_MINUTE / f, volume, sigma: h.sigma, progression: h.progression };

    // severity then drifts with the pressure the patient actually ran at
    let treated_map = cardio::decode(&hidden.cardio()?)?.map;
    let drift = if treated_map >= config.map_target {
        config.vaso_toxicity * vaso - config.severity_down
    } else {
        config.severity_up * (config.map_target - treated_map) / config.map_target
    };
    let sigma = (h.sigma + h.progression + drift + normal(rng, config.severity_sd)).clamp(0.0, 1.0);
    hidden.sigma = sigma;

    let hour = state.hour + 1;
    let obs = observe(&hidden, hour, Some(&state.obs.labs), config, rng)?;
    let outcome = if sigma >= config.death_severity {
        Some(Outcome::Nonsurvivor)
    } else if sigma <= config.discharge_severity && hour >= config.min_discharge_hour {
        Some(Outcome::Survivor)
    } else if hour >= config.max_hours {
        Some(Outcome::Censored)
    } else {
        None
    };
    let reward = match outcome {
        Some(Outcome::Nonsurvivor) => -config.terminal_reward,
        Some(_) => config.terminal_reward,
        None => sofa_reward(state.obs.sofa(), obs.sofa(), config),
    };
    let next = PatientState { static_: state.static_, baseline: *b, hidden, hour, obs, outcome };
    Ok(StepResult { next, reward, done: outcome.is_some(), outcome })
}

/// Propensity of the logged clinician to give any vasopressor / any fluid.
pub fn clinician_probabilities(obs: &Observation, c: &ClinicianConfig) -> [f64; 4] {
    let sofa = obs.sofa();
    let map = obs.map();
    [
        sigmoid(c.vaso_slope * (sofa - c.vaso_center)),
        sigmoid(c.vaso_high_slope * (sofa - c.vaso_high_center)),
        sigmoid(c.fluid_slope * (c.fluid_center - map)),
        sigmoid(c.fluid_high_slope * (c.fluid_high_center - map)),
    ]
}

pub fn clinician_policy(obs: &Observation, config: &ClinicianConfig, rng: &mut Rng) -> Action {
    let [pv, pv2, pf, pf2] = clinician_probabilities(obs, config);
    let v1 = rng.random_bool(pv);
    let v2 = rng.random_bool(pv2);
    let f1 = rng.random_bool(pf);
    let f2 = rng.random_bool(pf2);
    let level = |any: bool, high: bool| if any { 1 + u8::from(high) } else { 0 };
    Action { vaso: level(v1, v2), fluid: level(f1, f2) }
}

/// Rolls a patient out under `policy` until a terminal transition.
pub fn rollout<P>(patient_id: u64, rng: &mut Rng, config: &SimConfig, mut policy: P) -> Result<Trajectory>
where
    P: FnMut(&PatientState, &mut Rng) -> Action,
{
    let mut state = admit(rng, config)?;
    let static_ = state.static_;
    let baseline = state.baseline;
    let mut records = Vec::new();
    loop {
        let action = policy(&state, rng);
        let res = step(&state, action, config, rng)?;
        records.push(HourRecord {
            hour: state.hour,
            obs: state.obs,
            hidden: Some(state.hidden),
            action,
            reward: res.reward,
            done: res.done,
        });
        if let Some(outcome) = res.outcome {
            return Ok(Trajectory { patient_id, static_, baseline: Some(baseline), outcome, records });
        }
        state = res.next;
    }
}

pub fn simulate_patient(patient_id: u64, seed: u64, config: &SimConfig) -> Result<Trajectory> {
    let mut rng = seeded(derive_seed(seed, &[patient_id]));
    rollout(patient_id, &mut rng, config, |s, rng| clinician_policy(&s.obs, &config.clinician, rng))
}

/// `n` clinician-policy trajectories with ids `0..n`, ordered by id.
pub fn generate_cohort(n: usize, seed: u64, config: &SimConfig) -> Result<Vec<Trajectory>> {
    if n == 0 {
        return Err(Error::Domain("cohort needs at least one patient".into()));
    }
    config.validate()?;
    (0..n as u64).into_par_iter().map(|id| simulate_patient(id, seed, config)).collect()
}

/// Fraction of trajectories that end in death.
pub fn mortality(cohort: &[Trajectory]) -> f64 {
    let deaths = cohort.iter().filter(|t| t.outcome == Outcome::Nonsurvivor).count();
    deaths as f64 / cohort.len().max(1) as f64
}

/// Fraction of non-survivor hours within `window` hours of death on which
/// the logged action included a vasopressor.
pub fn vaso_fraction_before_death(cohort: &[Trajectory], window: usize) -> f64 {
    let (mut num, mut den) = (0usize, 0usize);
    for t in cohort.iter().filter(|t| t.outcome == Outcome::Nonsurvivor) {
        for r in t.records.iter().rev().take(window) {
            num += usize::from(r.action.vaso > 0);
            den += 1;
        }
    }
    num as f64 / den.max(1) as f64
}
