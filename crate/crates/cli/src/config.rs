//! Experiment configuration: one TOML document with a section per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sepsis_core::behavior::BehaviorConfig;
use sepsis_core::c51::C51Config;
use sepsis_core::decide::PreferenceParams;
use sepsis_core::ensemble::EnsembleConfig;
use sepsis_core::lab_ae::{LabConfig, LabTrainConfig};
use sepsis_core::physio_ae::{PhysioConfig, PhysioTrainConfig};
use sepsis_core::replay::ReplayConfig;
use sepsis_core::simulator::SimConfig;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub patients: usize,
    pub held_out_fraction: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self { patients: 2000, held_out_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysioSection {
    pub model: PhysioConfig,
    pub train: PhysioTrainConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabSection {
    pub model: LabConfig,
    pub train: LabTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Hours before death covered by the vasopressor-frequency curves.
    pub vaso_window: usize,
    /// Hours-to-end buckets for the stratified value distributions.
    pub buckets: Vec<usize>,
    /// Voting thresholds (percent) for the ensemble voting agents.
    pub voting: Vec<f64>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self { vaso_window: 48, buckets: vec![48, 24, 1], voting: vec![0.0, 50.0, 100.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    /// Allowed browser origin; `*` allows any.
    pub cors_origin: String,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { host: "127.0.0.1".into(), port: 8080, cors_origin: "*".into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub cohort: CohortConfig,
    pub simulator: SimConfig,
    pub physio: PhysioSection,
    pub lab: LabSection,
    pub behavior: BehaviorConfig,
    pub replay: ReplayConfig,
    pub c51: C51Config,
    pub ensemble: EnsembleConfig,
    pub decide: PreferenceParams,
    pub evaluate: EvaluateConfig,
    pub serve: ServeConfig,
}

fn positive(name: &str, v: usize) -> CliResult<()> {
    if v == 0 {
        return Err(CliError::Config(format!("{name} must be positive")));
    }
    Ok(())
}

fn all_positive(name: &str, v: &[usize]) -> CliResult<()> {
    if v.contains(&0) {
        return Err(CliError::Config(format!("{name} entries must be positive")));
    }
    Ok(())
}

fn positive_rate(name: &str, v: f64) -> CliResult<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(CliError::Config(format!("{name} must be a positive number, got {v}")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let config: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> CliResult<()> {
        positive("cohort.patients", self.cohort.patients)?;
        if !(0.0..1.0).contains(&self.cohort.held_out_fraction) {
            return Err(CliError::Config("cohort.held_out_fraction must lie in [0, 1)".into()));
        }
        self.simulator.validate()?;

        let p = &self.physio;
        all_positive("physio.model.patient_hidden", &p.model.patient_hidden)?;
        all_positive("physio.model.transition_hidden", &p.model.transition_hidden)?;
        positive("physio.model.gru_hidden", p.model.gru_hidden)?;
        positive("physio.train.batch_size", p.train.batch_size)?;
        positive_rate("physio.train.lr", p.train.lr)?;
        positive_rate("physio.train.clip_norm", p.train.clip_norm)?;
        p.train.corruption.validate()?;

        let l = &self.lab;
        positive("lab.model.stage1_hidden", l.model.stage1_hidden)?;
        positive("lab.model.stage1_proj", l.model.stage1_proj)?;
        positive("lab.model.stage2_hidden", l.model.stage2_hidden)?;
        positive("lab.train.batch_size", l.train.batch_size)?;
        positive_rate("lab.train.lr", l.train.lr)?;
        positive_rate("lab.train.clip_norm", l.train.clip_norm)?;
        l.train.corruption.validate()?;

        let b = &self.behavior;
        all_positive("behavior.hidden", &b.hidden)?;
        positive("behavior.batch_size", b.batch_size)?;
        positive_rate("behavior.lr", b.lr)?;
        if !(b.weight_decay >= 0.0 && b.weight_decay.is_finite()) {
            return Err(CliError::Config("behavior.weight_decay must be non-negative".into()));
        }

        let r = &self.replay;
        positive("replay.batch_size", r.batch_size)?;
        positive_rate("replay.near_death_weight", r.near_death_weight)?;
        if !(r.terminal_per_batch >= 0.0 && r.terminal_per_batch.is_finite()) {
            return Err(CliError::Config("replay.terminal_per_batch must be non-negative".into()));
        }

        self.c51.validate()?;
        self.ensemble.validate()?;
        self.decide.validate()?;

        positive("evaluate.vaso_window", self.evaluate.vaso_window)?;
        all_positive("evaluate.buckets", &self.evaluate.buckets)?;
        if self.evaluate.voting.iter().any(|p| !(0.0..=100.0).contains(p)) {
            return Err(CliError::Config("evaluate.voting thresholds must lie in [0, 100]".into()));
        }
        Ok(())
    }

    /// Canonical serialized form; the manifest hash is taken over this.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.c51.gamma, 0.999);
        assert_eq!(c.c51.hidden, vec![256; 3]);
        assert_eq!(c.ensemble.members, 5);
        assert_eq!(c.replay.batch_size, 100);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(ExperimentConfig::from_toml("sed = 3"), Err(CliError::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("[c51]\ngama = 0.9"), Err(CliError::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("[physio.model]\nwidth = 3"), Err(CliError::Config(_))));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::from_toml("[c51]\ngamma = 1.5").is_err());
        assert!(ExperimentConfig::from_toml("[cohort]\npatients = 0").is_err());
        assert!(ExperimentConfig::from_toml("[decide]\nlambda = -1.0").is_err());
        assert!(ExperimentConfig::from_toml("[evaluate]\nvoting = [120.0]").is_err());
    }

    #[test]
    fn nested_overrides_apply() {
        let c = ExperimentConfig::from_toml("seed = 9\n[simulator]\nmap_target = 70.0\n[physio.train]\nepochs = 2")
            .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.simulator.map_target, 70.0);
        assert_eq!(c.physio.train.epochs, 2);
        assert_eq!(c.physio.model, PhysioConfig::default());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.sha256(), b.sha256());
        b.seed = 1;
        assert_ne!(a.sha256(), b.sha256());
        assert_eq!(a.sha256().len(), 64);
    }

    #[test]
    fn shipped_configs_parse() {
        for name in ["default.toml", "desk.toml"] {
            let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn default_toml_matches_builtin_defaults() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
        assert_eq!(ExperimentConfig::load(&path).unwrap(), ExperimentConfig::default());
    }
}
