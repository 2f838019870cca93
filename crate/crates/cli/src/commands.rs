//! Pipeline stages. Every stage reads and writes below one output directory
//! and records a manifest of what it consumed and produced.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::Serialize;

use sepsis_core::analysis::{
    action_heatmap, permutation_importance, spearman, stratified_distributions, tail_fraction, uncertainty_summary,
    vaso_frequency_curve, write_curves_csv, write_heatmaps_csv, CurvePoint, Heatmap,
};
use sepsis_core::behavior::{self, BehaviorNet};
use sepsis_core::c51::{self, QNet};
use sepsis_core::decide::{best, preference};
use sepsis_core::ensemble::{train_ensemble, Ensemble};
use sepsis_core::lab_ae::{self, LabAe};
use sepsis_core::nnet::Checkpoint;
use sepsis_core::physio_ae::{self, PhysioAe};
use sepsis_core::pipeline::{split_patients, Featurizer};
use sepsis_core::replay::{ReplayStore, Transitions};
use sepsis_core::rl_state::feature_names;
use sepsis_core::rng::{derive_seed, seeded};
use sepsis_core::simulator::{
    generate_cohort, mortality, read_jsonl, vaso_fraction_before_death, write_jsonl, Action, Trajectory,
};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::Manifest;

pub const TRAIN: &str = "cohort/train.jsonl";
pub const HELD_OUT: &str = "cohort/held_out.jsonl";
pub const PHYSIO: &str = "models/physio_ae.ckpt";
pub const LAB: &str = "models/lab_ae.ckpt";
pub const SCALER: &str = "models/scaler.json";
pub const BEHAVIOR: &str = "models/behavior.ckpt";
pub const C51: &str = "models/c51.ckpt";
pub const ENSEMBLE: &str = "models/ensemble";
pub const EVALUATION: &str = "evaluation";
pub const IMPORTANCE: &str = "evaluation/importance.csv";

/// Stream identifiers for per-stage seeds.
mod stream {
    pub const SPLIT: u64 = 1;
    pub const PHYSIO: u64 = 2;
    pub const LAB: u64 = 3;
    pub const BEHAVIOR: u64 = 4;
    pub const C51: u64 = 5;
    pub const ENSEMBLE: u64 = 6;
    pub const IMPORTANCE: u64 = 7;
}

/// Artifact path → the command that produces it.
fn producer(rel: &str) -> &'static str {
    match rel {
        TRAIN | HELD_OUT => "simulate",
        PHYSIO => "train-physio-ae",
        LAB => "train-lab-ae",
        SCALER | BEHAVIOR => "train-bc",
        C51 => "train-rl",
        ENSEMBLE => "train-ensemble",
        _ => "an earlier stage",
    }
}

pub fn require(root: &Path, rel: &str) -> CliResult<PathBuf> {
    let path = root.join(rel);
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Dependency {
            artifact: rel.into(),
            hint: format!("not found under {}; run `sepsis {}` first", root.display(), producer(rel)),
        })
    }
}

fn create_parent(path: &Path) -> CliResult<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    Ok(())
}

fn write_json<T: Serialize>(root: &Path, rel: &str, value: &T) -> CliResult<()> {
    let path = root.join(rel);
    create_parent(&path)?;
    let text = serde_json::to_string_pretty(value).map_err(sepsis_core::Error::from)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_cohort(root: &Path, rel: &str) -> CliResult<Vec<Trajectory>> {
    let path = require(root, rel)?;
    Ok(read_jsonl(BufReader::new(File::open(path)?))?)
}

fn write_cohort(root: &Path, rel: &str, trajs: &[Trajectory]) -> CliResult<()> {
    let path = root.join(rel);
    create_parent(&path)?;
    let mut w = BufWriter::new(File::create(path)?);
    write_jsonl(&mut w, trajs)?;
    w.flush()?;
    Ok(())
}

fn load_checkpoint(root: &Path, rel: &str) -> CliResult<Checkpoint> {
    Ok(Checkpoint::load(&require(root, rel)?)?)
}

fn save_checkpoint(root: &Path, rel: &str, ck: &Checkpoint) -> CliResult<()> {
    let path = root.join(rel);
    create_parent(&path)?;
    ck.save(&path)?;
    Ok(())
}

/// Physio and lab encoders plus the training-set scaler.
pub fn load_featurizer(root: &Path) -> CliResult<Featurizer> {
    let physio = PhysioAe::from_checkpoint(&load_checkpoint(root, PHYSIO)?)?;
    let lab = LabAe::from_checkpoint(&load_checkpoint(root, LAB)?)?;
    let scaler = Featurizer::scaler_from_json(&std::fs::read_to_string(require(root, SCALER)?)?)?;
    Ok(Featurizer { physio, lab, scaler })
}

pub fn load_behavior(root: &Path) -> CliResult<BehaviorNet> {
    Ok(BehaviorNet::from_checkpoint(&load_checkpoint(root, BEHAVIOR)?)?)
}

pub fn load_ensemble(root: &Path) -> CliResult<Ensemble> {
    Ok(Ensemble::load(&require(root, ENSEMBLE)?)?)
}

pub fn simulate(config: &ExperimentConfig, root: &Path) -> CliResult<Manifest> {
    let cohort = generate_cohort(config.cohort.patients, config.seed, &config.simulator)?;
    log::info!(
        "simulated {} patients: mortality {:.4}, clinician vaso over last 48 h {:.4}",
        cohort.len(),
        mortality(&cohort),
        vaso_fraction_before_death(&cohort, 48)
    );
    let (train, held_out) =
        split_patients(cohort, config.cohort.held_out_fraction, derive_seed(config.seed, &[stream::SPLIT]))?;
    write_cohort(root, TRAIN, &train)?;
    write_cohort(root, HELD_OUT, &held_out)?;
    let mut m = Manifest::new("simulate", config);
    m.output(root, TRAIN)?;
    m.output(root, HELD_OUT)?;
    Ok(m)
}

pub fn train_physio_ae(config: &ExperimentConfig, root: &Path) -> CliResult<Manifest> {
    let train = read_cohort(root, TRAIN)?;
    let held_out = read_cohort(root, HELD_OUT)?;
    let mut rng = seeded(derive_seed(config.seed, &[stream::PHYSIO]));
    let mut model = PhysioAe::for_cohort(config.physio.model.clone(), config.simulator.baselines, &train, &mut rng)?;
    let val = (!held_out.is_empty()).then_some(held_out.as_slice());
    let report = physio_ae::train(&mut model, &train, val, &config.physio.train, &mut rng)?;
    let steps = (config.physio.train.epochs * train.len().div_ceil(config.physio.train.batch_size)) as u64;
    save_checkpoint(root, PHYSIO, &model.to_checkpoint(config.seed, steps, &config.physio.train.corruption))?;
    write_json(root, "models/physio_ae_report.json", &report)?;
    let mut m = Manifest::new("train-physio-ae", config);
    m.input(root, TRAIN)?;
    m.input(root, HELD_OUT)?;
    m.output(root, PHYSIO)?;
    m.output(root, "models/physio_ae_report.json")?;
    Ok(m)
}

pub fn train_lab_ae(config: &ExperimentConfig, root: &Path) -> CliResult<Manifest> {
    let train = read_cohort(root, TRAIN)?;
    let held_out = read_cohort(root, HELD_OUT)?;
    let mut rng = seeded(derive_seed(config.seed, &[stream::LAB]));
    let mut model = LabAe::for_cohort(config.lab.model.clone(), &train, &mut rng)?;
    let val = (!held_out.is_empty()).then_some(held_out.as_slice());
    let report = lab_ae::train(&mut model, &train, val, &config.lab.train, &mut rng)?;
    let steps = (config.lab.train.epochs * train.len().div_ceil(config.lab.train.batch_size)) as u64;
    save_checkpoint(root, LAB, &model.to_checkpoint(config.seed, steps, &config.lab.train.corruption))?;
    write_json(root, "models/lab_ae_report.json", &report)?;
    let mut m = Manifest::new("train-lab-ae", config);
    m.input(root, TRAIN)?;
    m.input(root, HELD_OUT)?;
    m.output(root, LAB)?;
    m.output(root, "models/lab_ae_report.json")?;
    Ok(m)
}

/// Fits the state scaler on the training cohort and writes it.
fn fit_featurizer(root: &Path) -> CliResult<(Featurizer, Vec<Trajectory>)> {
    let train = read_cohort(root, TRAIN)?;
    let physio = PhysioAe::from_checkpoint(&load_checkpoint(root, PHYSIO)?)?;
    let lab = LabAe::from_checkpoint(&load_checkpoint(root, LAB)?)?;
    let f = Featurizer::fit(physio, lab, &train)?;
    let path = root.join(SCALER);
    create_parent(&path)?;
    std::fs::write(path, f.scaler_json()?)?;
    Ok((f, train))
}

#[derive(Serialize)]
struct BehaviorReport {
    nll: Vec<f64>,
    held_out_accuracy: Option<f64>,
}

pub fn train_bc(config: &ExperimentConfig, root: &Path) -> CliResult<Manifest> {
    let (featurizer, train) = fit_featurizer(root)?;
    let held_out = read_cohort(root, HELD_OUT)?;
    let t = featurizer.transitions(&train)?;
    let v = (!held_out.is_empty()).then(|| featurizer.transitions(&held_out)).transpose()?;
    let mut rng = seeded(derive_seed(config.seed, &[stream::BEHAVIOR]));
    let mut net = BehaviorNet::new(t.state_dim(), &config.behavior.hidden, &mut rng);
    let val = v.as_ref().map(|v| (v.states.view(), v.actions.as_slice()));
    let nll = behavior::train(&mut net, t.states.view(), &t.actions, val, &config.behavior, &mut rng)?;
    let held_out_accuracy = v.as_ref().map(|v| net.accuracy(v.states.view(), &v.actions)).transpose()?;
    let steps = (config.behavior.epochs * t.len().div_ceil(config.behavior.batch_size)) as u64;
    save_checkpoint(root, BEHAVIOR, &net.to_checkpoint(&config.behavior, config.seed, steps))?;
    write_json(root, "models/behavior_report.json", &BehaviorReport { nll, held_out_accuracy })?;
    let mut m = Manifest::new("train-bc", config);
    for rel in [TRAIN, HELD_OUT, PHYSIO, LAB] {
        m.input(root, rel)?;
    }
    for rel in [SCALER, BEHAVIOR, "models/behavior_report.json"] {
        m.output(root, rel)?;
    }
    Ok(m)
}

fn training_transitions(root: &Path) -> CliResult<Transitions> {
    let train = read_cohort(root, TRAIN)?;
    let featurizer = load_featurizer(root)?;
    Ok(featurizer.transitions(&train)?)
}

#[derive(Serialize)]
struct C51Summary {
    iterations: usize,
    final_loss: Option<f64>,
    losses: Vec<f64>,
}

pub fn train_rl(config: &ExperimentConfig, root: &Path) -> CliResult<Manifest> {
    let t = training_transitions(root)?;
    let store = ReplayStore::new(t, config.replay.clone())?;
    let seed = derive_seed(config.seed, &[stream::C51]);
    let (net, report) = c51::train(&config.c51, &store, seed)?;
    save_checkpoint(root, C51, &net.to_checkpoint(&config.c51, seed, report.iterations as u64))?;
    let summary =
        C51Summary { iterations: report.iterations, final_loss: report.losses.last().copied(), losses: report.losses };
    write_json(root, "models/c51_report.json", &summary)?;
    let mut m = Manifest::new("train-rl", config);
    for rel in [TRAIN, PHYSIO, LAB, SCALER] {
        m.input(root, rel)?;
    }
    m.output(root, C51)?;
    m.output(root, "models/c51_report.json")?;
    Ok(m)
}

pub fn train_ensemble_cmd(config: &ExperimentConfig, root: &Path) -> CliResult<Manifest> {
    let t = training_transitions(root)?;
    let ens = train_ensemble(
        &t,
        &config.replay,
        &config.c51,
        &config.ensemble,
        derive_seed(config.seed, &[stream::ENSEMBLE]),
    )?;
    let dir = root.join(ENSEMBLE);
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    ens.save(&dir, &config.c51)?;
    let mut m = Manifest::new("train-ensemble", config);
    for rel in [TRAIN, PHYSIO, LAB, SCALER] {
        m.input(root, rel)?;
    }
    m.output(root, ENSEMBLE)?;
    Ok(m)
}

/// Per-state recommendation as written by `evaluate` and served by `/recommend`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecommendationRow {
    pub patient_id: u64,
    pub hour: u32,
    pub beta: f64,
    pub lambda: f64,
    pub recommended: usize,
    pub expected_q: Vec<f64>,
    pub uncertainty: Vec<f64>,
    pub behavior_prob: Vec<f64>,
    pub preference: Vec<f64>,
}

#[derive(Serialize)]
struct EvaluationSummary {
    patients: usize,
    states: usize,
    mortality: f64,
    /// Mean mass below zero over non-survivor states, per bucket.
    nonsurvivor_mass_below_zero: Vec<(usize, f64)>,
    survivor_mass_below_zero: Vec<(usize, f64)>,
    greedy_vaso_spearman: f64,
    greedy_vaso_last10: f64,
    clinician_vaso_last10: f64,
    mean_uncertainty_survivor: f64,
    mean_uncertainty_nonsurvivor: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn flat_actions(idx: Vec<usize>) -> CliResult<Vec<Action>> {
    Ok(idx.into_iter().map(Action::from_flat).collect::<sepsis_core::Result<_>>()?)
}

pub fn evaluate(config: &ExperimentConfig, root: &Path) -> CliResult<Manifest> {
    let held_out = read_cohort(root, HELD_OUT)?;
    let featurizer = load_featurizer(root)?;
    let behavior = load_behavior(root)?;
    let ensemble = load_ensemble(root)?;
    let t = featurizer.transitions(&held_out)?;
    let states = t.states.view();

    let probs = ensemble.member_probs(states)?;
    let value = ensemble.value_from(&probs);
    let strata = stratified_distributions(value.view(), &t, &config.evaluate.buckets)?;
    write_json(root, "evaluation/value_distributions.json", &strata)?;

    let greedy = flat_actions(ensemble.greedy(states)?)?;
    let clinician: Vec<Action> = held_out.iter().flat_map(|tr| tr.records.iter().map(|r| r.action)).collect();
    let window = config.evaluate.vaso_window;
    let mut curves: Vec<(String, Vec<CurvePoint>)> = vec![
        ("greedy".into(), vaso_frequency_curve(&greedy, &t, window)?),
        ("clinician".into(), vaso_frequency_curve(&clinician, &t, window)?),
    ];
    let mut heatmaps: Vec<(String, Vec<Heatmap>)> = Vec::new();
    let raw_sofa: Vec<f64> = held_out.iter().flat_map(|tr| tr.records.iter().map(|r| r.obs.sofa())).collect();
    heatmaps.push(("greedy".into(), action_heatmap(&greedy, &raw_sofa, &t)?));
    heatmaps.push(("clinician".into(), action_heatmap(&clinician, &raw_sofa, &t)?));
    for &p in &config.evaluate.voting {
        let votes = ensemble.voting_agent(states, p)?;
        curves.push((format!("voting_{p}"), vaso_frequency_curve(&votes, &t, window)?));
        heatmaps.push((format!("voting_{p}"), action_heatmap(&votes, &raw_sofa, &t)?));
    }
    let prefs = preference(states, &config.decide, &ensemble, &behavior)?;
    let recommended = flat_actions(prefs.iter().map(|s| best(s)).collect())?;
    curves.push(("preference".into(), vaso_frequency_curve(&recommended, &t, window)?));
    heatmaps.push(("preference".into(), action_heatmap(&recommended, &raw_sofa, &t)?));

    std::fs::create_dir_all(root.join(EVALUATION))?;
    let curve_refs: Vec<(&str, &[CurvePoint])> = curves.iter().map(|(n, c)| (n.as_str(), c.as_slice())).collect();
    let mut w = BufWriter::new(File::create(root.join("evaluation/vaso_curves.csv"))?);
    write_curves_csv(&mut w, &curve_refs)?;
    w.flush()?;
    let map_refs: Vec<(&str, &[Heatmap])> = heatmaps.iter().map(|(n, h)| (n.as_str(), h.as_slice())).collect();
    let mut w = BufWriter::new(File::create(root.join("evaluation/heatmaps.csv"))?);
    write_heatmaps_csv(&mut w, &map_refs)?;
    w.flush()?;

    let u = ensemble.uncertainty_from(&probs);
    let us = uncertainty_summary(u.view(), &t)?;
    write_json(root, "evaluation/uncertainty.json", &us)?;

    let mut w = BufWriter::new(File::create(root.join("evaluation/recommendations.jsonl"))?);
    for (i, s) in prefs.iter().enumerate() {
        let row = RecommendationRow {
            patient_id: t.patient_ids[i],
            hour: t.hours[i],
            beta: config.decide.beta,
            lambda: config.decide.lambda,
            recommended: best(s),
            expected_q: s.iter().map(|x| crate::serve::sig9(x.expected_q)).collect(),
            uncertainty: s.iter().map(|x| crate::serve::sig9(x.uncertainty)).collect(),
            behavior_prob: s.iter().map(|x| crate::serve::sig9(x.behavior_prob)).collect(),
            preference: s.iter().map(|x| crate::serve::sig9(x.preference)).collect(),
        };
        serde_json::to_writer(&mut w, &row).map_err(sepsis_core::Error::from)?;
        writeln!(w)?;
    }
    w.flush()?;

    let agent = &curves[0].1;
    let closeness: Vec<f64> = agent.iter().map(|c| -(c.hours_to_death as f64)).collect();
    let frac: Vec<f64> = agent.iter().map(|c| c.fraction).collect();
    let bucket_mass = |o| -> Vec<(usize, f64)> {
        config
            .evaluate
            .buckets
            .iter()
            .filter_map(|&h| strata.get(o, h).map(|s| (h, mean(&s.mass_below_zero))))
            .collect()
    };
    let summary = EvaluationSummary {
        patients: held_out.len(),
        states: t.len(),
        mortality: mortality(&held_out),
        nonsurvivor_mass_below_zero: bucket_mass(sepsis_core::simulator::Outcome::Nonsurvivor),
        survivor_mass_below_zero: bucket_mass(sepsis_core::simulator::Outcome::Survivor),
        greedy_vaso_spearman: if agent.len() > 1 { spearman(&closeness, &frac) } else { f64::NAN },
        greedy_vaso_last10: tail_fraction(agent, 10),
        clinician_vaso_last10: tail_fraction(&curves[1].1, 10),
        mean_uncertainty_survivor: mean(&us.survivor),
        mean_uncertainty_nonsurvivor: mean(&us.nonsurvivor),
    };
    write_json(root, "evaluation/summary.json", &summary)?;
    log::info!(
        "held-out vaso curve rho {:.3}; last 10 h greedy {:.3} vs clinician {:.3}",
        summary.greedy_vaso_spearman,
        summary.greedy_vaso_last10,
        summary.clinician_vaso_last10
    );

    let mut m = Manifest::new("evaluate", config);
    for rel in [HELD_OUT, PHYSIO, LAB, SCALER, BEHAVIOR, ENSEMBLE] {
        m.input(root, rel)?;
    }
    for rel in [
        "evaluation/value_distributions.json",
        "evaluation/vaso_curves.csv",
        "evaluation/heatmaps.csv",
        "evaluation/uncertainty.json",
        "evaluation/recommendations.jsonl",
        "evaluation/summary.json",
    ] {
        m.output(root, rel)?;
    }
    Ok(m)
}

pub fn importance(config: &ExperimentConfig, root: &Path) -> CliResult<Manifest> {
    let held_out = read_cohort(root, HELD_OUT)?;
    let featurizer = load_featurizer(root)?;
    let ensemble = load_ensemble(root)?;
    let t = featurizer.transitions(&held_out)?;
    let q = |x: ndarray::ArrayView2<f64>| -> sepsis_core::Result<Array2<f64>> { ensemble.expected_q(x) };
    let table = permutation_importance(
        q,
        t.states.view(),
        &t.patient_ids,
        &feature_names(),
        derive_seed(config.seed, &[stream::IMPORTANCE]),
    )?;
    std::fs::create_dir_all(root.join(EVALUATION))?;
    let mut w = BufWriter::new(File::create(root.join(IMPORTANCE))?);
    table.write_csv(&mut w)?;
    w.flush()?;
    let mut m = Manifest::new("importance", config);
    for rel in [HELD_OUT, PHYSIO, LAB, SCALER, ENSEMBLE] {
        m.input(root, rel)?;
    }
    m.output(root, IMPORTANCE)?;
    Ok(m)
}

/// Loads a single member for diagnostics.
pub fn load_c51(root: &Path) -> CliResult<QNet> {
    Ok(QNet::from_checkpoint(&load_checkpoint(root, C51)?)?)
}
