//! Bootstrapped C51 ensembles: member training, KL model uncertainty,
//! p%-voting and the patient-weighted ensemble value.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::behavior::argmax;
use crate::c51::{self, expected_values, C51Config, QNet, N_ATOMS};
use crate::error::{Error, Result};
use crate::nnet::Checkpoint;
use crate::replay::{ReplayConfig, ReplayStore, Transitions};
use crate::rng::{derive_seed, seeded};
use crate::simulator::{Action, NUM_ACTIONS};

const KL_FLOOR: f64 = 1e-12;
pub const MANIFEST_FILE: &str = "ensemble.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub members: usize,
    pub fraction_range: [f64; 2],
    pub with_replacement: bool,
    /// Each member trains for one of these pass counts, drawn per member.
    pub passes: Vec<f64>,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { members: 5, fraction_range: [0.65, 0.80], with_replacement: true, passes: vec![2.0, 3.0] }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.fraction_range;
        if self.members < 2 {
            return Err(Error::Config("an ensemble needs at least 2 members".into()));
        }
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("fraction range [{lo}, {hi}] must satisfy 0 < lo ≤ hi ≤ 1")));
        }
        if self.passes.is_empty() || self.passes.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::Config("passes must be a non-empty list of positive numbers".into()));
        }
        Ok(())
    }
}

/// Patient-level bootstrap: each subset holds `round(f·N)` patient ids with
/// `f ~ U(range)`, drawn with or without replacement.
pub fn bootstrap_datasets(
    patient_ids: &[u64],
    k: usize,
    range: [f64; 2],
    with_replacement: bool,
    seed: u64,
) -> Result<Vec<Vec<u64>>> {
    if patient_ids.len() < 50 {
        return Err(Error::Contract(format!("bootstrapping needs at least 50 patients, got {}", patient_ids.len())));
    }
    let n = patient_ids.len();
    Ok((0..k)
        .map(|m| {
            let mut rng = seeded(derive_seed(seed, &[m as u64]));
            let f = if range[0] == range[1] { range[0] } else { rng.random_range(range[0]..=range[1]) };
            let size = ((f * n as f64).round() as usize).clamp(1, n);
            if with_replacement {
                (0..size).map(|_| patient_ids[rng.random_range(0..n)]).collect()
            } else {
                let mut picked: Vec<usize> = index::sample(&mut rng, n, size).into_vec();
                picked.sort_unstable();
                picked.into_iter().map(|i| patient_ids[i]).collect()
            }
        })
        .collect())
}

/// All transitions of the listed patients; repeated ids repeat their transitions.
pub fn subset_by_patients(transitions: &Transitions, ids: &[u64]) -> Transitions {
    let mut by_patient: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &p) in transitions.patient_ids.iter().enumerate() {
        by_patient.entry(p).or_default().push(i);
    }
    let idx: Vec<usize> = ids.iter().flat_map(|p| by_patient.get(p).into_iter().flatten().copied()).collect();
    transitions.subset(&idx)
}

fn normalized_floor(p: &[f64]) -> Vec<f64> {
    let floored: Vec<f64> = p.iter().map(|&v| v.max(KL_FLOOR)).collect();
    let sum: f64 = floored.iter().sum();
    floored.into_iter().map(|v| v / sum).collect()
}

/// KL(p ‖ q) in nats, both arguments floored at 1e-12 then renormalized.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let p = normalized_floor(p);
    let q = normalized_floor(q);
    p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>().max(0.0)
}

/// Weighted element-wise mean of distributions, renormalized.
pub fn weighted_mean(dists: &[&[f64]], weights: &[f64]) -> Vec<f64> {
    let n = dists[0].len();
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; n];
    for (d, &w) in dists.iter().zip(weights) {
        for (o, v) in out.iter_mut().zip(d.iter()) {
            *o += (w / total) * v;
        }
    }
    let sum: f64 = out.iter().sum();
    if sum != 1.0 {
        out.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// `(1/K)·Σ_k KL(P_k ‖ P̄)` with `P̄` the plain member mean.
pub fn disagreement(dists: &[&[f64]]) -> f64 {
    if dists.iter().all(|d| d == &dists[0]) {
        return 0.0;
    }
    let mean = weighted_mean(dists, &vec![1.0; dists.len()]);
    disagreement_against(dists, &mean)
}

pub fn disagreement_against(dists: &[&[f64]], reference: &[f64]) -> f64 {
    dists.iter().map(|d| kl_divergence(d, reference)).sum::<f64>() / dists.len() as f64
}

/// p%-vote over member greedy actions.
pub fn vote(greedy: &[Action], p: f64) -> Result<Action> {
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::Domain(format!("voting threshold must lie in [0, 100], got {p}")));
    }
    if greedy.is_empty() {
        return Err(Error::Contract("no member votes".into()));
    }
    let with_vaso = greedy.iter().filter(|a| a.vaso > 0).count();
    let give = with_vaso > 0 && 100.0 * with_vaso as f64 >= p * greedy.len() as f64;
    let consistent: Vec<&Action> = greedy.iter().filter(|a| (a.vaso > 0) == give).collect();
    let majority = |values: Vec<u8>| -> u8 {
        let mut counts = [0usize; 3];
        values.into_iter().for_each(|v| counts[v as usize] += 1);
        // first maximum is the lowest dose
        (0..3).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).unwrap_or(0) as u8
    };
    let vaso = if give { majority(consistent.iter().map(|a| a.vaso).collect()) } else { 0 };
    let fluid = majority(consistent.iter().map(|a| a.fluid).collect());
    Action::new(vaso, fluid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberInfo {
    pub seed: u64,
    pub fraction: f64,
    pub patient_count: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: Vec<QNet>,
    pub info: Vec<MemberInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    members: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    #[serde(flatten)]
    info: MemberInfo,
}

impl Ensemble {
    pub fn new(members: Vec<QNet>, info: Vec<MemberInfo>) -> Result<Self> {
        if members.len() < 2 || members.len() != info.len() {
            return Err(Error::Contract("an ensemble needs at least 2 members, each with metadata".into()));
        }
        if info.iter().any(|m| !(m.fraction > 0.0 && m.fraction <= 1.0)) {
            return Err(Error::Contract("member fractions must lie in (0, 1]".into()));
        }
        if members.iter().any(|m| m.state_dim() != members[0].state_dim()) {
            return Err(Error::Shape("ensemble members disagree on the state dimension".into()));
        }
        Ok(Self { members, info })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.members[0].state_dim()
    }

    /// Per member `[B, 9·51]` distributions.
    pub fn member_probs(&self, states: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        self.members.par_iter().map(|m| m.probs(states)).collect()
    }

    fn weights(&self) -> Vec<f64> {
        self.info.iter().map(|m| m.patient_count as f64).collect()
    }

    fn blocks(probs: &[Array2<f64>], i: usize, a: usize) -> Vec<&[f64]> {
        let r = a * N_ATOMS..(a + 1) * N_ATOMS;
        probs.iter().map(|p| &p.as_slice().expect("standard layout")[i * p.ncols()..][r.clone()]).collect()
    }

    /// Patient-count-weighted ensemble distribution, `[B, 9·51]`.
    pub fn value(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.value_from(&self.member_probs(states)?))
    }

    pub fn value_from(&self, probs: &[Array2<f64>]) -> Array2<f64> {
        let rows = probs[0].nrows();
        let w = self.weights();
        let mut out = Array2::zeros((rows, NUM_ACTIONS * N_ATOMS));
        for i in 0..rows {
            for a in 0..NUM_ACTIONS {
                let mean = weighted_mean(&Self::blocks(probs, i, a), &w);
                out.slice_mut(s![i, a * N_ATOMS..(a + 1) * N_ATOMS]).assign(&ndarray::ArrayView1::from(&mean));
            }
        }
        out
    }

    /// Expected value of the ensemble distribution, `[B, 9]`.
    pub fn expected_q(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(expected_values(self.value(states)?.view()))
    }

    /// Model uncertainty against the member mean, `[B, 9]`.
    pub fn uncertainty(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.uncertainty_from(&self.member_probs(states)?))
    }

    pub fn uncertainty_from(&self, probs: &[Array2<f64>]) -> Array2<f64> {
        let rows = probs[0].nrows();
        Array2::from_shape_fn((rows, NUM_ACTIONS), |(i, a)| disagreement(&Self::blocks(probs, i, a)))
    }

    /// Model uncertainty against a separately trained full-data model.
    pub fn uncertainty_against(&self, states: ArrayView2<f64>, reference: &QNet) -> Result<Array2<f64>> {
        let probs = self.member_probs(states)?;
        let refp = reference.probs(states)?;
        Ok(Array2::from_shape_fn((states.nrows(), NUM_ACTIONS), |(i, a)| {
            let r = refp.slice(s![i, a * N_ATOMS..(a + 1) * N_ATOMS]).to_vec();
            disagreement_against(&Self::blocks(&probs, i, a), &r)
        }))
    }

    /// Greedy action of the weighted ensemble value per state.
    pub fn greedy(&self, states: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(self.expected_q(states)?.rows().into_iter().map(argmax).collect())
    }

    /// Each member's greedy actions, `[K][B]`.
    pub fn member_greedy(&self, states: ArrayView2<f64>) -> Result<Vec<Vec<usize>>> {
        self.members.par_iter().map(|m| m.greedy(states)).collect()
    }

    /// p%-voting agent over a batch of states.
    pub fn voting_agent(&self, states: ArrayView2<f64>, p: f64) -> Result<Vec<Action>> {
        let votes = self.member_greedy(states)?;
        (0..states.nrows())
            .map(|i| vote(&votes.iter().map(|v| Action::from_flat(v[i])).collect::<Result<Vec<_>>>()?, p))
            .collect()
    }

    pub fn save(&self, dir: &Path, config: &C51Config) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (k, (m, info)) in self.members.iter().zip(&self.info).enumerate() {
            let file = format!("member_{k:02}.ckpt");
            m.to_checkpoint(config, info.seed, info.iterations as u64).save(&dir.join(&file))?;
            entries.push(ManifestEntry { file, info: info.clone() });
        }
        let json = serde_json::to_string_pretty(&Manifest { members: entries })?;
        std::fs::write(dir.join(MANIFEST_FILE), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        let mut members = Vec::new();
        let mut info = Vec::new();
        for e in manifest.members {
            members.push(QNet::from_checkpoint(&Checkpoint::load(&dir.join(&e.file))?)?);
            info.push(e.info);
        }
        Self::new(members, info)
    }
}

/// Trains one member per bootstrap subset with distinct seeds.
pub fn train_ensemble(
    transitions: &Transitions,
    replay: &ReplayConfig,
    c51_config: &C51Config,
    config: &EnsembleConfig,
    seed: u64,
) -> Result<Ensemble> {
    config.validate()?;
    let mut ids: Vec<u64> = transitions.patient_ids.clone();
    ids.dedup();
    let ids: Vec<u64> = ids.into_iter().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let subsets = bootstrap_datasets(
        &ids,
        config.members,
        config.fraction_range,
        config.with_replacement,
        derive_seed(seed, &[0]),
    )?;
    let trained: Vec<(QNet, MemberInfo)> = subsets
        .par_iter()
        .enumerate()
        .map(|(k, subset)| {
            let member_seed = derive_seed(seed, &[1, k as u64]);
            let mut rng = seeded(member_seed);
            let passes = config.passes[rng.random_range(0..config.passes.len())];
            let store = ReplayStore::new(subset_by_patients(transitions, subset), replay.clone())?;
            let cfg = C51Config { passes, ..c51_config.clone() };
            let (net, report) = c51::train(&cfg, &store, member_seed)?;
            log::info!("ensemble member {k} trained on {} patients for {} iterations", subset.len(), report.iterations);
            Ok((
                net,
                MemberInfo {
                    seed: member_seed,
                    fraction: subset.len() as f64 / ids.len() as f64,
                    patient_count: subset.len(),
                    iterations: report.iterations,
                },
            ))
        })
        .collect::<Result<_>>()?;
    let (members, info) = trained.into_iter().unzip();
    Ensemble::new(members, info)
}
