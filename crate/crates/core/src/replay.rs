//! Transition store with weighted multinomial sampling that over-samples
//! terminal and near-death transitions.

use ndarray::{Array2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::simulator::{Outcome, Trajectory};

/// Column-oriented transitions `(s, a, r, s', done)` with bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Transitions {
    pub states: Array2<f64>,
    /// Equal to `states` on terminal rows; never used there.
    pub next_states: Array2<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub outcomes: Vec<Outcome>,
    pub patient_ids: Vec<u64>,
    pub hours: Vec<u32>,
    pub hours_to_end: Vec<usize>,
}

impl Transitions {
    /// `states[i][t]` is the state vector of `trajs[i]` at hour `t`.
    pub fn from_states(trajs: &[Trajectory], states: &[Vec<Vec<f64>>]) -> Result<Self> {
        if trajs.len() != states.len() {
            return Err(Error::Shape("one state sequence per trajectory is required".into()));
        }
        let dim = states.iter().flatten().next().map_or(0, |s| s.len());
        let n: usize = trajs.iter().map(|t| t.len()).sum();
        let mut s = Vec::with_capacity(n * dim);
        let mut ns = Vec::with_capacity(n * dim);
        let mut out = Self {
            states: Array2::zeros((0, dim)),
            next_states: Array2::zeros((0, dim)),
            actions: Vec::with_capacity(n),
            rewards: Vec::with_capacity(n),
            dones: Vec::with_capacity(n),
            outcomes: Vec::with_capacity(n),
            patient_ids: Vec::with_capacity(n),
            hours: Vec::with_capacity(n),
            hours_to_end: Vec::with_capacity(n),
        };
        for (t, seq) in trajs.iter().zip(states) {
            if seq.len() != t.len() || seq.iter().any(|v| v.len() != dim) {
                return Err(Error::Shape(format!(
                    "patient {}: state sequence does not match trajectory",
                    t.patient_id
                )));
            }
            for (h, r) in t.records.iter().enumerate() {
                s.extend_from_slice(&seq[h]);
                ns.extend_from_slice(if r.done { &seq[h] } else { &seq[h + 1] });
                out.actions.push(r.action.flat());
                out.rewards.push(r.reward);
                out.dones.push(r.done);
                out.outcomes.push(t.outcome);
                out.patient_ids.push(t.patient_id);
                out.hours.push(r.hour);
                out.hours_to_end.push(t.hours_to_end(h));
            }
        }
        out.states = Array2::from_shape_vec((n, dim), s).map_err(|e| Error::Shape(e.to_string()))?;
        out.next_states = Array2::from_shape_vec((n, dim), ns).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.ncols()
    }

    /// Rows `idx` (repeats allowed) as a new set.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            states: self.states.select(Axis(0), idx),
            next_states: self.next_states.select(Axis(0), idx),
            actions: idx.iter().map(|&i| self.actions[i]).collect(),
            rewards: idx.iter().map(|&i| self.rewards[i]).collect(),
            dones: idx.iter().map(|&i| self.dones[i]).collect(),
            outcomes: idx.iter().map(|&i| self.outcomes[i]).collect(),
            patient_ids: idx.iter().map(|&i| self.patient_ids[i]).collect(),
            hours: idx.iter().map(|&i| self.hours[i]).collect(),
            hours_to_end: idx.iter().map(|&i| self.hours_to_end[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionClass {
    TerminalDeath,
    TerminalSurvival,
    NearDeath,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Weighted,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayConfig {
    pub mode: SamplingMode,
    pub near_death_hours: usize,
    pub near_death_weight: f64,
    /// Expected terminal-death and terminal-survival draws per batch.
    pub terminal_per_batch: f64,
    pub batch_size: usize,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            mode: SamplingMode::Weighted,
            near_death_hours: 24,
            near_death_weight: 5.0,
            terminal_per_batch: 1.0,
            batch_size: 100,
        }
    }
}

pub fn classify(done: bool, outcome: Outcome, hours_to_end: usize, near_death_hours: usize) -> TransitionClass {
    match (done, outcome.survived()) {
        (true, false) => TransitionClass::TerminalDeath,
        (true, true) => TransitionClass::TerminalSurvival,
        (false, false) if hours_to_end <= near_death_hours => TransitionClass::NearDeath,
        _ => TransitionClass::Other,
    }
}

/// Terminal weights `(w_d, w_s)` with `batch · w·N / Z = target` for both
/// kinds, where `Z = other_weight + w_d·N_d + w_s·N_s`. Solved by fixed-point
/// iteration on `Z`, which is affine in the weights and contracts by
/// `2·target/batch` per step.
pub fn solve_terminal_weights(
    other_weight: f64,
    n_death: usize,
    n_surv: usize,
    batch: usize,
    target: f64,
) -> Result<(f64, f64)> {
    if n_death == 0 && n_surv == 0 {
        return Err(Error::Config("replay contains no terminal transitions".into()));
    }
    let kinds = usize::from(n_death > 0) + usize::from(n_surv > 0);
    let share = target / batch as f64;
    if !(other_weight > 0.0) || share * kinds as f64 >= 1.0 || !(share > 0.0) {
        return Err(Error::Config("terminal sampling target cannot be met with this batch size".into()));
    }
    let (nd, ns) = (n_death as f64, n_surv as f64);
    let (mut wd, mut ws) = (f64::from(u8::from(n_death > 0)), f64::from(u8::from(n_surv > 0)));
    for _ in 0..10_000 {
        let z = other_weight + wd * nd + ws * ns;
        let nwd = if n_death > 0 { share * z / nd } else { 0.0 };
        let nws = if n_surv > 0 { share * z / ns } else { 0.0 };
        let delta = (nwd - wd).abs().max((nws - ws).abs());
        wd = nwd;
        ws = nws;
        if delta <= 1e-10 * wd.max(ws).max(1.0) {
            return Ok((wd, ws));
        }
    }
    Err(Error::Config("terminal weight iteration did not converge".into()))
}

#[derive(Debug, Clone)]
pub struct ReplayStore {
    pub transitions: Transitions,
    pub weights: Vec<f64>,
    pub classes: Vec<TransitionClass>,
    pub config: ReplayConfig,
    sampler: Option<WeightedIndex<f64>>,
}

impl ReplayStore {
    pub fn new(transitions: Transitions, config: ReplayConfig) -> Result<Self> {
        if transitions.is_empty() {
            return Err(Error::Domain("replay store needs at least one transition".into()));
        }
        let classes: Vec<TransitionClass> = (0..transitions.len())
            .map(|i| {
                classify(
                    transitions.dones[i],
                    transitions.outcomes[i],
                    transitions.hours_to_end[i],
                    config.near_death_hours,
                )
            })
            .collect();
        let mut store = Self { weights: vec![1.0; transitions.len()], transitions, classes, config, sampler: None };
        if store.config.mode == SamplingMode::Weighted {
            store.assign_weights()?;
        }
        Ok(store)
    }

    fn assign_weights(&mut self) -> Result<()> {
        let count = |c| self.classes.iter().filter(|&&k| k == c).count();
        let nd = count(TransitionClass::TerminalDeath);
        let ns = count(TransitionClass::TerminalSurvival);
        let other: f64 = self
            .classes
            .iter()
            .map(|c| match c {
                TransitionClass::NearDeath => self.config.near_death_weight,
                TransitionClass::Other => 1.0,
                _ => 0.0,
            })
            .sum();
        let (wd, ws) = solve_terminal_weights(other, nd, ns, self.config.batch_size, self.config.terminal_per_batch)?;
        self.weights = self
            .classes
            .iter()
            .map(|c| match c {
                TransitionClass::TerminalDeath => wd,
                TransitionClass::TerminalSurvival => ws,
                TransitionClass::NearDeath => self.config.near_death_weight,
                TransitionClass::Other => 1.0,
            })
            .collect();
        self.sampler = Some(WeightedIndex::new(&self.weights).map_err(|e| Error::Config(e.to_string()))?);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn tally(&self, class: TransitionClass) -> usize {
        self.classes.iter().filter(|&&c| c == class).count()
    }

    /// Sampling probability of each transition.
    pub fn probabilities(&self) -> Vec<f64> {
        let z: f64 = self.weights.iter().sum();
        self.weights.iter().map(|w| w / z).collect()
    }

    /// `n` indices drawn i.i.d. with replacement.
    pub fn sample_indices(&self, n: usize, rng: &mut Rng) -> Vec<usize> {
        match &self.sampler {
            Some(s) => (0..n).map(|_| s.sample(rng)).collect(),
            None => (0..n).map(|_| rng.random_range(0..self.len())).collect(),
        }
    }

    pub fn sample_batch(&self, n: usize, rng: &mut Rng) -> Transitions {
        self.transitions.subset(&self.sample_indices(n, rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn toy(n_other: usize, n_near: usize, n_d: usize, n_s: usize) -> Transitions {
        let n = n_other + n_near + n_d + n_s;
        let mut t = Transitions {
            states: Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64),
            next_states: Array2::zeros((n, 2)),
            actions: vec![0; n],
            rewards: vec![0.0; n],
            dones: vec![false; n],
            outcomes: vec![Outcome::Survivor; n],
            patient_ids: (0..n as u64).collect(),
            hours: vec![0; n],
            hours_to_end: vec![100; n],
        };
        for i in n_other..n_other + n_near {
            t.outcomes[i] = Outcome::Nonsurvivor;
            t.hours_to_end[i] = 10;
        }
        for i in n_other + n_near..n_other + n_near + n_d {
            t.outcomes[i] = Outcome::Nonsurvivor;
            t.dones[i] = true;
            t.hours_to_end[i] = 1;
        }
        for i in n - n_s..n {
            t.dones[i] = true;
            t.hours_to_end[i] = 1;
        }
        t
    }

    #[test]
    fn closed_form_weights() {
        for (other, nd, ns) in [(980.0, 10, 10), (5000.0, 37, 290), (123.5, 1, 4)] {
            let (wd, ws) = solve_terminal_weights(other, nd, ns, 100, 1.0).unwrap();
            assert!((wd - other / (98.0 * nd as f64)).abs() < 1e-9 * wd);
            assert!((ws - other / (98.0 * ns as f64)).abs() < 1e-9 * ws);
        }
        let (wd, ws) = solve_terminal_weights(980.0, 10, 10, 100, 1.0).unwrap();
        assert!((wd - 1.0).abs() < 1e-9 && (ws - 1.0).abs() < 1e-9);
        assert!(solve_terminal_weights(10.0, 0, 0, 100, 1.0).is_err());
    }

    #[test]
    fn store_tallies_and_expected_counts() {
        let store = ReplayStore::new(toy(900, 50, 7, 30), ReplayConfig::default()).unwrap();
        assert_eq!(store.tally(TransitionClass::NearDeath), 50);
        assert_eq!(store.tally(TransitionClass::TerminalDeath), 7);
        assert_eq!(store.tally(TransitionClass::TerminalSurvival), 30);
        let p = store.probabilities();
        let pd: f64 =
            (0..store.len()).filter(|&i| store.classes[i] == TransitionClass::TerminalDeath).map(|i| p[i]).sum();
        assert!((100.0 * pd - 1.0).abs() < 1e-9);
    }

    #[test]
    fn uniform_mode_and_determinism() {
        let cfg = ReplayConfig { mode: SamplingMode::Uniform, ..ReplayConfig::default() };
        let store = ReplayStore::new(toy(90, 5, 2, 3), cfg).unwrap();
        assert!(store.weights.iter().all(|&w| w == 1.0));
        let a = store.sample_indices(50, &mut seeded(1));
        assert_eq!(a, store.sample_indices(50, &mut seeded(1)));
    }

    #[test]
    fn single_transition_store_repeats() {
        let store =
            ReplayStore::new(toy(0, 0, 0, 1), ReplayConfig { mode: SamplingMode::Uniform, ..Default::default() })
                .unwrap();
        let b = store.sample_batch(5, &mut seeded(0));
        assert_eq!(b.len(), 5);
        assert!(b.patient_ids.iter().all(|&p| p == 0));
    }

    #[test]
    fn draw_frequencies_match_weights() {
        let store = ReplayStore::new(toy(40, 10, 3, 5), ReplayConfig::default()).unwrap();
        let draws = 1_000_000;
        let mut counts = vec![0usize; store.len()];
        for i in store.sample_indices(draws, &mut seeded(3)) {
            counts[i] += 1;
        }
        for (c, p) in counts.iter().zip(store.probabilities()) {
            let sd = (draws as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - draws as f64 * p).abs() < 4.0 * sd);
        }
    }
}
