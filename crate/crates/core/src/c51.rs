//! Categorical distributional Q-learning over 51 fixed atoms on [−18, 18].

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::{Activation, Adam, AdamConfig, Checkpoint, CheckpointMeta, Mlp, Parameters, Tensor};
use crate::replay::{ReplayStore, Transitions};
use crate::rng::{seeded, Rng};
use crate::simulator::NUM_ACTIONS;

pub const N_ATOMS: usize = 51;
pub const V_MIN: f64 = -18.0;
pub const V_MAX: f64 = 18.0;
pub const CHECKPOINT_TAG: &str = "c51";

pub fn atom(i: usize) -> f64 {
    V_MIN + (i as f64 * (V_MAX - V_MIN)) / (N_ATOMS - 1) as f64
}

pub fn atoms() -> [f64; N_ATOMS] {
    std::array::from_fn(atom)
}

pub fn atom_spacing() -> f64 {
    (V_MAX - V_MIN) / (N_ATOMS - 1) as f64
}

/// Mean return of a distribution over the atoms.
pub fn expected_q(probs: &[f64]) -> f64 {
    probs.iter().enumerate().map(|(i, p)| p * atom(i)).sum()
}

/// Projects point masses `(z, p)` through `x = r + (1 − done)·γ·z` onto the
/// atoms, splitting each mass linearly between the bracketing atoms.
pub fn project_points<I: IntoIterator<Item = (f64, f64)>>(points: I, r: f64, gamma: f64, done: bool) -> [f64; N_ATOMS] {
    let mut m = [0.0; N_ATOMS];
    let span = V_MAX - V_MIN;
    let top = N_ATOMS - 1;
    for (z, p) in points {
        let x = if done { r } else { r + gamma * z };
        // b = num / span; the split uses the exact remainder so grid-aligned
        // targets get correctly rounded weights
        let num = (x.clamp(V_MIN, V_MAX) - V_MIN) * top as f64;
        let mut l = (num / span).floor();
        let mut rem = (-l).mul_add(span, num);
        if rem < 0.0 {
            l -= 1.0;
            rem += span;
        } else if rem >= span {
            l += 1.0;
            rem -= span;
        }
        let l = (l.max(0.0) as usize).min(top);
        if rem <= 0.0 || l == top {
            m[l] += p;
        } else {
            m[l] += p * ((span - rem) / span);
            m[l + 1] += p * (rem / span);
        }
    }
    m
}

/// Distributional Bellman target for one transition.
pub fn project(target: &[f64], r: f64, gamma: f64, done: bool) -> [f64; N_ATOMS] {
    project_points(target.iter().enumerate().map(|(i, &p)| (atom(i), p)), r, gamma, done)
}

/// Per-action softmax over consecutive blocks of 51 logits.
pub fn action_softmax(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        for a in 0..NUM_ACTIONS {
            let mut block = row.slice_mut(s![a * N_ATOMS..(a + 1) * N_ATOMS]);
            let max = block.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            block.mapv_inplace(|v| (v - max).exp());
            let sum = block.sum();
            block /= sum;
        }
    }
}

/// Expected value of each action block; `probs` is `[B, 9·51]`.
pub fn expected_values(probs: ArrayView2<f64>) -> Array2<f64> {
    let z = atoms();
    let mut q = Array2::zeros((probs.nrows(), NUM_ACTIONS));
    for (i, row) in probs.rows().into_iter().enumerate() {
        for a in 0..NUM_ACTIONS {
            q[[i, a]] = row.slice(s![a * N_ATOMS..(a + 1) * N_ATOMS]).iter().zip(&z).map(|(p, z)| p * z).sum();
        }
    }
    q
}

fn argmax(v: ArrayView1<f64>) -> usize {
    crate::behavior::argmax(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct C51Config {
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub batch_size: usize,
    /// Fixed iteration count; when absent, `passes` over the replay.
    pub iterations: Option<usize>,
    pub passes: f64,
    pub lr: f64,
    pub tau: f64,
    pub checkpoint_every: usize,
}

impl Default for C51Config {
    fn default() -> Self {
        Self {
            hidden: vec![256; 3],
            gamma: 0.999,
            batch_size: 100,
            iterations: None,
            passes: 2.0,
            lr: 3e-4,
            tau: 0.005,
            checkpoint_every: 5000,
        }
    }
}

impl C51Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn iterations_for(&self, replay_len: usize) -> usize {
        self.iterations.unwrap_or_else(|| ((self.passes * replay_len as f64) / self.batch_size as f64).ceil() as usize)
    }
}

/// Distributional Q network: an MLP whose `9·51` outputs are per-action logits.
#[derive(Debug, Clone, PartialEq)]
pub struct QNet {
    pub mlp: Mlp,
}

impl Parameters for QNet {
    fn params(&self) -> Vec<&Tensor> {
        self.mlp.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp.params_mut()
    }
    fn param_names(&self) -> Vec<String> {
        self.mlp.param_names()
    }
}

impl QNet {
    pub fn new(state_dim: usize, hidden: &[usize], rng: &mut Rng) -> Self {
        let mut sizes = vec![state_dim];
        sizes.extend(hidden);
        sizes.push(NUM_ACTIONS * N_ATOMS);
        Self { mlp: Mlp::new(&sizes, Activation::Relu, Activation::Identity, rng) }
    }

    pub fn state_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn hidden(&self) -> Vec<usize> {
        let s = self.mlp.sizes();
        s[1..s.len() - 1].to_vec()
    }

    /// `[B, 9·51]` action-blocked distributions.
    pub fn probs(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut logits = self.mlp.forward(states)?;
        action_softmax(&mut logits);
        Ok(logits)
    }

    pub fn q_values(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(expected_values(self.probs(states)?.view()))
    }

    /// Distributions of all actions for one state, `[9][51]`.
    pub fn distributions(&self, state: &[f64]) -> Result<Vec<[f64; N_ATOMS]>> {
        let p = self.probs(ArrayView1::from(state).insert_axis(Axis(0)))?;
        Ok((0..NUM_ACTIONS).map(|a| std::array::from_fn(|j| p[[0, a * N_ATOMS + j]])).collect())
    }

    /// Greedy action per state, ties to the lower index.
    pub fn greedy(&self, states: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(self.q_values(states)?.rows().into_iter().map(argmax).collect())
    }

    pub fn to_checkpoint(&self, config: &C51Config, seed: u64, step: u64) -> Checkpoint {
        let architecture = serde_json::json!({
            "state_dim": self.state_dim(),
            "hidden": self.hidden(),
            "config": config,
            "atoms": { "n": N_ATOMS, "v_min": V_MIN, "v_max": V_MAX },
        });
        let mut ck = Checkpoint::new(CheckpointMeta { tag: CHECKPOINT_TAG.into(), architecture, seed, step });
        ck.push_model("q", self);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.tag != CHECKPOINT_TAG {
            return Err(Error::Checkpoint(format!("expected a {CHECKPOINT_TAG} checkpoint, got {}", ck.meta.tag)));
        }
        let a = &ck.meta.architecture;
        let dim = a
            .get("state_dim")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint("metadata lacks state_dim".into()))?;
        let hidden: Vec<usize> = serde_json::from_value(a.get("hidden").cloned().unwrap_or_default())?;
        let n = a.pointer("/atoms/n").and_then(|v| v.as_u64());
        if n != Some(N_ATOMS as u64) {
            return Err(Error::Checkpoint("checkpoint uses a different atom support".into()));
        }
        let mut net = Self::new(dim as usize, &hidden, &mut seeded(0));
        ck.load_model("q", &mut net)?;
        Ok(net)
    }
}

/// Projected targets of a batch using the target net's own greedy action.
pub fn batch_targets(target: &QNet, batch: &Transitions, gamma: f64) -> Result<Array2<f64>> {
    let tp = target.probs(batch.next_states.view())?;
    let q = expected_values(tp.view());
    let mut m = Array2::zeros((batch.len(), N_ATOMS));
    for i in 0..batch.len() {
        let a = argmax(q.row(i));
        let dist = tp.slice(s![i, a * N_ATOMS..(a + 1) * N_ATOMS]);
        let proj = project(dist.as_slice().expect("contiguous row"), batch.rewards[i], gamma, batch.dones[i]);
        m.row_mut(i).assign(&ArrayView1::from(&proj));
    }
    Ok(m)
}

/// Mean cross-entropy between projected targets and the online net's
/// distribution of the taken action, with its gradient.
pub fn loss_and_grad(net: &QNet, target: &QNet, batch: &Transitions, gamma: f64) -> Result<(f64, QNet)> {
    let m = batch_targets(target, batch, gamma)?;
    let trace = net.mlp.forward_train(batch.states.view())?;
    let logits = trace.output();
    let b = batch.len() as f64;
    let mut dlogits = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for i in 0..batch.len() {
        let a = batch.actions[i];
        let block = logits.slice(s![i, a * N_ATOMS..(a + 1) * N_ATOMS]);
        let max = block.fold(f64::NEG_INFINITY, |mx, &v| mx.max(v));
        let lse = max + block.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for j in 0..N_ATOMS {
            let logp = block[j] - lse;
            loss -= m[[i, j]] * logp;
            dlogits[[i, a * N_ATOMS + j]] = (logp.exp() - m[[i, j]]) / b;
        }
    }
    let mut grad = net.zeros_like();
    net.mlp.backward(&trace, dlogits.view(), &mut grad.mlp);
    Ok((loss / b, grad))
}

/// `target ← (1 − τ)·target + τ·online`.
pub fn polyak_update(target: &mut QNet, online: &QNet, tau: f64) {
    target.polyak_from(online, tau);
}

/// Per-iteration training losses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct C51Report {
    pub losses: Vec<f64>,
    pub iterations: usize,
}

/// Sample, Adam step on the online net, Polyak step on the target net.
/// `on_checkpoint` is called every `checkpoint_every` iterations and at the end.
pub fn train_with<F>(
    net: &mut QNet,
    replay: &ReplayStore,
    config: &C51Config,
    rng: &mut Rng,
    mut on_checkpoint: F,
) -> Result<C51Report>
where
    F: FnMut(usize, &QNet) -> Result<()>,
{
    config.validate()?;
    if net.state_dim() != replay.transitions.state_dim() {
        return Err(Error::Shape("Q network input does not match replay state dimension".into()));
    }
    let iterations = config.iterations_for(replay.len());
    let mut target = net.clone();
    let mut opt = Adam::new(net, AdamConfig::with_lr(config.lr));
    let mut losses = Vec::with_capacity(iterations);
    for it in 1..=iterations {
        let batch = replay.sample_batch(config.batch_size, rng);
        let (loss, grad) = loss_and_grad(net, &target, &batch, config.gamma)?;
        if !loss.is_finite() || !grad.all_finite() {
            return Err(Error::Diverged(format!("C51 loss became {loss} at iteration {it}")));
        }
        opt.update(net, &grad);
        polyak_update(&mut target, net, config.tau);
        losses.push(loss);
        if config.checkpoint_every > 0 && it % config.checkpoint_every == 0 {
            on_checkpoint(it, net)?;
        }
        if it % 1000 == 0 {
            log::info!("c51 iteration {it}/{iterations} loss={loss:.4}");
        }
    }
    on_checkpoint(iterations, net)?;
    Ok(C51Report { losses, iterations })
}

pub fn train(config: &C51Config, replay: &ReplayStore, seed: u64) -> Result<(QNet, C51Report)> {
    let mut rng = seeded(seed);
    let mut net = QNet::new(replay.transitions.state_dim(), &config.hidden, &mut rng);
    let report = train_with(&mut net, replay, config, &mut rng, |_, _| Ok(()))?;
    Ok((net, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::relative_errors;
    use crate::replay::{ReplayConfig, SamplingMode};
    use crate::simulator::Outcome;
    use rand::Rng as _;

    #[test]
    fn support_layout() {
        let z = atoms();
        assert_eq!(z[0], -18.0);
        assert_eq!(z[25], 0.0);
        assert_eq!(z[50], 18.0);
        assert!((atom_spacing() - 0.72).abs() < 1e-15);
    }

    #[test]
    fn expected_q_examples() {
        let mut d = [0.0; N_ATOMS];
        d[25] = 1.0;
        assert_eq!(expected_q(&d), 0.0);
        assert!(expected_q(&[1.0 / 51.0; N_ATOMS]).abs() < 1e-12);
        let mut d = [0.0; N_ATOMS];
        d[0] = 0.5;
        d[50] = 0.5;
        assert_eq!(expected_q(&d), 0.0);
        let mut d = [0.0; N_ATOMS];
        d[46] = 1.0;
        assert!((expected_q(&d) - 15.12).abs() < 1e-12);
    }

    #[test]
    fn projection_hand_cases() {
        let mut any = [0.0; N_ATOMS];
        any[3] = 1.0;
        let m = project(&any, 15.0, 0.999, true);
        assert_eq!((m[45], m[46]), (1.0 / 6.0, 5.0 / 6.0));
        assert_eq!(m.iter().filter(|&&v| v != 0.0).count(), 2);
        let uniform = [1.0 / 51.0; N_ATOMS];
        assert!((project(&uniform, 15.0, 0.999, true)[46] - 5.0 / 6.0).abs() < 1e-12);
        let m = project(&any, 0.0, 0.999, true);
        assert!((m[25] - 1.0).abs() < 1e-12);
        assert_eq!(m.iter().filter(|&&v| v != 0.0).count(), 1);
        let m = project_points([(10.0, 1.0)], 0.0, 0.999, false);
        assert!((m[38] - 0.125).abs() < 1e-9 && (m[39] - 0.875).abs() < 1e-9);
    }

    fn toy_batch(n: usize, dim: usize, rng: &mut Rng) -> Transitions {
        Transitions {
            states: Array2::from_shape_fn((n, dim), |_| rng.random_range(-1.0..1.0)),
            next_states: Array2::from_shape_fn((n, dim), |_| rng.random_range(-1.0..1.0)),
            actions: (0..n).map(|_| rng.random_range(0..NUM_ACTIONS)).collect(),
            rewards: (0..n).map(|i| if i == 0 { 15.0 } else { rng.random_range(-1.0..1.0) }).collect(),
            dones: (0..n).map(|i| i == 0).collect(),
            outcomes: vec![Outcome::Survivor; n],
            patient_ids: (0..n as u64).collect(),
            hours: vec![0; n],
            hours_to_end: vec![5; n],
        }
    }

    #[test]
    fn loss_gradient_check_and_bounds() {
        let mut rng = seeded(0);
        let net = QNet::new(4, &[6, 6], &mut rng);
        let target = QNet::new(4, &[6, 6], &mut rng);
        let batch = toy_batch(5, 4, &mut rng);
        let pairs = relative_errors(&net, |n| loss_and_grad(n, &target, &batch, 0.99).unwrap(), 1e-5);
        // loss is O(1) and many entries are O(1e-7), so compare against the largest gradient
        let scale = pairs.iter().fold(0.0f64, |m, p| m.max(p.0.abs()));
        let worst = pairs.iter().map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-6 * scale, "{worst} vs {scale}");
        let big: Vec<_> = pairs.into_iter().filter(|p| p.1.abs() > 1e-3 * scale).collect();
        assert!(big.iter().all(|(a, n)| (a - n).abs() / n.abs() < 1e-4));
        let (loss, _) = loss_and_grad(&net, &target, &batch, 0.99).unwrap();
        assert!(loss >= 0.0);
    }

    #[test]
    fn loss_is_entropy_when_prediction_matches() {
        let mut rng = seeded(1);
        let mut net = QNet::new(3, &[4], &mut rng);
        net.mlp = net.mlp.zero_last_layer();
        let mut batch = toy_batch(3, 3, &mut rng);
        // uniform prediction; target is uniform if it stays the prediction
        batch.rewards = vec![0.0; 3];
        batch.dones = vec![false; 3];
        let m = batch_targets(&net, &batch, 1e-9).unwrap();
        let (loss, _) = loss_and_grad(&net, &net, &batch, 1e-9).unwrap();
        let (prob_loss, _) = {
            let mut n2 = net.clone();
            let l = n2.mlp.layers.len() - 1;
            n2.mlp.layers[l].b.fill(0.0);
            loss_and_grad(&n2, &n2, &batch, 1e-9).unwrap()
        };
        assert_eq!(loss, prob_loss);
        // target concentrates on the zero atom, prediction is uniform
        assert!((m[[0, 25]] - 1.0).abs() < 1e-6);
        assert!((loss - 51f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn polyak_extremes_and_geometric_decay() {
        let mut rng = seeded(2);
        let online = QNet::new(3, &[4], &mut rng);
        let start = QNet::new(3, &[4], &mut rng);
        let mut t = start.clone();
        polyak_update(&mut t, &online, 1.0);
        assert_eq!(t, online);
        let mut t = start.clone();
        polyak_update(&mut t, &online, 0.0);
        assert_eq!(t, start);
        let dist = |a: &QNet| a.flat().iter().zip(online.flat()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let d0 = dist(&start);
        let mut t = start;
        for k in 1..=50 {
            polyak_update(&mut t, &online, 0.1);
            assert!((dist(&t) - 0.9f64.powi(k) * d0).abs() < 1e-12 * d0.max(1.0));
        }
    }

    #[test]
    fn reward_free_training_collapses_to_zero_and_is_reproducible() {
        let mut rng = seeded(3);
        let mut batch = toy_batch(20, 2, &mut rng);
        batch.rewards = vec![0.0; 20];
        batch.dones = (0..20).map(|i| i % 4 == 0).collect();
        let replay =
            ReplayStore::new(batch, ReplayConfig { mode: SamplingMode::Uniform, ..Default::default() }).unwrap();
        let cfg = C51Config {
            hidden: vec![16],
            iterations: Some(600),
            lr: 3e-3,
            tau: 0.1,
            gamma: 0.9,
            batch_size: 20,
            ..Default::default()
        };
        let (a, ra) = train(&cfg, &replay, 7).unwrap();
        let (b, _) = train(&cfg, &replay, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.iterations, 600);
        let q = a.q_values(replay.transitions.states.view()).unwrap();
        assert!(q.iter().all(|v| v.abs() < 1.0), "{q:?}");
        let d = a.distributions(&[0.1, 0.2]).unwrap();
        assert!(d.iter().all(|row| (row.iter().sum::<f64>() - 1.0).abs() < 1e-9));
        let ck = a.to_checkpoint(&cfg, 7, 600);
        assert_eq!(QNet::from_checkpoint(&ck).unwrap(), a);
    }

    fn oracle(target: &[f64], r: f64, gamma: f64, done: bool) -> Vec<f64> {
        let dz = atom_spacing();
        (0..N_ATOMS)
            .map(|i| {
                (0..N_ATOMS)
                    .map(|j| {
                        let tz = if done { r } else { r + gamma * atom(j) }.clamp(V_MIN, V_MAX);
                        target[j] * (1.0 - (tz - atom(i)).abs() / dz).max(0.0)
                    })
                    .sum()
            })
            .collect()
    }

    proptest::proptest! {
        #[test]
        fn projection_matches_triangle_kernel(
            raw in proptest::collection::vec(0.0f64..1.0, N_ATOMS),
            r in -25.0f64..25.0,
            gamma in 0.0f64..1.0,
            done: bool,
        ) {
            let total: f64 = raw.iter().sum::<f64>() + 1e-9;
            let p: Vec<f64> = raw.iter().map(|v| (v + 1e-9 / N_ATOMS as f64) / total).collect();
            let m = project(&p, r, gamma, done);
            proptest::prop_assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            proptest::prop_assert!(m.iter().all(|&v| v >= 0.0));
            for (a, b) in m.iter().zip(oracle(&p, r, gamma, done)) {
                proptest::prop_assert!((a - b).abs() < 1e-9);
            }
            // mean is preserved unless clipping at the support edges kicks in
            let tz_range = if done { (r, r) } else { (r + gamma * V_MIN, r + gamma * V_MAX) };
            if tz_range.0 >= V_MIN && tz_range.1 <= V_MAX {
                let mean = if done { r } else { r + gamma * expected_q(&p) };
                proptest::prop_assert!((expected_q(&m) - mean).abs() < 1e-9);
            }
        }
    }
}
