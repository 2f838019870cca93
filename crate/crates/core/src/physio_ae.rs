//! Physiology-driven denoising recurrent autoencoder.
//!
//! A patient encoder maps demographics to an initial latent, a GRU encodes
//! the (corrupted) history of vitals and scores, and a transition network
//! combines the previous latent, the previous action and the history into
//! four log-deviations `(R, C, SV, F)`. The decoder is the fixed Windkessel
//! map in [`crate::cardio`], differentiated analytically.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cardio::{self, CardioBaselines, CardioParams, MAX_DEVIATION};
use crate::error::{Error, Result};
use crate::nnet::{
    clip_global_norm, Activation, Adam, AdamConfig, Checkpoint, CheckpointMeta, Gru, GruSequence, Mlp, MlpTrace,
    Parameters, Tensor,
};
use crate::rl_state::Scaler;
use crate::rng::{seeded, Rng};
use crate::simulator::{Trajectory, NUM_ACTIONS};

/// Vitals and scores fed to the history encoder.
pub const OBS_INPUTS: usize = 12;
pub const LATENT_DIM: usize = 4;
const GRU_INPUT: usize = OBS_INPUTS + NUM_ACTIONS;
pub const CHECKPOINT_TAG: &str = "physio_ae";

/// Zeroes each element independently with probability `p`.
pub fn corrupt(x: &mut [f64], p: f64, rng: &mut Rng) {
    if p <= 0.0 {
        return;
    }
    for v in x {
        if rng.random::<f64>() < p {
            *v = 0.0;
        }
    }
}

/// Corruption probability per epoch: zero before `start_epoch`, then a
/// linear ramp reaching `target` after `ramp_epochs` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSchedule {
    pub target: f64,
    pub start_epoch: usize,
    pub ramp_epochs: usize,
}

impl CorruptionSchedule {
    pub fn constant(p: f64) -> Self {
        Self { target: p, start_epoch: 0, ramp_epochs: 1 }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        if epoch < self.start_epoch {
            return 0.0;
        }
        let done = (epoch - self.start_epoch + 1) as f64 / self.ramp_epochs.max(1) as f64;
        self.target * done.min(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.target) {
            return Err(Error::Config(format!("corruption probability {} outside [0, 0.5]", self.target)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysioConfig {
    pub patient_hidden: Vec<usize>,
    pub gru_hidden: usize,
    pub transition_hidden: Vec<usize>,
}

impl Default for PhysioConfig {
    fn default() -> Self {
        Self { patient_hidden: vec![64; 3], gru_hidden: 64, transition_hidden: vec![128; 8] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysioTrainConfig {
    pub epochs: usize,
    /// Patients per minibatch.
    pub batch_size: usize,
    pub lr: f64,
    pub corruption: CorruptionSchedule,
    pub clip_norm: f64,
}

impl Default for PhysioTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 1e-5,
            corruption: CorruptionSchedule { target: 0.1, start_epoch: 2, ramp_epochs: 3 },
            clip_norm: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhysioAe {
    pub config: PhysioConfig,
    /// Population reference values the deviations are measured against.
    pub baselines: CardioBaselines,
    pub obs_scaler: Scaler,
    pub static_scaler: Scaler,
    pub patient: Mlp,
    pub gru: Gru,
    pub transition: Mlp,
}

impl Parameters for PhysioAe {
    fn params(&self) -> Vec<&Tensor> {
        let mut v = self.patient.params();
        v.extend(self.gru.params());
        v.extend(self.transition.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.patient.params_mut();
        v.extend(self.gru.params_mut());
        v.extend(self.transition.params_mut());
        v
    }
    fn param_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.patient.param_names().into_iter().map(|n| format!("patient.{n}")).collect();
        v.extend(self.gru.param_names().into_iter().map(|n| format!("gru.{n}")));
        v.extend(self.transition.param_names().into_iter().map(|n| format!("transition.{n}")));
        v
    }
}

/// Padded minibatch of patients, time-major.
#[derive(Debug, Clone)]
pub struct PhysioBatch {
    pub static_x: Array2<f64>,
    /// `[B, 12 + 9]` per hour: standardized corrupted observations and the
    /// one-hot previous action.
    pub inputs: Vec<Array2<f64>>,
    /// `[B, 4]` per hour: uncorrupted (SBP, DBP, MAP, HR).
    pub targets: Vec<Array2<f64>>,
    /// `[B]` per hour: 1 inside the trajectory, 0 in padding.
    pub mask: Vec<Array1<f64>>,
}

impl PhysioBatch {
    pub fn valid_steps(&self) -> f64 {
        self.mask.iter().map(|m| m.sum()).sum()
    }
}

struct Forward {
    patient: MlpTrace,
    seq: GruSequence,
    transition: Vec<MlpTrace>,
    deltas: Vec<Array2<f64>>,
    preds: Vec<Array2<f64>>,
    jacobians: Vec<Vec<[[f64; 4]; 4]>>,
}

fn squash(x: f64) -> f64 {
    MAX_DEVIATION * (x / MAX_DEVIATION).tanh()
}

fn obs_features(r: &crate::simulator::HourRecord) -> [f64; OBS_INPUTS] {
    let mut x = [0.0; OBS_INPUTS];
    x[..7].copy_from_slice(&r.obs.vitals);
    x[7..].copy_from_slice(&r.obs.scores);
    x
}

fn static_features(t: &Trajectory) -> [f64; 3] {
    [t.static_.age, f64::from(t.static_.gender), t.static_.weight]
}

/// Observed (SBP, DBP, MAP, HR), matching [`cardio::Pressures`] order.
pub fn pressure_targets(r: &crate::simulator::HourRecord) -> [f64; 4] {
    let v = &r.obs.vitals;
    [v[1], v[2], v[3], v[0]]
}

impl PhysioAe {
    /// Random initialization; the transition net's last layer starts at zero
    /// so every initial reconstruction equals the baseline pressures.
    pub fn new(
        config: PhysioConfig,
        baselines: CardioBaselines,
        obs_scaler: Scaler,
        static_scaler: Scaler,
        rng: &mut Rng,
    ) -> Result<Self> {
        baselines.validate()?;
        if obs_scaler.dim() != OBS_INPUTS || static_scaler.dim() != 3 {
            return Err(Error::Shape("physio scalers must cover 12 observations and 3 demographics".into()));
        }
        let mut ps = vec![3];
        ps.extend(&config.patient_hidden);
        ps.push(LATENT_DIM);
        let patient = Mlp::new(&ps, Activation::Elu, Activation::Identity, rng);
        let gru = Gru::new(GRU_INPUT, config.gru_hidden, rng);
        let mut ts = vec![LATENT_DIM + NUM_ACTIONS + config.gru_hidden];
        ts.extend(&config.transition_hidden);
        ts.push(LATENT_DIM);
        let transition = Mlp::new(&ts, Activation::Elu, Activation::Identity, rng).zero_last_layer();
        Ok(Self { config, baselines, obs_scaler, static_scaler, patient, gru, transition })
    }

    /// Scalers fitted on `train`, then [`PhysioAe::new`].
    pub fn for_cohort(
        config: PhysioConfig,
        baselines: CardioBaselines,
        train: &[Trajectory],
        rng: &mut Rng,
    ) -> Result<Self> {
        let obs: Vec<[f64; OBS_INPUTS]> = train.iter().flat_map(|t| t.records.iter().map(obs_features)).collect();
        let st: Vec<[f64; 3]> = train.iter().map(static_features).collect();
        let obs_scaler = Scaler::fit_rows(obs.iter().map(|r| r.as_slice()), OBS_INPUTS)?;
        let static_scaler = Scaler::fit_rows(st.iter().map(|r| r.as_slice()), 3)?;
        Self::new(config, baselines, obs_scaler, static_scaler, rng)
    }

    /// Builds a padded batch. Observations are standardized and then zeroed
    /// with probability `p`, so a dropped value reads as the training mean.
    /// Actions are never corrupted.
    pub fn make_batch(&self, trajs: &[&Trajectory], p: f64, rng: &mut Rng) -> Result<PhysioBatch> {
        let b = trajs.len();
        let steps = trajs.iter().map(|t| t.len()).max().unwrap_or(0);
        let mut static_x = Array2::zeros((b, 3));
        for (i, t) in trajs.iter().enumerate() {
            let mut s = static_features(t);
            self.static_scaler.standardize_in_place(&mut s)?;
            static_x.row_mut(i).assign(&ArrayView1::from(&s));
        }
        let mut inputs = Vec::with_capacity(steps);
        let mut targets = Vec::with_capacity(steps);
        let mut mask = Vec::with_capacity(steps);
        for h in 0..steps {
            let mut x = Array2::zeros((b, GRU_INPUT));
            let mut y = Array2::zeros((b, LATENT_DIM));
            let mut m = Array1::zeros(b);
            for (i, t) in trajs.iter().enumerate() {
                let Some(r) = t.records.get(h) else { continue };
                let mut o = obs_features(r);
                self.obs_scaler.standardize_in_place(&mut o)?;
                corrupt(&mut o, p, rng);
                x.slice_mut(s![i, ..OBS_INPUTS]).assign(&ArrayView1::from(&o));
                if h > 0 {
                    x[[i, OBS_INPUTS + t.records[h - 1].action.flat()]] = 1.0;
                }
                y.row_mut(i).assign(&ArrayView1::from(&pressure_targets(r)));
                m[i] = 1.0;
            }
            inputs.push(x);
            targets.push(y);
            mask.push(m);
        }
        Ok(PhysioBatch { static_x, inputs, targets, mask })
    }

    fn decode_rows(&self, delta: &Array2<f64>) -> Result<(Array2<f64>, Vec<[[f64; 4]; 4]>)> {
        let mut out = Array2::zeros(delta.raw_dim());
        let mut jac = Vec::with_capacity(delta.nrows());
        for (i, row) in delta.rows().into_iter().enumerate() {
            let params = cardio::from_deviations([row[0], row[1], row[2], row[3]], &self.baselines);
            let (p, j) = cardio::decode_log_jacobian(&params)?;
            out.row_mut(i).assign(&ArrayView1::from(&p.to_array()));
            jac.push(j);
        }
        Ok((out, jac))
    }

    fn transition_input(prev: &Array2<f64>, x: &Array2<f64>, h: &Array2<f64>) -> Array2<f64> {
        let actions = x.slice(s![.., OBS_INPUTS..]);
        ndarray::concatenate(Axis(1), &[prev.view(), actions, h.view()]).expect("row counts agree")
    }

    fn forward(&self, batch: &PhysioBatch) -> Result<Forward> {
        let b = batch.static_x.nrows();
        let patient = self.patient.forward_train(batch.static_x.view())?;
        let h0 = Array2::zeros((b, self.gru.hidden_dim()));
        let seq = self.gru.forward_sequence(h0.view(), &batch.inputs, None)?;
        let mut prev = patient.output().clone();
        let steps = batch.inputs.len();
        let mut transition = Vec::with_capacity(steps);
        let mut deltas = Vec::with_capacity(steps);
        let mut preds = Vec::with_capacity(steps);
        let mut jacobians = Vec::with_capacity(steps);
        for t in 0..steps {
            let input = Self::transition_input(&prev, &batch.inputs[t], &seq.hidden[t]);
            let trace = self.transition.forward_train(input.view())?;
            let delta = trace.output().mapv(squash);
            let (pred, jac) = self.decode_rows(&delta)?;
            transition.push(trace);
            preds.push(pred);
            jacobians.push(jac);
            prev = delta.clone();
            deltas.push(delta);
        }
        Ok(Forward { patient, seq, transition, deltas, preds, jacobians })
    }

    /// Mean squared reconstruction error per valid step and output, with its
    /// gradient with respect to every trainable parameter.
    pub fn loss_and_grad(&self, batch: &PhysioBatch) -> Result<(f64, PhysioAe)> {
        let fwd = self.forward(batch)?;
        let n = batch.valid_steps() * LATENT_DIM as f64;
        let mut grad = self.zeros_like();
        if n == 0.0 {
            return Ok((0.0, grad));
        }
        let mut loss = 0.0;
        let steps = batch.inputs.len();
        let hd = self.gru.hidden_dim();
        let mut dh = vec![Array2::zeros((batch.static_x.nrows(), hd)); steps];
        let mut carry = Array2::<f64>::zeros((batch.static_x.nrows(), LATENT_DIM));
        for t in (0..steps).rev() {
            let m = batch.mask[t].view().insert_axis(Axis(1));
            let diff = (&fwd.preds[t] - &batch.targets[t]) * m;
            loss += diff.iter().map(|d| d * d).sum::<f64>();
            let dpred = diff * (2.0 / n);
            let mut ddelta = carry;
            for (i, jac) in fwd.jacobians[t].iter().enumerate() {
                for j in 0..LATENT_DIM {
                    ddelta[[i, j]] += (0..4).map(|k| jac[k][j] * dpred[[i, k]]).sum::<f64>();
                }
            }
            let dpre = ddelta * &fwd.deltas[t].mapv(|d| 1.0 - (d / MAX_DEVIATION).powi(2));
            let din = self.transition.backward(&fwd.transition[t], dpre.view(), &mut grad.transition);
            carry = din.slice(s![.., ..LATENT_DIM]).to_owned();
            dh[t] = din.slice(s![.., LATENT_DIM + NUM_ACTIONS..]).to_owned();
        }
        self.patient.backward(&fwd.patient, carry.view(), &mut grad.patient);
        self.gru.backward_sequence(&fwd.seq, &dh, &mut grad.gru);
        Ok((loss / n, grad))
    }

    /// Mean squared error per valid step and output, without gradients.
    pub fn batch_loss(&self, batch: &PhysioBatch) -> Result<f64> {
        let (sum, n) = self.batch_sse(batch)?;
        Ok(if n == 0.0 { 0.0 } else { sum / n })
    }

    fn batch_sse(&self, batch: &PhysioBatch) -> Result<(f64, f64)> {
        let outs = self.run(batch)?;
        let mut sum = 0.0;
        for (t, (_, pred)) in outs.iter().enumerate() {
            let m = batch.mask[t].view().insert_axis(Axis(1));
            let diff = (pred - &batch.targets[t]) * m;
            sum += diff.iter().map(|d| d * d).sum::<f64>();
        }
        Ok((sum, batch.valid_steps() * LATENT_DIM as f64))
    }

    /// Inference pass keeping only deviations and reconstructions.
    fn run(&self, batch: &PhysioBatch) -> Result<Vec<(Array2<f64>, Array2<f64>)>> {
        let b = batch.static_x.nrows();
        let mut prev = self.patient.forward(batch.static_x.view())?;
        let mut h = Array2::zeros((b, self.gru.hidden_dim()));
        let mut out = Vec::with_capacity(batch.inputs.len());
        for x in &batch.inputs {
            h = self.gru.step(h.view(), x.view())?;
            let input = Self::transition_input(&prev, x, &h);
            let delta = self.transition.forward(input.view())?.mapv(squash);
            let (pred, _) = self.decode_rows(&delta)?;
            prev = delta.clone();
            out.push((delta, pred));
        }
        Ok(out)
    }

    /// Per-hour deviations for each trajectory, without corruption.
    pub fn encode(&self, trajs: &[Trajectory]) -> Result<Vec<Vec<[f64; 4]>>> {
        let mut rng = seeded(0);
        let mut out = vec![Vec::new(); trajs.len()];
        let mut order: Vec<usize> = (0..trajs.len()).collect();
        order.sort_by_key(|&i| trajs[i].len());
        for chunk in order.chunks(64) {
            let refs: Vec<&Trajectory> = chunk.iter().map(|&i| &trajs[i]).collect();
            let batch = self.make_batch(&refs, 0.0, &mut rng)?;
            let steps = self.run(&batch)?;
            for (bi, &ti) in chunk.iter().enumerate() {
                out[ti] = (0..trajs[ti].len())
                    .map(|t| {
                        let d = steps[t].0.row(bi);
                        [d[0], d[1], d[2], d[3]]
                    })
                    .collect();
            }
        }
        Ok(out)
    }

    /// Per-hour cardiovascular parameters inferred without corruption.
    pub fn cardio_latents(&self, trajs: &[Trajectory]) -> Result<Vec<Vec<CardioParams>>> {
        Ok(self
            .encode(trajs)?
            .into_iter()
            .map(|ds| ds.into_iter().map(|d| cardio::from_deviations(d, &self.baselines)).collect())
            .collect())
    }

    /// Per-hour (SBP, DBP, MAP, HR) reconstructions with inputs corrupted at `p`.
    pub fn reconstruct(&self, traj: &Trajectory, p: f64, rng: &mut Rng) -> Result<Vec<[f64; 4]>> {
        let batch = self.make_batch(&[traj], p, rng)?;
        Ok(self.run(&batch)?.into_iter().map(|(_, y)| [y[[0, 0]], y[[0, 1]], y[[0, 2]], y[[0, 3]]]).collect())
    }

    /// Mean squared reconstruction error per step and output over `trajs`,
    /// with inputs corrupted at `p` by a generator seeded with `seed`.
    pub fn evaluate(&self, trajs: &[Trajectory], p: f64, seed: u64) -> Result<f64> {
        let mut rng = seeded(seed);
        let (mut sum, mut n) = (0.0, 0.0);
        let mut order: Vec<usize> = (0..trajs.len()).collect();
        order.sort_by_key(|&i| trajs[i].len());
        for chunk in order.chunks(64) {
            let refs: Vec<&Trajectory> = chunk.iter().map(|&i| &trajs[i]).collect();
            let batch = self.make_batch(&refs, p, &mut rng)?;
            let (s, c) = self.batch_sse(&batch)?;
            sum += s;
            n += c;
        }
        Ok(if n == 0.0 { 0.0 } else { sum / n })
    }

    pub fn to_checkpoint(&self, seed: u64, step: u64, corruption: &CorruptionSchedule) -> Checkpoint {
        let architecture = serde_json::json!({
            "config": self.config,
            "baselines": self.baselines,
            "obs_scaler": self.obs_scaler,
            "static_scaler": self.static_scaler,
            "corruption": corruption,
        });
        let mut ck = Checkpoint::new(CheckpointMeta { tag: CHECKPOINT_TAG.into(), architecture, seed, step });
        ck.push_model("physio_ae", self);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.tag != CHECKPOINT_TAG {
            return Err(Error::Checkpoint(format!("expected a {CHECKPOINT_TAG} checkpoint, got {}", ck.meta.tag)));
        }
        let a = &ck.meta.architecture;
        let field = |k: &str| a.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("metadata lacks {k}")));
        let config: PhysioConfig = serde_json::from_value(field("config")?)?;
        let baselines: CardioBaselines = serde_json::from_value(field("baselines")?)?;
        let obs_scaler: Scaler = serde_json::from_value(field("obs_scaler")?)?;
        let static_scaler: Scaler = serde_json::from_value(field("static_scaler")?)?;
        let mut model = Self::new(config, baselines, obs_scaler, static_scaler, &mut seeded(0))?;
        ck.load_model("physio_ae", &mut model)?;
        Ok(model)
    }
}

/// Per-epoch training diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub corruption: Vec<f64>,
}

/// Length-bucketed minibatches in a seeded random order.
pub(crate) fn length_batches(trajs: &[Trajectory], batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..trajs.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| trajs[i].len());
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
    batches.shuffle(rng);
    batches
}

/// Minimizes reconstruction error of uncorrupted pressures with Adam and
/// global-norm clipping. Validation (if given) is scored each epoch with the
/// epoch's corruption level and a fixed seed.
pub fn train(
    model: &mut PhysioAe,
    train_set: &[Trajectory],
    val_set: Option<&[Trajectory]>,
    config: &PhysioTrainConfig,
    rng: &mut Rng,
) -> Result<TrainReport> {
    config.corruption.validate()?;
    let mut opt = Adam::new(model, AdamConfig::with_lr(config.lr));
    let mut report = TrainReport::default();
    let val_seed = rng.random::<u64>();
    for epoch in 0..config.epochs {
        let p = config.corruption.at(epoch);
        let (mut total, mut count) = (0.0, 0.0);
        for idx in length_batches(train_set, config.batch_size, rng) {
            let refs: Vec<&Trajectory> = idx.iter().map(|&i| &train_set[i]).collect();
            let batch = model.make_batch(&refs, p, rng)?;
            let (loss, mut grad) = model.loss_and_grad(&batch)?;
            if !loss.is_finite() || !grad.all_finite() {
                return Err(Error::Diverged(format!("physio autoencoder loss became {loss} in epoch {epoch}")));
            }
            clip_global_norm(&mut grad, config.clip_norm);
            opt.update(model, &grad);
            let w = batch.valid_steps();
            total += loss * w;
            count += w;
        }
        report.train_loss.push(total / count.max(1.0));
        report.corruption.push(p);
        if let Some(val) = val_set {
            report.val_loss.push(model.evaluate(val, p, val_seed)?);
        }
        log::info!(
            "physio_ae epoch {} p={p:.3} train={:.4} val={:?}",
            epoch + 1,
            report.train_loss[epoch],
            report.val_loss.last()
        );
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::grad_check;
    use crate::simulator::{generate_cohort, SimConfig};

    fn tiny_config() -> PhysioConfig {
        PhysioConfig { patient_hidden: vec![5, 5], gru_hidden: 4, transition_hidden: vec![6, 6] }
    }

    fn tiny(seed: u64, cohort: &[Trajectory]) -> PhysioAe {
        PhysioAe::for_cohort(tiny_config(), CardioBaselines::default(), cohort, &mut seeded(seed)).unwrap()
    }

    #[test]
    fn corruption_extremes_and_rate() {
        let mut rng = seeded(0);
        let mut x: Vec<f64> = (1..=100).map(f64::from).collect();
        let orig = x.clone();
        corrupt(&mut x, 0.0, &mut rng);
        assert_eq!(x, orig);
        corrupt(&mut x, 1.0, &mut rng);
        assert!(x.iter().all(|&v| v == 0.0));
        let mut big = vec![1.0; 1_000_000];
        corrupt(&mut big, 0.25, &mut rng);
        let frac = big.iter().filter(|&&v| v == 0.0).count() as f64 / 1e6;
        assert!((frac - 0.25).abs() < 0.002, "{frac}");
    }

    #[test]
    fn schedule_ramps_after_start() {
        let s = CorruptionSchedule { target: 0.3, start_epoch: 2, ramp_epochs: 3 };
        let ps: Vec<f64> = (0..7).map(|e| s.at(e)).collect();
        assert_eq!(ps[..2], [0.0, 0.0]);
        assert!((ps[2] - 0.1).abs() < 1e-12 && (ps[3] - 0.2).abs() < 1e-12);
        assert_eq!(ps[4..], [0.3, 0.3, 0.3]);
        assert!(CorruptionSchedule::constant(0.6).validate().is_err());
    }

    #[test]
    fn untrained_model_outputs_baseline_pressures() {
        let cohort = generate_cohort(3, 1, &SimConfig::default()).unwrap();
        let model = tiny(2, &cohort);
        let base = cardio::decode(&CardioBaselines::default().params()).unwrap().to_array();
        let rec = model.reconstruct(&cohort[0], 0.25, &mut seeded(3)).unwrap();
        assert_eq!(rec.len(), cohort[0].len());
        for r in rec {
            for (a, b) in r.iter().zip(base) {
                assert!((a - b).abs() < 1e-9 * b);
            }
        }
    }

    #[test]
    fn reconstruction_is_deterministic_and_bounded() {
        let cohort = generate_cohort(4, 1, &SimConfig::default()).unwrap();
        let mut model = tiny(2, &cohort);
        let mut rng = seeded(9);
        for p in model.transition.params_mut() {
            for v in p.data_mut() {
                *v = rng.random_range(-2.0..2.0);
            }
        }
        let a = model.reconstruct(&cohort[1], 0.1, &mut seeded(4)).unwrap();
        let b = model.reconstruct(&cohort[1], 0.1, &mut seeded(4)).unwrap();
        assert_eq!(a, b);
        for d in model.encode(&cohort).unwrap().iter().flatten() {
            assert!(d.iter().all(|v| v.abs() < MAX_DEVIATION));
        }
    }

    #[test]
    fn gradient_of_unrolled_encoder_and_decoder() {
        let cohort = generate_cohort(3, 5, &SimConfig::default()).unwrap();
        let mut model = tiny(6, &cohort);
        let mut rng = seeded(7);
        // leave the zero start so the decoder Jacobian is exercised off baseline
        for p in model.transition.params_mut() {
            for v in p.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let short: Vec<Trajectory> =
            cohort.iter().map(|t| Trajectory { records: t.records[..t.len().min(4)].to_vec(), ..t.clone() }).collect();
        let refs: Vec<&Trajectory> = short.iter().collect();
        let batch = model.make_batch(&refs, 0.2, &mut rng).unwrap();
        let err = grad_check(&model, |m| m.loss_and_grad(&batch).unwrap(), 1e-5);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let cohort = generate_cohort(4, 1, &SimConfig::default()).unwrap();
        let mut model = tiny(2, &cohort);
        let before = model.clone();
        let cfg = PhysioTrainConfig { epochs: 0, ..PhysioTrainConfig::default() };
        let report = train(&mut model, &cohort, None, &cfg, &mut seeded(1)).unwrap();
        assert_eq!(model, before);
        assert!(report.train_loss.is_empty());
    }

    #[test]
    fn training_reduces_loss() {
        let cohort = generate_cohort(40, 2, &SimConfig::default()).unwrap();
        let mut model = tiny(3, &cohort);
        let cfg = PhysioTrainConfig {
            epochs: 10,
            batch_size: 8,
            lr: 1e-2,
            corruption: CorruptionSchedule::constant(0.0),
            clip_norm: 5.0,
        };
        let report = train(&mut model, &cohort[..30], Some(&cohort[30..]), &cfg, &mut seeded(1)).unwrap();
        assert!(report.val_loss[9] < report.val_loss[0], "{:?}", report.val_loss);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cohort = generate_cohort(3, 1, &SimConfig::default()).unwrap();
        let model = tiny(2, &cohort);
        let ck = model.to_checkpoint(2, 0, &CorruptionSchedule::constant(0.1));
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = PhysioAe::from_checkpoint(&Checkpoint::read_from(buf.as_slice()).unwrap()).unwrap();
        assert_eq!(back, model);
    }
}
