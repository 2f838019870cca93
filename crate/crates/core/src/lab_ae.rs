//! Denoising stacked-GRU autoencoder for the lab history.
//!
//! Three GRUs are stacked with linear projections between them; the last
//! has 10 units and its hidden state is the lab representation. A per-step
//! linear readout maps it back to the 12 standardized labs.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::{
    clip_global_norm, Activation, Adam, AdamConfig, Checkpoint, CheckpointMeta, Dense, Gru, GruSequence, Parameters,
    Tensor,
};
use crate::physio_ae::{corrupt, length_batches, CorruptionSchedule, TrainReport};
use crate::rl_state::{Scaler, LAB_LATENT_DIM};
use crate::rng::{seeded, Rng};
use crate::simulator::Trajectory;

pub const NUM_LABS: usize = 12;
pub const CHECKPOINT_TAG: &str = "lab_ae";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    pub stage1_hidden: usize,
    pub stage1_proj: usize,
    pub stage2_hidden: usize,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self { stage1_hidden: 128, stage1_proj: 64, stage2_hidden: 64 }
    }
}

impl LabConfig {
    /// The larger 512/128/128 stack.
    pub fn full() -> Self {
        Self { stage1_hidden: 512, stage1_proj: 128, stage2_hidden: 128 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub corruption: CorruptionSchedule,
    pub clip_norm: f64,
}

impl Default for LabTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 32,
            lr: 1e-3,
            corruption: CorruptionSchedule { target: 0.5, start_epoch: 1, ramp_epochs: 5 },
            clip_norm: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabAe {
    pub config: LabConfig,
    pub scaler: Scaler,
    pub gru1: Gru,
    pub proj1: Dense,
    pub gru2: Gru,
    pub proj2: Dense,
    pub gru3: Gru,
    pub readout: Dense,
}

impl Parameters for LabAe {
    fn params(&self) -> Vec<&Tensor> {
        let mut v = self.gru1.params();
        v.extend(self.proj1.params());
        v.extend(self.gru2.params());
        v.extend(self.proj2.params());
        v.extend(self.gru3.params());
        v.extend(self.readout.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.gru1.params_mut();
        v.extend(self.proj1.params_mut());
        v.extend(self.gru2.params_mut());
        v.extend(self.proj2.params_mut());
        v.extend(self.gru3.params_mut());
        v.extend(self.readout.params_mut());
        v
    }
    fn param_names(&self) -> Vec<String> {
        let parts: [(&str, Vec<String>); 6] = [
            ("gru1", self.gru1.param_names()),
            ("proj1", self.proj1.param_names()),
            ("gru2", self.gru2.param_names()),
            ("proj2", self.proj2.param_names()),
            ("gru3", self.gru3.param_names()),
            ("readout", self.readout.param_names()),
        ];
        parts.into_iter().flat_map(|(p, names)| names.into_iter().map(move |n| format!("{p}.{n}"))).collect()
    }
}

/// Padded minibatch of standardized lab sequences, time-major.
#[derive(Debug, Clone)]
pub struct LabBatch {
    pub inputs: Vec<Array2<f64>>,
    pub targets: Vec<Array2<f64>>,
    pub mask: Vec<Array1<f64>>,
}

struct Stage {
    xs: Vec<Array2<f64>>,
    seq: GruSequence,
}

struct Forward {
    s1: Stage,
    p1: Vec<Array2<f64>>,
    s2: Stage,
    p2: Vec<Array2<f64>>,
    s3: Stage,
    out: Vec<Array2<f64>>,
}

fn project(layer: &Dense, hs: &[Array2<f64>]) -> Result<Vec<Array2<f64>>> {
    hs.iter().map(|h| layer.forward(h.view())).collect()
}

impl LabAe {
    pub fn new(config: LabConfig, scaler: Scaler, rng: &mut Rng) -> Result<Self> {
        if scaler.dim() != NUM_LABS {
            return Err(Error::Shape("lab scaler must cover 12 labs".into()));
        }
        Ok(Self {
            gru1: Gru::new(NUM_LABS, config.stage1_hidden, rng),
            proj1: Dense::new(config.stage1_hidden, config.stage1_proj, Activation::Identity, rng),
            gru2: Gru::new(config.stage1_proj, config.stage2_hidden, rng),
            proj2: Dense::new(config.stage2_hidden, LAB_LATENT_DIM, Activation::Identity, rng),
            gru3: Gru::new(LAB_LATENT_DIM, LAB_LATENT_DIM, rng),
            readout: Dense::new(LAB_LATENT_DIM, NUM_LABS, Activation::Identity, rng),
            config,
            scaler,
        })
    }

    pub fn for_cohort(config: LabConfig, train: &[Trajectory], rng: &mut Rng) -> Result<Self> {
        let scaler = Scaler::fit_rows(train.iter().flat_map(|t| t.records.iter().map(|r| &r.obs.labs[..])), NUM_LABS)?;
        Self::new(config, scaler, rng)
    }

    fn standardized(&self, labs: &[f64; NUM_LABS]) -> Result<[f64; NUM_LABS]> {
        let mut x = *labs;
        self.scaler.standardize_in_place(&mut x)?;
        Ok(x)
    }

    /// Padded batch from raw lab sequences; inputs are standardized and then
    /// zeroed with probability `p`, targets are left intact.
    pub fn make_batch(&self, seqs: &[&[[f64; NUM_LABS]]], p: f64, rng: &mut Rng) -> Result<LabBatch> {
        let b = seqs.len();
        let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut inputs = Vec::with_capacity(steps);
        let mut targets = Vec::with_capacity(steps);
        let mut mask = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut x = Array2::zeros((b, NUM_LABS));
            let mut y = Array2::zeros((b, NUM_LABS));
            let mut m = Array1::zeros(b);
            for (i, s) in seqs.iter().enumerate() {
                let Some(labs) = s.get(t) else { continue };
                let clean = self.standardized(labs)?;
                let mut noisy = clean;
                corrupt(&mut noisy, p, rng);
                x.row_mut(i).assign(&ArrayView1::from(&noisy));
                y.row_mut(i).assign(&ArrayView1::from(&clean));
                m[i] = 1.0;
            }
            inputs.push(x);
            targets.push(y);
            mask.push(m);
        }
        Ok(LabBatch { inputs, targets, mask })
    }

    fn run_stage(gru: &Gru, xs: Vec<Array2<f64>>) -> Result<Stage> {
        let b = xs.first().map_or(0, |x| x.nrows());
        let h0 = Array2::zeros((b, gru.hidden_dim()));
        let seq = gru.forward_sequence(h0.view(), &xs, None)?;
        Ok(Stage { xs, seq })
    }

    fn forward(&self, inputs: &[Array2<f64>]) -> Result<Forward> {
        let s1 = Self::run_stage(&self.gru1, inputs.to_vec())?;
        let p1 = project(&self.proj1, &s1.seq.hidden)?;
        let s2 = Self::run_stage(&self.gru2, p1.clone())?;
        let p2 = project(&self.proj2, &s2.seq.hidden)?;
        let s3 = Self::run_stage(&self.gru3, p2.clone())?;
        let out = project(&self.readout, &s3.seq.hidden)?;
        Ok(Forward { s1, p1, s2, p2, s3, out })
    }

    /// Masked mean squared error over valid steps and labs, with gradients.
    pub fn loss_and_grad(&self, batch: &LabBatch) -> Result<(f64, LabAe)> {
        let fwd = self.forward(&batch.inputs)?;
        let mut grad = self.zeros_like();
        let n = batch.mask.iter().map(|m| m.sum()).sum::<f64>() * NUM_LABS as f64;
        if n == 0.0 {
            return Ok((0.0, grad));
        }
        let mut loss = 0.0;
        let mut d3 = Vec::with_capacity(fwd.out.len());
        for t in 0..fwd.out.len() {
            let m = batch.mask[t].view().insert_axis(Axis(1));
            let diff = (&fwd.out[t] - &batch.targets[t]) * m;
            loss += diff.iter().map(|d| d * d).sum::<f64>();
            let dy = diff * (2.0 / n);
            let h = &fwd.s3.seq.hidden[t];
            d3.push(self.readout.backward_into(h.view(), fwd.out[t].view(), dy.view(), &mut grad.readout));
        }
        let (dx3, _) = self.gru3.backward_sequence(&fwd.s3.seq, &d3, &mut grad.gru3);
        let d2: Vec<_> = (0..dx3.len())
            .map(|t| {
                let h = &fwd.s2.seq.hidden[t];
                self.proj2.backward_into(h.view(), fwd.p2[t].view(), dx3[t].view(), &mut grad.proj2)
            })
            .collect();
        let (dx2, _) = self.gru2.backward_sequence(&fwd.s2.seq, &d2, &mut grad.gru2);
        let d1: Vec<_> = (0..dx2.len())
            .map(|t| {
                let h = &fwd.s1.seq.hidden[t];
                self.proj1.backward_into(h.view(), fwd.p1[t].view(), dx2[t].view(), &mut grad.proj1)
            })
            .collect();
        self.gru1.backward_sequence(&fwd.s1.seq, &d1, &mut grad.gru1);
        debug_assert_eq!(fwd.s1.xs.len(), fwd.s2.xs.len());
        Ok((loss / n, grad))
    }

    fn sse(&self, batch: &LabBatch) -> Result<(f64, f64)> {
        let fwd = self.forward(&batch.inputs)?;
        let mut sum = 0.0;
        for t in 0..fwd.out.len() {
            let m = batch.mask[t].view().insert_axis(Axis(1));
            let diff = (&fwd.out[t] - &batch.targets[t]) * m;
            sum += diff.iter().map(|d| d * d).sum::<f64>();
        }
        Ok((sum, batch.mask.iter().map(|m| m.sum()).sum::<f64>() * NUM_LABS as f64))
    }

    /// Stage-3 hidden state after each hour of `labs` (raw units).
    pub fn encode_sequence(
        &self,
        labs: &[[f64; NUM_LABS]],
        p: f64,
        rng: &mut Rng,
    ) -> Result<Vec<[f64; LAB_LATENT_DIM]>> {
        if labs.is_empty() {
            return Err(Error::Domain("lab sequence is empty".into()));
        }
        let batch = self.make_batch(&[labs], p, rng)?;
        Ok(self.encode_batch(&batch.inputs)?.into_iter().map(|z| row10(z.row(0))).collect())
    }

    fn encode_batch(&self, inputs: &[Array2<f64>]) -> Result<Vec<Array2<f64>>> {
        let b = inputs.first().map_or(0, |x| x.nrows());
        let mut h1 = Array2::zeros((b, self.gru1.hidden_dim()));
        let mut h2 = Array2::zeros((b, self.gru2.hidden_dim()));
        let mut h3 = Array2::zeros((b, LAB_LATENT_DIM));
        let mut out = Vec::with_capacity(inputs.len());
        for x in inputs {
            h1 = self.gru1.step(h1.view(), x.view())?;
            let p1 = self.proj1.forward(h1.view())?;
            h2 = self.gru2.step(h2.view(), p1.view())?;
            let p2 = self.proj2.forward(h2.view())?;
            h3 = self.gru3.step(h3.view(), p2.view())?;
            out.push(h3.clone());
        }
        Ok(out)
    }

    /// Per-hour representations for every trajectory, without corruption.
    pub fn encode(&self, trajs: &[Trajectory]) -> Result<Vec<Vec<[f64; LAB_LATENT_DIM]>>> {
        let seqs: Vec<Vec<[f64; NUM_LABS]>> = trajs.iter().map(lab_sequence).collect();
        let mut order: Vec<usize> = (0..trajs.len()).collect();
        order.sort_by_key(|&i| seqs[i].len());
        let mut out = vec![Vec::new(); trajs.len()];
        let mut rng = seeded(0);
        for chunk in order.chunks(64) {
            let refs: Vec<&[[f64; NUM_LABS]]> = chunk.iter().map(|&i| seqs[i].as_slice()).collect();
            let batch = self.make_batch(&refs, 0.0, &mut rng)?;
            let zs = self.encode_batch(&batch.inputs)?;
            for (bi, &ti) in chunk.iter().enumerate() {
                out[ti] = (0..seqs[ti].len()).map(|t| row10(zs[t].row(bi))).collect();
            }
        }
        Ok(out)
    }

    /// Mean squared error per lab entry (standardized units) with inputs
    /// corrupted at `p`.
    pub fn evaluate(&self, trajs: &[Trajectory], p: f64, seed: u64) -> Result<f64> {
        let seqs: Vec<Vec<[f64; NUM_LABS]>> = trajs.iter().map(lab_sequence).collect();
        let mut rng = seeded(seed);
        let (mut sum, mut n) = (0.0, 0.0);
        for chunk in seqs.chunks(64) {
            let refs: Vec<&[[f64; NUM_LABS]]> = chunk.iter().map(|s| s.as_slice()).collect();
            let (s, c) = self.sse(&self.make_batch(&refs, p, &mut rng)?)?;
            sum += s;
            n += c;
        }
        Ok(if n == 0.0 { 0.0 } else { sum / n })
    }

    pub fn to_checkpoint(&self, seed: u64, step: u64, corruption: &CorruptionSchedule) -> Checkpoint {
        let architecture = serde_json::json!({
            "config": self.config,
            "scaler": self.scaler,
            "corruption": corruption,
        });
        let mut ck = Checkpoint::new(CheckpointMeta { tag: CHECKPOINT_TAG.into(), architecture, seed, step });
        ck.push_model("lab_ae", self);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.tag != CHECKPOINT_TAG {
            return Err(Error::Checkpoint(format!("expected a {CHECKPOINT_TAG} checkpoint, got {}", ck.meta.tag)));
        }
        let a = &ck.meta.architecture;
        let field = |k: &str| a.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("metadata lacks {k}")));
        let config: LabConfig = serde_json::from_value(field("config")?)?;
        let scaler: Scaler = serde_json::from_value(field("scaler")?)?;
        let mut model = Self::new(config, scaler, &mut seeded(0))?;
        ck.load_model("lab_ae", &mut model)?;
        Ok(model)
    }
}

fn row10(r: ArrayView1<f64>) -> [f64; LAB_LATENT_DIM] {
    let mut z = [0.0; LAB_LATENT_DIM];
    for (a, b) in z.iter_mut().zip(r) {
        *a = *b;
    }
    z
}

pub fn lab_sequence(t: &Trajectory) -> Vec<[f64; NUM_LABS]> {
    t.records.iter().map(|r| r.obs.labs).collect()
}

pub fn train(
    model: &mut LabAe,
    train_set: &[Trajectory],
    val_set: Option<&[Trajectory]>,
    config: &LabTrainConfig,
    rng: &mut Rng,
) -> Result<TrainReport> {
    config.corruption.validate()?;
    let seqs: Vec<Vec<[f64; NUM_LABS]>> = train_set.iter().map(lab_sequence).collect();
    let mut opt = Adam::new(model, AdamConfig::with_lr(config.lr));
    let mut report = TrainReport::default();
    let val_seed = rng.random::<u64>();
    for epoch in 0..config.epochs {
        let p = config.corruption.at(epoch);
        let (mut total, mut count) = (0.0, 0.0);
        for idx in length_batches(train_set, config.batch_size, rng) {
            let refs: Vec<&[[f64; NUM_LABS]]> = idx.iter().map(|&i| seqs[i].as_slice()).collect();
            let batch = model.make_batch(&refs, p, rng)?;
            let (loss, mut grad) = model.loss_and_grad(&batch)?;
            if !loss.is_finite() || !grad.all_finite() {
                return Err(Error::Diverged(format!("lab autoencoder loss became {loss} in epoch {epoch}")));
            }
            clip_global_norm(&mut grad, config.clip_norm);
            opt.update(model, &grad);
            let w: f64 = batch.mask.iter().map(|m| m.sum()).sum();
            total += loss * w;
            count += w;
        }
        report.train_loss.push(total / count.max(1.0));
        report.corruption.push(p);
        if let Some(val) = val_set {
            report.val_loss.push(model.evaluate(val, p, val_seed)?);
        }
        log::info!("lab_ae epoch {} p={p:.3} train={:.4}", epoch + 1, report.train_loss[epoch]);
    }
    Ok(report)
}
