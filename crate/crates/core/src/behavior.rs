//! Behavior cloner `G(s, a)`: an MLP classifier of the logged action.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::{
    softmax_cross_entropy, softmax_rows, Activation, Adam, AdamConfig, Checkpoint, CheckpointMeta, Mlp, Parameters,
    Tensor,
};
use crate::rng::{seeded, Rng};
use crate::simulator::NUM_ACTIONS;

pub const CHECKPOINT_TAG: &str = "behavior";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviorConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        Self { hidden: vec![512, 512, 512, 256], epochs: 5, batch_size: 256, lr: 1e-3, weight_decay: 1e-4 }
    }
}

/// Logits network; probabilities are its row-wise softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorNet {
    pub mlp: Mlp,
}

impl Parameters for BehaviorNet {
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

impl BehaviorNet {
    pub fn new(state_dim: usize, hidden: &[usize], rng: &mut Rng) -> Self {
        let mut sizes = vec![state_dim];
        sizes.extend(hidden);
        sizes.push(NUM_ACTIONS);
        Self { mlp: Mlp::new(&sizes, Activation::Relu, Activation::Identity, rng) }
    }

    pub fn state_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    /// 9 action probabilities per row of `states`.
    pub fn probs(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut logits = self.mlp.forward(states)?;
        softmax_rows(&mut logits);
        Ok(logits)
    }

    pub fn g(&self, state: &[f64]) -> Result<[f64; NUM_ACTIONS]> {
        let x = ArrayView1::from(state).insert_axis(Axis(0));
        let p = self.probs(x)?;
        let mut out = [0.0; NUM_ACTIONS];
        for (o, v) in out.iter_mut().zip(p.row(0)) {
            *o = *v;
        }
        Ok(out)
    }

    /// Mean negative log-likelihood of `actions` and its gradient.
    pub fn loss_and_grad(&self, states: ArrayView2<f64>, actions: &[usize]) -> Result<(f64, BehaviorNet)> {
        let trace = self.mlp.forward_train(states)?;
        let (loss, dlogits) = softmax_cross_entropy(trace.output().view(), actions, None)?;
        let mut grad = self.zeros_like();
        self.mlp.backward(&trace, dlogits.view(), &mut grad.mlp);
        Ok((loss, grad))
    }

    pub fn nll(&self, states: ArrayView2<f64>, actions: &[usize]) -> Result<f64> {
        let logits = self.mlp.forward(states)?;
        Ok(softmax_cross_entropy(logits.view(), actions, None)?.0)
    }

    /// Fraction of rows whose most probable action equals the logged one.
    pub fn accuracy(&self, states: ArrayView2<f64>, actions: &[usize]) -> Result<f64> {
        let p = self.probs(states)?;
        let hits = p.rows().into_iter().zip(actions).filter(|(row, &a)| argmax(row.view()) == a).count();
        Ok(hits as f64 / actions.len().max(1) as f64)
    }

    pub fn to_checkpoint(&self, config: &BehaviorConfig, seed: u64, step: u64) -> Checkpoint {
        let architecture = serde_json::json!({ "state_dim": self.state_dim(), "config": config });
        let mut ck = Checkpoint::new(CheckpointMeta { tag: CHECKPOINT_TAG.into(), architecture, seed, step });
        ck.push_model("behavior", self);
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
        let config: BehaviorConfig = serde_json::from_value(a.get("config").cloned().unwrap_or_default())?;
        let mut net = Self::new(dim as usize, &config.hidden, &mut seeded(0));
        ck.load_model("behavior", &mut net)?;
        Ok(net)
    }
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Rows of `x` selected by `idx`.
pub fn gather_rows(x: ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

/// Minibatch Adam on the NLL with L2 weight decay. Returns per-epoch
/// validation NLL when a validation set is supplied, else training NLL.
pub fn train(
    net: &mut BehaviorNet,
    states: ArrayView2<f64>,
    actions: &[usize],
    val: Option<(ArrayView2<f64>, &[usize])>,
    config: &BehaviorConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if states.nrows() != actions.len() {
        return Err(Error::Shape("behavior training: states and actions differ in length".into()));
    }
    let adam = AdamConfig { lr: config.lr, weight_decay: config.weight_decay, ..AdamConfig::default() };
    let mut opt = Adam::new(net, adam);
    let mut curve = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..actions.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let (mut total, mut count) = (0.0, 0.0);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let x = gather_rows(states, chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| actions[i]).collect();
            let (loss, grad) = net.loss_and_grad(x.view(), &y)?;
            if !loss.is_finite() || !grad.all_finite() {
                return Err(Error::Diverged(format!("behavior NLL became {loss} in epoch {epoch}")));
            }
            opt.update(net, &grad);
            total += loss * chunk.len() as f64;
            count += chunk.len() as f64;
        }
        let score = match val {
            Some((vx, vy)) => net.nll(vx, vy)?,
            None => total / count.max(1.0),
        };
        log::info!("behavior epoch {} nll={score:.4}", epoch + 1);
        curve.push(score);
    }
    Ok(curve)
}

/// Empirical frequency of each action.
pub fn action_marginal(actions: &[usize]) -> Array1<f64> {
    let mut m = Array1::zeros(NUM_ACTIONS);
    for &a in actions {
        m[a] += 1.0;
    }
    m / actions.len().max(1) as f64
}
