use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{glorot_uniform, Activation, Parameters, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Fully connected layer `y = act(x Wᵀ + b)` over a batch of row vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `[out, in]`
    pub w: Tensor,
    /// `[out]`
    pub b: Tensor,
    pub activation: Activation,
}

/// Gradients of one dense layer for a given batch.
#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub dx: Array2<f64>,
    pub dw: Array2<f64>,
    pub db: ndarray::Array1<f64>,
}

impl Dense {
    pub fn new(input: usize, output: usize, activation: Activation, rng: &mut Rng) -> Self {
        Self { w: glorot_uniform(output, input, rng), b: Tensor::zeros(&[output]), activation }
    }

    pub fn zeroed(input: usize, output: usize, activation: Activation) -> Self {
        Self { w: Tensor::zeros(&[output, input]), b: Tensor::zeros(&[output]), activation }
    }

    pub fn input_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.w.shape()[0]
    }

    fn check(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!("dense layer expects {} inputs, got {}", self.input_dim(), x.ncols())));
        }
        Ok(())
    }

    pub fn pre_activation(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.view2().t());
        y += &self.b.view1();
        y
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(&x)?;
        let mut y = self.pre_activation(x);
        self.activation.apply(&mut y);
        Ok(y)
    }

    /// Exact gradients of `forward` given its input `x`, output `y` and the
    /// upstream gradient `dy`.
    pub fn backward(&self, x: ArrayView2<f64>, y: ArrayView2<f64>, dy: ArrayView2<f64>) -> Result<DenseGrads> {
        self.check(&x)?;
        if dy.raw_dim() != y.raw_dim() || y.ncols() != self.output_dim() || y.nrows() != x.nrows() {
            return Err(Error::Shape("dense backward: output gradient does not match layer output".into()));
        }
        let dpre = self.activation.backward(y, dy);
        Ok(DenseGrads { dx: dpre.dot(&self.w.view2()), dw: dpre.t().dot(&x), db: dpre.sum_axis(Axis(0)) })
    }

    /// Backward pass that accumulates parameter gradients into `grad`.
    pub fn backward_into(
        &self,
        x: ArrayView2<f64>,
        y: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        grad: &mut Dense,
    ) -> Array2<f64> {
        let dpre = self.activation.backward(y, dy);
        grad.w.view2_mut().scaled_add(1.0, &dpre.t().dot(&x));
        grad.b.view1_mut().scaled_add(1.0, &dpre.sum_axis(Axis(0)));
        dpre.dot(&self.w.view2())
    }
}

impl Parameters for Dense {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.w, &self.b]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }
    fn param_names(&self) -> Vec<String> {
        vec!["w".into(), "b".into()]
    }
}

/// Stack of dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Layer inputs and outputs recorded by [`Mlp::forward_train`];
/// `acts[0]` is the network input and `acts[i + 1]` the output of layer `i`.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    pub acts: Vec<Array2<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("trace holds the input at least")
    }
}

impl Mlp {
    /// `sizes = [in, h1, ..., out]`; hidden layers use `hidden`, the last uses `output`.
    pub fn new(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                Dense::new(sizes[i], sizes[i + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    /// Zeroes the last layer so the initial output is `act(0)` for every input.
    pub fn zero_last_layer(mut self) -> Self {
        if let Some(last) = self.layers.last_mut() {
            last.w.fill(0.0);
            last.b.fill(0.0);
        }
        self
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(Dense::output_dim));
        s
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut h = self.layers[0].forward(x)?;
        for layer in &self.layers[1..] {
            h = layer.forward(h.view())?;
        }
        Ok(h)
    }

    pub fn forward_train(&self, x: ArrayView2<f64>) -> Result<MlpTrace> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_owned());
        for layer in &self.layers {
            let y = layer.forward(acts.last().expect("non-empty").view())?;
            acts.push(y);
        }
        Ok(MlpTrace { acts })
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, trace: &MlpTrace, dy: ArrayView2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let mut g = dy.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            g = layer.backward_into(trace.acts[i].view(), trace.acts[i + 1].view(), g.view(), &mut grad.layers[i]);
        }
        g
    }
}

impl Parameters for Mlp {
    fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
    fn param_names(&self) -> Vec<String> {
        (0..self.layers.len()).flat_map(|i| [format!("layer{i}.w"), format!("layer{i}.b")]).collect()
    }
}

/// Random batch helper used by tests and benches.
pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}
