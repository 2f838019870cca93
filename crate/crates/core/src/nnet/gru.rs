use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use super::{glorot_uniform, sigmoid, Parameters, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Gated recurrent unit. Gate blocks are stacked as `[reset; update; candidate]`:
///
/// ```text
/// r  = σ(W_ir x + b_ir + W_hr h + b_hr)
/// z  = σ(W_iz x + b_iz + W_hz h + b_hz)
/// n  = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gru {
    /// `[3H, in]`
    pub w_ih: Tensor,
    /// `[3H, H]`
    pub w_hh: Tensor,
    /// `[3H]`
    pub b_ih: Tensor,
    /// `[3H]`
    pub b_hh: Tensor,
}

#[derive(Debug, Clone)]
pub struct GruStepCache {
    x: Array2<f64>,
    h: Array2<f64>,
    r: Array2<f64>,
    z: Array2<f64>,
    n: Array2<f64>,
    hn: Array2<f64>,
    mask: Option<Array1<f64>>,
}

/// Output of [`Gru::forward_sequence`]: hidden states after each step and
/// the caches needed for backpropagation through time.
#[derive(Debug, Clone)]
pub struct GruSequence {
    pub hidden: Vec<Array2<f64>>,
    pub caches: Vec<GruStepCache>,
}

impl Gru {
    pub fn new(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            w_ih: glorot_uniform(3 * hidden, input, rng),
            w_hh: glorot_uniform(3 * hidden, hidden, rng),
            b_ih: Tensor::zeros(&[3 * hidden]),
            b_hh: Tensor::zeros(&[3 * hidden]),
        }
    }

    pub fn zeroed(input: usize, hidden: usize) -> Self {
        Self {
            w_ih: Tensor::zeros(&[3 * hidden, input]),
            w_hh: Tensor::zeros(&[3 * hidden, hidden]),
            b_ih: Tensor::zeros(&[3 * hidden]),
            b_hh: Tensor::zeros(&[3 * hidden]),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hh.shape()[1]
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.shape()[1]
    }

    fn check(&self, h: &ArrayView2<f64>, x: &ArrayView2<f64>) -> Result<()> {
        if h.ncols() != self.hidden_dim() || x.ncols() != self.input_dim() || h.nrows() != x.nrows() {
            return Err(Error::Shape(format!(
                "gru expects h [B, {}] and x [B, {}], got {:?} and {:?}",
                self.hidden_dim(),
                self.input_dim(),
                h.shape(),
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn step(&self, h: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.step_train(h, x, None)?.0)
    }

    /// One step that also records what the backward pass needs. Rows whose
    /// `mask` entry is 0 keep their previous hidden state.
    pub fn step_train(
        &self,
        h: ArrayView2<f64>,
        x: ArrayView2<f64>,
        mask: Option<ArrayView1<f64>>,
    ) -> Result<(Array2<f64>, GruStepCache)> {
        self.check(&h, &x)?;
        let hd = self.hidden_dim();
        let mut gi = x.dot(&self.w_ih.view2().t());
        gi += &self.b_ih.view1();
        let mut gh = h.dot(&self.w_hh.view2().t());
        gh += &self.b_hh.view1();

        let mut r = &gi.slice(s![.., 0..hd]) + &gh.slice(s![.., 0..hd]);
        r.mapv_inplace(sigmoid);
        let mut z = &gi.slice(s![.., hd..2 * hd]) + &gh.slice(s![.., hd..2 * hd]);
        z.mapv_inplace(sigmoid);
        let hn = gh.slice(s![.., 2 * hd..]).to_owned();
        let mut n = &gi.slice(s![.., 2 * hd..]) + &(&r * &hn);
        n.mapv_inplace(f64::tanh);

        let mut out = Array2::zeros(h.raw_dim());
        Zip::from(&mut out).and(&z).and(&n).and(&h).for_each(|o, &z, &n, &h| *o = (1.0 - z) * n + z * h);
        let mask = mask.map(|m| m.to_owned());
        if let Some(m) = &mask {
            if m.len() != h.nrows() {
                return Err(Error::Shape("gru mask length must equal batch size".into()));
            }
            for (mut row, (&keep, prev)) in out.rows_mut().into_iter().zip(m.iter().zip(h.rows())) {
                if keep == 0.0 {
                    row.assign(&prev);
                }
            }
        }
        let cache = GruStepCache { x: x.to_owned(), h: h.to_owned(), r, z, n, hn, mask };
        Ok((out, cache))
    }

    /// Backward through one step. Accumulates parameter gradients into
    /// `grad` and returns `(dh_prev, dx)`.
    pub fn step_backward(
        &self,
        cache: &GruStepCache,
        dh_out: ArrayView2<f64>,
        grad: &mut Gru,
    ) -> (Array2<f64>, Array2<f64>) {
        let hd = self.hidden_dim();
        let (dh_new, mut dh_prev) = match &cache.mask {
            None => (dh_out.to_owned(), Array2::zeros(dh_out.raw_dim())),
            Some(m) => {
                let keep = m.view().insert_axis(Axis(1));
                let active = &dh_out * &keep;
                let held = &dh_out - &active;
                (active, held)
            }
        };
        let b = dh_new.nrows();
        let mut dgi = Array2::zeros((b, 3 * hd));
        let mut dgh = Array2::zeros((b, 3 * hd));
        for i in 0..b {
            for j in 0..hd {
                let d = dh_new[[i, j]];
                let (r, z, n, hn, hp) =
                    (cache.r[[i, j]], cache.z[[i, j]], cache.n[[i, j]], cache.hn[[i, j]], cache.h[[i, j]]);
                let dn_pre = d * (1.0 - z) * (1.0 - n * n);
                let dz_pre = d * (hp - n) * z * (1.0 - z);
                let dr_pre = dn_pre * hn * r * (1.0 - r);
                dh_prev[[i, j]] += d * z;
                dgi[[i, j]] = dr_pre;
                dgi[[i, hd + j]] = dz_pre;
                dgi[[i, 2 * hd + j]] = dn_pre;
                dgh[[i, j]] = dr_pre;
                dgh[[i, hd + j]] = dz_pre;
                dgh[[i, 2 * hd + j]] = dn_pre * r;
            }
        }
        grad.w_ih.view2_mut().scaled_add(1.0, &dgi.t().dot(&cache.x));
        grad.w_hh.view2_mut().scaled_add(1.0, &dgh.t().dot(&cache.h));
        grad.b_ih.view1_mut().scaled_add(1.0, &dgi.sum_axis(Axis(0)));
        grad.b_hh.view1_mut().scaled_add(1.0, &dgh.sum_axis(Axis(0)));
        dh_prev += &dgh.dot(&self.w_hh.view2());
        let dx = dgi.dot(&self.w_ih.view2());
        (dh_prev, dx)
    }

    /// Runs the cell over `xs[t]` (each `[B, in]`) from `h0`. `masks[t]`, if
    /// given, marks which rows are still inside their sequence at step `t`.
    pub fn forward_sequence(
        &self,
        h0: ArrayView2<f64>,
        xs: &[Array2<f64>],
        masks: Option<&[Array1<f64>]>,
    ) -> Result<GruSequence> {
        let mut h = h0.to_owned();
        let mut hidden = Vec::with_capacity(xs.len());
        let mut caches = Vec::with_capacity(xs.len());
        for (t, x) in xs.iter().enumerate() {
            let m = masks.map(|m| m[t].view());
            let (next, cache) = self.step_train(h.view(), x.view(), m)?;
            hidden.push(next.clone());
            caches.push(cache);
            h = next;
        }
        Ok(GruSequence { hidden, caches })
    }

    /// Backpropagation through time. `dhidden[t]` is the loss gradient with
    /// respect to `hidden[t]`; returns `(dxs, dh0)`.
    pub fn backward_sequence(
        &self,
        seq: &GruSequence,
        dhidden: &[Array2<f64>],
        grad: &mut Gru,
    ) -> (Vec<Array2<f64>>, Array2<f64>) {
        let steps = seq.caches.len();
        let mut dxs = vec![Array2::zeros((0, 0)); steps];
        let mut carry: Array2<f64> = Array2::zeros(seq.caches.first().map_or((0, 0), |c| c.h.dim()));
        for t in (0..steps).rev() {
            let dh = &carry + &dhidden[t];
            let (dprev, dx) = self.step_backward(&seq.caches[t], dh.view(), grad);
            dxs[t] = dx;
            carry = dprev;
        }
        (dxs, carry)
    }
}

impl Parameters for Gru {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.w_ih, &self.w_hh, &self.b_ih, &self.b_hh]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_ih, &mut self.w_hh, &mut self.b_ih, &mut self.b_hh]
    }
    fn param_names(&self) -> Vec<String> {
        ["w_ih", "w_hh", "b_ih", "b_hh"].map(String::from).to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{grad_check, random_matrix};
    use crate::rng::seeded;
    use ndarray::{array, Array1};
    use rand::Rng as _;

    #[test]
    fn zero_cell_halves_state() {
        let cell = Gru::zeroed(3, 4);
        let h = array![[1.0, -2.0, 0.5, 4.0]];
        let x = array![[0.3, 0.1, -0.7]];
        let out = cell.step(h.view(), x.view()).unwrap();
        assert_eq!(out, &h * 0.5);
    }

    #[test]
    fn saturated_update_gate_keeps_state() {
        let mut rng = seeded(1);
        let mut cell = Gru::new(3, 4, &mut rng);
        let hd = 4;
        for j in hd..2 * hd {
            cell.b_ih.data_mut()[j] = 40.0;
        }
        let h = random_matrix(2, 4, 1.0, &mut rng);
        let x = random_matrix(2, 3, 1.0, &mut rng);
        let out = cell.step(h.view(), x.view()).unwrap();
        for (a, b) in out.iter().zip(h.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let cell = Gru::zeroed(3, 4);
        assert!(cell.step(Array2::zeros((2, 4)).view(), Array2::zeros((2, 2)).view()).is_err());
        assert!(cell.step(Array2::zeros((1, 4)).view(), Array2::zeros((2, 3)).view()).is_err());
    }

    fn random_cell(seed: u64) -> Gru {
        let mut rng = seeded(seed);
        let mut cell = Gru::new(3, 4, &mut rng);
        for v in cell.b_ih.data_mut().iter_mut().chain(cell.b_hh.data_mut()) {
            *v = rng.random_range(-0.5..0.5);
        }
        cell
    }

    #[test]
    fn bptt_matches_finite_differences() {
        let cell = random_cell(2);
        let mut rng = seeded(3);
        let steps = 5;
        let xs: Vec<_> = (0..steps).map(|_| random_matrix(3, 3, 1.0, &mut rng)).collect();
        let cs: Vec<_> = (0..steps).map(|_| random_matrix(3, 4, 1.0, &mut rng)).collect();
        let h0 = random_matrix(3, 4, 0.5, &mut rng);
        let masks: Vec<Array1<f64>> =
            (0..steps).map(|t| Array1::from(vec![1.0, if t < 3 { 1.0 } else { 0.0 }, 1.0])).collect();
        for use_mask in [false, true] {
            let err = grad_check(
                &cell,
                |c| {
                    let m = use_mask.then_some(masks.as_slice());
                    let seq = c.forward_sequence(h0.view(), &xs, m).unwrap();
                    let loss: f64 = seq.hidden.iter().zip(&cs).map(|(h, c)| (h * c).sum()).sum();
                    let mut grad = c.zeros_like();
                    c.backward_sequence(&seq, &cs, &mut grad);
                    (loss, grad)
                },
                1e-5,
            );
            assert!(err < 1e-4, "mask={use_mask}: {err}");
        }
    }

    #[test]
    fn input_and_initial_state_gradients_match() {
        let cell = random_cell(4);
        let mut rng = seeded(5);
        let xs: Vec<_> = (0..3).map(|_| random_matrix(2, 3, 1.0, &mut rng)).collect();
        let cs: Vec<_> = (0..3).map(|_| random_matrix(2, 4, 1.0, &mut rng)).collect();
        let h0 = random_matrix(2, 4, 0.5, &mut rng);
        let loss = |xs: &[Array2<f64>], h0: &Array2<f64>| -> f64 {
            let seq = cell.forward_sequence(h0.view(), xs, None).unwrap();
            seq.hidden.iter().zip(&cs).map(|(h, c)| (h * c).sum()).sum()
        };
        let seq = cell.forward_sequence(h0.view(), &xs, None).unwrap();
        let mut grad = cell.zeros_like();
        let (dxs, dh0) = cell.backward_sequence(&seq, &cs, &mut grad);
        let h = 1e-5;
        for t in 0..3 {
            for idx in [(0, 0), (1, 2)] {
                let mut p = xs.clone();
                let mut m = xs.clone();
                p[t][idx] += h;
                m[t][idx] -= h;
                let num = (loss(&p, &h0) - loss(&m, &h0)) / (2.0 * h);
                assert!((num - dxs[t][idx]).abs() < 1e-7);
            }
        }
        for idx in [(0, 1), (1, 3)] {
            let mut p = h0.clone();
            let mut m = h0.clone();
            p[idx] += h;
            m[idx] -= h;
            let num = (loss(&xs, &p) - loss(&xs, &m)) / (2.0 * h);
            assert!((num - dh0[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn masked_rows_hold_state() {
        let cell = random_cell(6);
        let mut rng = seeded(7);
        let h = random_matrix(2, 4, 1.0, &mut rng);
        let x = random_matrix(2, 3, 1.0, &mut rng);
        let m = Array1::from(vec![0.0, 1.0]);
        let (out, _) = cell.step_train(h.view(), x.view(), Some(m.view())).unwrap();
        assert_eq!(out.row(0), h.row(0));
        assert_ne!(out.row(1), h.row(1));
    }
}
