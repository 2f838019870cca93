//! Small differentiable-computation core: dense layers, GRU cells,
//! activations, losses, Adam and finite-difference gradient checks.
//!
//! Models expose their parameters as ordered lists of [`Tensor`]s through
//! [`Parameters`]. Gradients and optimizer moments are stored as values of
//! the same model type, so every generic routine (Adam, Polyak averaging,
//! checkpoints, gradient checks) walks the same list in the same order.

mod activation;
mod adam;
mod checkpoint;
mod dense;
mod gradcheck;
mod gru;
mod loss;
mod tensor;

pub use activation::{sigmoid, softmax, softmax_rows, Activation};
pub use adam::{clip_global_norm, Adam, AdamConfig};
pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use dense::{random_matrix, Dense, DenseGrads, Mlp, MlpTrace};
pub use gradcheck::{grad_check, relative_errors};
pub use gru::{Gru, GruSequence, GruStepCache};
pub use loss::{mse, softmax_cross_entropy};
pub use tensor::Tensor;

use rand::Rng as _;

use crate::rng::Rng;

pub trait Parameters: Clone {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    /// Stable names, one per entry of [`Parameters::params`].
    fn param_names(&self) -> Vec<String>;

    fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for p in out.params_mut() {
            p.fill(0.0);
        }
        out
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    fn sq_norm(&self) -> f64 {
        self.params().iter().map(|p| p.sq_norm()).sum()
    }

    fn scale(&mut self, factor: f64) {
        for p in self.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// `self += alpha * other`
    fn add_scaled(&mut self, other: &Self, alpha: f64) {
        for (p, o) in self.params_mut().into_iter().zip(other.params()) {
            for (a, b) in p.data_mut().iter_mut().zip(o.data()) {
                *a += alpha * b;
            }
        }
    }

    /// Target-network update `self = tau * online + (1 - tau) * self`.
    fn polyak_from(&mut self, online: &Self, tau: f64) {
        for (p, o) in self.params_mut().into_iter().zip(online.params()) {
            for (a, b) in p.data_mut().iter_mut().zip(o.data()) {
                *a = tau * b + (1.0 - tau) * *a;
            }
        }
    }

    fn flat(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.data().iter().copied()).collect()
    }
}

/// Glorot-uniform `[rows, cols]` matrix with fan-in `cols` and fan-out `rows`.
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor::from_vec(&[rows, cols], data).expect("shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn glorot_respects_limit() {
        let mut rng = seeded(0);
        let t = glorot_uniform(30, 20, &mut rng);
        let limit = (6.0f64 / 50.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= limit));
        assert!(t.data().iter().any(|v| v.abs() > 0.5 * limit));
    }

    #[test]
    fn polyak_mixes_parameters() {
        let mut rng = seeded(1);
        let online = Dense::new(3, 2, Activation::Relu, &mut rng);
        let mut target = online.zeros_like();
        target.polyak_from(&online, 0.25);
        for (t, o) in target.flat().iter().zip(online.flat()) {
            assert!((t - 0.25 * o).abs() < 1e-15);
        }
    }
}
