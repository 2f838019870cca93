use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Mean squared error over entries with nonzero `mask` (all entries if
/// `mask` is `None`). Returns the loss and its gradient.
pub fn mse(
    pred: ArrayView2<f64>,
    target: ArrayView2<f64>,
    mask: Option<ArrayView2<f64>>,
) -> Result<(f64, Array2<f64>)> {
    if pred.raw_dim() != target.raw_dim() || mask.is_some_and(|m| m.raw_dim() != pred.raw_dim()) {
        return Err(Error::Shape("mse: prediction, target and mask shapes differ".into()));
    }
    let mut diff = &pred - &target;
    if let Some(m) = mask {
        diff *= &m;
    }
    let count = match mask {
        Some(m) => m.iter().filter(|&&v| v != 0.0).count(),
        None => diff.len(),
    };
    if count == 0 {
        return Ok((0.0, Array2::zeros(pred.raw_dim())));
    }
    let n = count as f64;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff * (2.0 / n)))
}

/// Weighted mean of `-log softmax(logits)[target]` over the batch, with the
/// gradient with respect to `logits`. Weights default to 1.
pub fn softmax_cross_entropy(
    logits: ArrayView2<f64>,
    targets: &[usize],
    weights: Option<ArrayView1<f64>>,
) -> Result<(f64, Array2<f64>)> {
    let (b, k) = logits.dim();
    if targets.len() != b || weights.is_some_and(|w| w.len() != b) {
        return Err(Error::Shape("cross entropy: batch sizes differ".into()));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::Shape(format!("cross entropy: target {bad} out of {k} classes")));
    }
    let total: f64 = weights.map_or(b as f64, |w| w.sum());
    let mut grad = logits.to_owned();
    super::softmax_rows(&mut grad);
    let mut loss = 0.0;
    for (i, mut row) in grad.rows_mut().into_iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]) / total;
        let max = logits.row(i).fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + logits.row(i).iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += w * (lse - logits[[i, targets[i]]]);
        row[targets[i]] -= 1.0;
        row *= w;
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn mse_matches_hand_value() {
        let p = array![[1.0, 2.0], [3.0, 4.0]];
        let t = array![[0.0, 2.0], [3.0, 6.0]];
        let (l, g) = mse(p.view(), t.view(), None).unwrap();
        assert!((l - 5.0 / 4.0).abs() < 1e-15);
        assert_eq!(g, array![[0.5, 0.0], [0.0, -1.0]]);
        let m = array![[1.0, 1.0], [1.0, 0.0]];
        let (l, g) = mse(p.view(), t.view(), Some(m.view())).unwrap();
        assert!((l - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(g[[1, 1]], 0.0);
    }

    #[test]
    fn cross_entropy_gradient_matches_fd() {
        let logits = array![[0.2, -1.0, 3.0], [1.0, 1.0, -0.5]];
        let targets = [2, 0];
        let w = array![1.0, 3.0];
        let (_, g) = softmax_cross_entropy(logits.view(), &targets, Some(w.view())).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut p = logits.clone();
                let mut m = logits.clone();
                p[[i, j]] += h;
                m[[i, j]] -= h;
                let lp = softmax_cross_entropy(p.view(), &targets, Some(w.view())).unwrap().0;
                let lm = softmax_cross_entropy(m.view(), &targets, Some(w.view())).unwrap().0;
                assert!(((lp - lm) / (2.0 * h) - g[[i, j]]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Array2::zeros((4, 9));
        let (l, _) = softmax_cross_entropy(logits.view(), &[0, 3, 8, 1], None).unwrap();
        assert!((l - 9f64.ln()).abs() < 1e-12);
    }
}
