use super::Parameters;

/// Analytic and central-difference gradients for every scalar parameter.
///
/// `loss` returns the loss value together with the analytic gradient laid
/// out like the model.
pub fn relative_errors<M, F>(model: &M, loss: F, h: f64) -> Vec<(f64, f64)>
where
    M: Parameters,
    F: Fn(&M) -> (f64, M),
{
    let (_, analytic) = loss(model);
    let analytic = analytic.flat();
    let mut probe = model.clone();
    let mut pairs = Vec::with_capacity(analytic.len());
    let mut flat_idx = 0;
    let n_tensors = probe.params().len();
    for ti in 0..n_tensors {
        let len = probe.params()[ti].len();
        for k in 0..len {
            let orig = probe.params()[ti].data()[k];
            probe.params_mut()[ti].data_mut()[k] = orig + h;
            let (lp, _) = loss(&probe);
            probe.params_mut()[ti].data_mut()[k] = orig - h;
            let (lm, _) = loss(&probe);
            probe.params_mut()[ti].data_mut()[k] = orig;
            pairs.push((analytic[flat_idx], (lp - lm) / (2.0 * h)));
            flat_idx += 1;
        }
    }
    pairs
}

/// Worst relative error between analytic and central-difference gradients.
///
/// Each entry is `|a − n| / max(|a|, |n|, 1e-6 · s)` where `s` is the largest
/// numerical gradient magnitude, so entries that are zero up to rounding do
/// not dominate. If every gradient is zero the error is zero.
pub fn grad_check<M, F>(model: &M, loss: F, h: f64) -> f64
where
    M: Parameters,
    F: Fn(&M) -> (f64, M),
{
    let pairs = relative_errors(model, loss, h);
    let scale = pairs.iter().fold(0.0f64, |m, &(a, n)| m.max(a.abs()).max(n.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    pairs.iter().map(|&(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6 * scale)).fold(0.0, f64::max)
}
