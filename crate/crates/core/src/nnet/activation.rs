use ndarray::{Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Relu,
    Tanh,
    Sigmoid,
    Softmax,
    Identity,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.axis_iter_mut(Axis(0)) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl Activation {
    pub fn apply(self, x: &mut Array2<f64>) {
        match self {
            Activation::Elu => x.mapv_inplace(|v| if v > 0.0 { v } else { v.exp_m1() }),
            Activation::Relu => x.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => x.mapv_inplace(f64::tanh),
            Activation::Sigmoid => x.mapv_inplace(sigmoid),
            Activation::Softmax => softmax_rows(x),
            Activation::Identity => {}
        }
    }

    /// Gradient with respect to the pre-activation, from the activation
    /// output `y` and the upstream gradient `dy`.
    pub fn backward(self, y: ArrayView2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
        match self {
            Activation::Identity => dy.to_owned(),
            Activation::Softmax => {
                let dot = (&y * &dy).sum_axis(Axis(1)).insert_axis(Axis(1));
                &y * &(&dy - &dot)
            }
            _ => {
                let mut out = Array2::zeros(y.raw_dim());
                Zip::from(&mut out).and(&y).and(&dy).for_each(|o, &y, &g| {
                    let d = match self {
                        Activation::Elu => {
                            if y > 0.0 {
                                1.0
                            } else {
                                y + 1.0
                            }
                        }
                        Activation::Relu => {
                            if y > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Activation::Tanh => 1.0 - y * y,
                        Activation::Sigmoid => y * (1.0 - y),
                        Activation::Identity | Activation::Softmax => unreachable!(),
                    };
                    *o = d * g;
                });
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn elu_bounded_below_and_continuous() {
        let mut x = array![[-30.0, -1e-9, 0.0, 1e-9, 3.0, -800.0]];
        Activation::Elu.apply(&mut x);
        assert!(x.iter().take(5).all(|&v| v > -1.0));
        // far enough out, exp(x) is below the spacing of doubles near -1
        assert_eq!(x[[0, 5]], -1.0);
        assert!(x[[0, 1]].abs() < 1e-8 && x[[0, 3]].abs() < 1e-8);
        assert_eq!(x[[0, 4]], 3.0);
    }

    #[test]
    fn stable_sigmoid() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, 1001.0, -5.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[1] > p[0] && p[0] > p[2]);
    }
}
