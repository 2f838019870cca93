//! The 41-feature RL state: demographics, vitals, scores, labs, the
//! cardiovascular latent `{R, C, SV, T}` and the 10-dim lab-history code.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::cardio::CardioParams;
use crate::error::{Error, Result};
use crate::simulator::{Observation, PatientStatic, LAB_NAMES, SCORE_NAMES, VITAL_NAMES};

pub const LAB_LATENT_DIM: usize = 10;
pub const STATE_DIM: usize = 3 + 7 + 5 + 12 + 4 + LAB_LATENT_DIM;
pub const CARDIO_NAMES: [&str; 4] = ["R", "C", "SV", "T"];

/// Index of each block in the state vector.
pub mod offsets {
    pub const DEMOGRAPHICS: usize = 0;
    pub const VITALS: usize = 3;
    pub const SCORES: usize = 10;
    pub const LABS: usize = 15;
    pub const CARDIO: usize = 27;
    pub const LAB_LATENT: usize = 31;
}

/// Feature names in state order.
pub fn feature_names() -> Vec<String> {
    let mut names: Vec<String> = ["age", "gender", "weight"].iter().map(|s| s.to_string()).collect();
    names.extend(VITAL_NAMES.iter().map(|s| s.to_string()));
    names.extend(SCORE_NAMES.iter().map(|s| s.to_string()));
    names.extend(LAB_NAMES.iter().map(|s| s.to_string()));
    names.extend(CARDIO_NAMES.iter().map(|s| s.to_string()));
    names.extend((0..LAB_LATENT_DIM).map(|i| format!("lab_latent_{i}")));
    debug_assert_eq!(names.len(), STATE_DIM);
    names
}

/// Unstandardized concatenation in state order.
pub fn raw_state(
    obs: &Observation,
    static_: &PatientStatic,
    cardio: Option<&CardioParams>,
    lab_latent: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let cardio = cardio.ok_or_else(|| Error::Contract("state assembly needs a cardiovascular latent".into()))?;
    let lab = lab_latent.ok_or_else(|| Error::Contract("state assembly needs a lab-history latent".into()))?;
    if lab.len() != LAB_LATENT_DIM {
        return Err(Error::Shape(format!("lab latent must have {LAB_LATENT_DIM} entries, got {}", lab.len())));
    }
    let mut v = Vec::with_capacity(STATE_DIM);
    v.extend([static_.age, f64::from(static_.gender), static_.weight]);
    v.extend(obs.vitals);
    v.extend(obs.scores);
    v.extend(obs.labs);
    v.extend([cardio.r(), cardio.c(), cardio.sv(), cardio.t()]);
    v.extend_from_slice(lab);
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("state contains non-finite values".into()));
    }
    Ok(v)
}

/// Standardized state vector.
pub fn assemble(
    obs: &Observation,
    static_: &PatientStatic,
    cardio: Option<&CardioParams>,
    lab_latent: Option<&[f64]>,
    scaler: &Scaler,
) -> Result<Vec<f64>> {
    let mut v = raw_state(obs, static_, cardio, lab_latent)?;
    scaler.standardize_in_place(&mut v)?;
    Ok(v)
}

/// Per-feature affine standardization fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// Features whose training spread was zero (their sd is set to 1).
    pub constant: Vec<bool>,
}

impl Scaler {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], sd: vec![1.0; dim], constant: vec![false; dim] }
    }

    /// Fits on the rows of `x` (population standard deviation).
    pub fn fit(x: ArrayView2<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::Domain("cannot fit a scaler on zero rows".into()));
        }
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let var = x.var_axis(Axis(0), 0.0);
        let mut sd = Vec::with_capacity(x.ncols());
        let mut constant = Vec::with_capacity(x.ncols());
        for (&v, &m) in var.iter().zip(mean.iter()) {
            let s = v.sqrt();
            let flat = !(s > 1e-12 * m.abs().max(1.0));
            constant.push(flat);
            sd.push(if flat { 1.0 } else { s });
        }
        Ok(Self { mean: mean.to_vec(), sd, constant })
    }

    pub fn fit_rows<'a, I: IntoIterator<Item = &'a [f64]>>(rows: I, dim: usize) -> Result<Self> {
        let data: Vec<f64> = rows.into_iter().flat_map(|r| r.iter().copied()).collect();
        let n = data.len() / dim.max(1);
        let arr = Array2::from_shape_vec((n, dim), data).map_err(|e| Error::Shape(e.to_string()))?;
        Self::fit(arr.view())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, n: usize) -> Result<()> {
        if n != self.dim() {
            return Err(Error::Shape(format!("scaler has {} features, got {n}", self.dim())));
        }
        Ok(())
    }

    pub fn standardize_in_place(&self, x: &mut [f64]) -> Result<()> {
        self.check(x.len())?;
        for ((v, m), s) in x.iter_mut().zip(&self.mean).zip(&self.sd) {
            *v = (*v - m) / s;
        }
        Ok(())
    }

    pub fn destandardize_in_place(&self, x: &mut [f64]) -> Result<()> {
        self.check(x.len())?;
        for ((v, m), s) in x.iter_mut().zip(&self.mean).zip(&self.sd) {
            *v = *v * s + m;
        }
        Ok(())
    }

    pub fn standardize_rows(&self, x: &mut Array2<f64>) -> Result<()> {
        self.check(x.ncols())?;
        for mut row in x.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.sd) {
                *v = (*v - m) / s;
            }
        }
        Ok(())
    }
}
