//! Cohort → autoencoder latents → standardized state vectors → transitions.

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lab_ae::LabAe;
use crate::physio_ae::PhysioAe;
use crate::replay::Transitions;
use crate::rl_state::{raw_state, Scaler, STATE_DIM};
use crate::rng::seeded;
use crate::simulator::Trajectory;

/// Random patient-level split; returns `(train, held_out)` each in id order.
pub fn split_patients(
    mut trajs: Vec<Trajectory>,
    held_out_fraction: f64,
    seed: u64,
) -> Result<(Vec<Trajectory>, Vec<Trajectory>)> {
    if !(0.0..1.0).contains(&held_out_fraction) {
        return Err(Error::Config(format!("held-out fraction must lie in [0, 1), got {held_out_fraction}")));
    }
    trajs.sort_by_key(|t| t.patient_id);
    let mut order: Vec<usize> = (0..trajs.len()).collect();
    order.shuffle(&mut seeded(seed));
    let n_out = (held_out_fraction * trajs.len() as f64).round() as usize;
    let mut held = vec![false; trajs.len()];
    order[..n_out].iter().for_each(|&i| held[i] = true);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (t, h) in trajs.into_iter().zip(held) {
        if h {
            b.push(t)
        } else {
            a.push(t)
        }
    }
    Ok((a, b))
}

/// Per-hour unstandardized 41-feature states from both encoders.
pub fn raw_states(physio: &PhysioAe, lab: &LabAe, trajs: &[Trajectory]) -> Result<Vec<Vec<Vec<f64>>>> {
    let cardio = physio.cardio_latents(trajs)?;
    let labs = lab.encode(trajs)?;
    trajs
        .iter()
        .zip(cardio.iter().zip(&labs))
        .map(|(t, (c, l))| {
            t.records.iter().enumerate().map(|(h, r)| raw_state(&r.obs, &t.static_, Some(&c[h]), Some(&l[h]))).collect()
        })
        .collect()
}

/// Frozen encoders plus the state scaler fitted on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Featurizer {
    pub physio: PhysioAe,
    pub lab: LabAe,
    pub scaler: Scaler,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScalerFile<'a> {
    features: Vec<String>,
    #[serde(borrow)]
    scaler: std::borrow::Cow<'a, Scaler>,
}

impl Featurizer {
    pub fn fit(physio: PhysioAe, lab: LabAe, train: &[Trajectory]) -> Result<Self> {
        let raw = raw_states(&physio, &lab, train)?;
        let scaler = Scaler::fit_rows(raw.iter().flatten().map(|v| v.as_slice()), STATE_DIM)?;
        Ok(Self { physio, lab, scaler })
    }

    pub fn states(&self, trajs: &[Trajectory]) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut raw = raw_states(&self.physio, &self.lab, trajs)?;
        for v in raw.iter_mut().flatten() {
            self.scaler.standardize_in_place(v)?;
        }
        Ok(raw)
    }

    pub fn transitions(&self, trajs: &[Trajectory]) -> Result<Transitions> {
        Transitions::from_states(trajs, &self.states(trajs)?)
    }

    pub fn scaler_json(&self) -> Result<String> {
        let f =
            ScalerFile { features: crate::rl_state::feature_names(), scaler: std::borrow::Cow::Borrowed(&self.scaler) };
        Ok(serde_json::to_string_pretty(&f)?)
    }

    pub fn scaler_from_json(s: &str) -> Result<Scaler> {
        let f: ScalerFile = serde_json::from_str(s)?;
        if f.features != crate::rl_state::feature_names() {
            return Err(Error::Format("scaler feature order does not match the state layout".into()));
        }
        Ok(f.scaler.into_owned())
    }
}

/// Row-stacks per-patient state sequences.
pub fn stack(states: &[Vec<Vec<f64>>]) -> Array2<f64> {
    let rows: Vec<&Vec<f64>> = states.iter().flatten().collect();
    let dim = rows.first().map_or(0, |r| r.len());
    Array2::from_shape_fn((rows.len(), dim), |(i, j)| rows[i][j])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lab_ae::LabConfig;
    use crate::physio_ae::PhysioConfig;
    use crate::simulator::{generate_cohort, SimConfig};

    #[test]
    fn split_is_a_deterministic_partition() {
        let cohort = generate_cohort(40, 3, &SimConfig::default()).unwrap();
        let (a, b) = split_patients(cohort.clone(), 0.25, 1).unwrap();
        assert_eq!(a.len() + b.len(), 40);
        assert_eq!(b.len(), 10);
        let (a2, _) = split_patients(cohort, 0.25, 1).unwrap();
        assert_eq!(
            a.iter().map(|t| t.patient_id).collect::<Vec<_>>(),
            a2.iter().map(|t| t.patient_id).collect::<Vec<_>>()
        );
        assert!(a.windows(2).all(|w| w[0].patient_id < w[1].patient_id));
    }

    #[test]
    fn featurized_train_split_is_standardized() {
        let cohort = generate_cohort(12, 4, &SimConfig::default()).unwrap();
        let mut rng = seeded(0);
        let physio = PhysioAe::for_cohort(
            PhysioConfig { patient_hidden: vec![4], gru_hidden: 4, transition_hidden: vec![4] },
            SimConfig::default().baselines,
            &cohort,
            &mut rng,
        )
        .unwrap();
        let lab =
            LabAe::for_cohort(LabConfig { stage1_hidden: 4, stage1_proj: 4, stage2_hidden: 4 }, &cohort, &mut rng)
                .unwrap();
        let f = Featurizer::fit(physio, lab, &cohort).unwrap();
        let x = stack(&f.states(&cohort).unwrap());
        assert_eq!(x.ncols(), STATE_DIM);
        for (j, col) in x.columns().into_iter().enumerate() {
            let m = col.mean().unwrap();
            assert!(m.abs() < 1e-9, "feature {j} mean {m}");
        }
        let t = f.transitions(&cohort).unwrap();
        assert_eq!(t.len(), cohort.iter().map(|c| c.len()).sum::<usize>());
        let back = Featurizer::scaler_from_json(&f.scaler_json().unwrap()).unwrap();
        assert_eq!(back, f.scaler);
    }
}
