//! Action preference: `P(s,a) = β·softmax(E[Q]/T)(a) + (1−β)·G(s,a) − λ·u(s,a)`.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::behavior::BehaviorNet;
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::simulator::{Action, NUM_ACTIONS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreferenceParams {
    pub beta: f64,
    pub lambda: f64,
    pub temperature: f64,
}

impl Default for PreferenceParams {
    fn default() -> Self {
        Self { beta: 1.0, lambda: 0.0, temperature: 1.0 }
    }
}

impl PreferenceParams {
    pub fn new(beta: f64, lambda: f64) -> Result<Self> {
        let p = Self { beta, lambda, ..Self::default() };
        p.validate()?;
        Ok(p)
    }

    /// β > 1 is allowed but logged; negative β or λ and non-positive
    /// temperatures are rejected.
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Domain(format!("beta must be a finite non-negative number, got {}", self.beta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Domain(format!("lambda must be a finite non-negative number, got {}", self.lambda)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Domain(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.beta > 1.0 {
            log::warn!("beta = {} exceeds 1; behavior weight becomes negative", self.beta);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceScore {
    pub expected_q: f64,
    pub scaled_q: f64,
    pub behavior_prob: f64,
    pub uncertainty: f64,
    pub preference: f64,
}

fn tempered_softmax(q: &[f64], temperature: f64) -> Vec<f64> {
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = q.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

/// Scores from per-action components; works for any action count.
pub fn score_components(
    expected_q: &[f64],
    g: &[f64],
    u: &[f64],
    params: &PreferenceParams,
) -> Result<Vec<PreferenceScore>> {
    params.validate()?;
    if expected_q.len() != g.len() || g.len() != u.len() || g.is_empty() {
        return Err(Error::Shape("preference components must have equal, non-zero lengths".into()));
    }
    Ok(scores_from_scaled(&tempered_softmax(expected_q, params.temperature), expected_q, g, u, params))
}

/// Scores when the softmax-scaled Q values are already known.
pub fn scores_from_scaled(
    scaled_q: &[f64],
    expected_q: &[f64],
    g: &[f64],
    u: &[f64],
    params: &PreferenceParams,
) -> Vec<PreferenceScore> {
    (0..g.len())
        .map(|a| PreferenceScore {
            expected_q: expected_q[a],
            scaled_q: scaled_q[a],
            behavior_prob: g[a],
            uncertainty: u[a],
            preference: params.beta * scaled_q[a] + (1.0 - params.beta) * g[a] - params.lambda * u[a],
        })
        .collect()
}

/// Index of the highest preference; ties go to the lowest index, which for
/// the 3×3 grid is the lexicographically lower (vaso, fluid) pair.
pub fn best(scores: &[PreferenceScore]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if s.preference > scores[best].preference {
            best = i;
        }
    }
    best
}

/// Preference scores for a batch of states, `[B][9]`.
pub fn preference(
    states: ArrayView2<f64>,
    params: &PreferenceParams,
    ensemble: &Ensemble,
    behavior: &BehaviorNet,
) -> Result<Vec<Vec<PreferenceScore>>> {
    params.validate()?;
    let probs = ensemble.member_probs(states)?;
    let q = crate::c51::expected_values(ensemble.value_from(&probs).view());
    let u = ensemble.uncertainty_from(&probs);
    let g = behavior.probs(states)?;
    (0..states.nrows())
        .map(|i| {
            let (q, g, u) = (q.row(i).to_vec(), g.row(i).to_vec(), u.row(i).to_vec());
            debug_assert_eq!(q.len(), NUM_ACTIONS);
            score_components(&q, &g, &u, params)
        })
        .collect()
}

pub fn recommend(
    states: ArrayView2<f64>,
    params: &PreferenceParams,
    ensemble: &Ensemble,
    behavior: &BehaviorNet,
) -> Result<Vec<Action>> {
    preference(states, params, ensemble, behavior)?.iter().map(|s| Action::from_flat(best(s))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    fn prefs(scaled: &[f64], g: &[f64], u: &[f64], beta: f64, lambda: f64) -> Vec<f64> {
        let p = PreferenceParams::new(beta, lambda).unwrap();
        scores_from_scaled(scaled, scaled, g, u, &p).iter().map(|s| s.preference).collect()
    }

    #[test]
    fn three_action_illustration() {
        let p = prefs(&[0.5, 0.3, 0.2], &[0.2, 0.7, 0.1], &[0.0, 0.5, 0.0], 0.5, 0.2);
        for (a, b) in p.iter().zip([0.35, 0.40, 0.15]) {
            assert!((a - b).abs() < 1e-12);
        }
        let p = PreferenceParams::new(0.5, 0.2).unwrap();
        assert_eq!(best(&scores_from_scaled(&[0.5, 0.3, 0.2], &[0.0; 3], &[0.2, 0.7, 0.1], &[0.0, 0.5, 0.0], &p)), 1);
    }

    #[test]
    fn degenerate_settings() {
        let q = [1.0, 3.0, -2.0, 0.5];
        let g = [0.1, 0.2, 0.6, 0.1];
        let u = [0.3, 0.9, 0.0, 0.1];
        assert_eq!(best(&score_components(&q, &g, &u, &PreferenceParams::new(1.0, 0.0).unwrap()).unwrap()), 1);
        assert_eq!(best(&score_components(&q, &g, &u, &PreferenceParams::new(0.0, 0.0).unwrap()).unwrap()), 2);
        let flat =
            score_components(&[0.0; 9], &[1.0 / 9.0; 9], &[0.2; 9], &PreferenceParams::new(0.5, 1.0).unwrap()).unwrap();
        assert_eq!(best(&flat), 0);
        let mut u = [1.0; 9];
        u[6] = 0.0;
        let heavy = score_components(
            &[5.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            &[0.5; 9],
            &u,
            &PreferenceParams::new(0.5, 1e6).unwrap(),
        )
        .unwrap();
        assert_eq!(best(&heavy), 6);
    }

    #[test]
    fn domain_checks() {
        assert!(PreferenceParams::new(-0.1, 0.0).is_err());
        assert!(PreferenceParams::new(0.5, -1.0).is_err());
        assert!(PreferenceParams::new(1.5, 0.0).is_ok());
        assert!(PreferenceParams { temperature: 0.0, ..Default::default() }.validate().is_err());
        assert!(score_components(&[0.0; 3], &[0.0; 2], &[0.0; 3], &PreferenceParams::default()).is_err());
    }

    #[test]
    fn monotone_in_uncertainty_and_shift_invariant_argmax() {
        let mut rng = seeded(5);
        for _ in 0..200 {
            let q: Vec<f64> = (0..9).map(|_| rng.random_range(-15.0..15.0)).collect();
            let g: Vec<f64> = (0..9).map(|_| rng.random::<f64>()).collect();
            let u: Vec<f64> = (0..9).map(|_| rng.random::<f64>()).collect();
            let params = PreferenceParams::new(rng.random(), rng.random_range(0.01..2.0)).unwrap();
            let base = score_components(&q, &g, &u, &params).unwrap();
            let shifted: Vec<f64> = q.iter().map(|v| v + 7.25).collect();
            assert_eq!(best(&base), best(&score_components(&shifted, &g, &u, &params).unwrap()));
            let mut u2 = u.clone();
            u2[3] += 0.1;
            assert!(score_components(&q, &g, &u2, &params).unwrap()[3].preference < base[3].preference);
        }
    }
}
