//! Evaluation summaries: permutation importance, value distributions by time
//! to outcome, vasopressor frequency curves, action heat-maps and
//! uncertainty by outcome.

use std::io::Write;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::c51::N_ATOMS;
use crate::error::{Error, Result};
use crate::replay::Transitions;
use crate::rng::{derive_seed, seeded};
use crate::simulator::{Action, Outcome, NUM_ACTIONS};

pub const BUCKETS: [usize; 3] = [48, 24, 1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    pub index: usize,
    pub name: String,
    pub score: f64,
}

/// Features sorted by descending score; ties keep feature order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub features: Vec<FeatureScore>,
}

impl ImportanceTable {
    pub fn score(&self, index: usize) -> Option<f64> {
        self.features.iter().find(|f| f.index == index).map(|f| f.score)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "rank,index,feature,score")?;
        for (r, f) in self.features.iter().enumerate() {
            writeln!(w, "{},{},{},{}", r + 1, f.index, f.name, f.score)?;
        }
        Ok(())
    }
}

/// Contiguous runs of equal patient id; a repeated patient block forms its
/// own group.
fn patient_runs(patient_ids: &[u64]) -> Vec<(u64, Vec<usize>)> {
    let mut runs: Vec<(u64, Vec<usize>)> = Vec::new();
    for (i, &p) in patient_ids.iter().enumerate() {
        match runs.last_mut() {
            Some((q, rows)) if *q == p => rows.push(i),
            _ => runs.push((p, vec![i])),
        }
    }
    runs
}

/// Within-patient permutation importance.
///
/// For each feature, its values are shuffled across each patient's states
/// (one draw per `(seed, patient, feature)`), Q is recomputed for all
/// actions, and the patient's score is the mean |ΔQ| over its states and
/// actions. Feature scores average the patient scores. Patients are
/// contiguous runs of equal id in `patient_ids`.
pub fn permutation_importance<F>(
    q: F,
    states: ArrayView2<f64>,
    patient_ids: &[u64],
    names: &[String],
    seed: u64,
) -> Result<ImportanceTable>
where
    F: Fn(ArrayView2<f64>) -> Result<Array2<f64>> + Sync,
{
    if states.nrows() != patient_ids.len() || states.ncols() != names.len() {
        return Err(Error::Shape("importance inputs disagree on rows or features".into()));
    }
    if states.nrows() == 0 {
        return Err(Error::Contract("importance needs at least one state".into()));
    }
    let base = q(states)?;
    let groups = patient_runs(patient_ids);
    let scores: Vec<f64> = (0..states.ncols())
        .into_par_iter()
        .map(|f| -> Result<f64> {
            let mut permuted = states.to_owned();
            for (pid, rows) in &groups {
                let mut rng = seeded(derive_seed(seed, &[*pid, f as u64]));
                let mut values: Vec<f64> = rows.iter().map(|&r| states[[r, f]]).collect();
                values.shuffle(&mut rng);
                for (&r, v) in rows.iter().zip(values) {
                    permuted[[r, f]] = v;
                }
            }
            let changed = q(permuted.view())?;
            let per_patient: Vec<f64> = groups
                .iter()
                .map(|(_, rows)| {
                    let total: f64 = rows
                        .iter()
                        .map(|&r| base.row(r).iter().zip(changed.row(r)).map(|(a, b)| (a - b).abs()).sum::<f64>())
                        .sum();
                    total / (rows.len() * base.ncols()) as f64
                })
                .collect();
            Ok(per_patient.iter().sum::<f64>() / per_patient.len() as f64)
        })
        .collect::<Result<_>>()?;
    let mut features: Vec<FeatureScore> = scores
        .into_iter()
        .enumerate()
        .map(|(index, score)| FeatureScore { index, name: names[index].clone(), score })
        .collect();
    features.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    Ok(ImportanceTable { features })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumDistribution {
    pub outcome: Outcome,
    pub hours_to_end: usize,
    pub count: usize,
    /// Mean distribution per action, `[9][51]`.
    pub distributions: Vec<Vec<f64>>,
    /// Mass on atoms below zero per action.
    pub mass_below_zero: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedSummary {
    pub strata: Vec<StratumDistribution>,
}

impl StratifiedSummary {
    pub fn get(&self, outcome: Outcome, hours_to_end: usize) -> Option<&StratumDistribution> {
        self.strata.iter().find(|s| s.outcome == outcome && s.hours_to_end == hours_to_end)
    }
}

/// Mass on the atoms strictly below zero.
pub fn mass_below_zero(dist: &[f64]) -> f64 {
    dist[..N_ATOMS / 2].iter().sum()
}

/// Mean per-action distributions of states exactly `h` hours from the end
/// of stay, per outcome and `h ∈ buckets`. `dists` is `[N, 9·51]` aligned
/// with `transitions`.
pub fn stratified_distributions(
    dists: ArrayView2<f64>,
    transitions: &Transitions,
    buckets: &[usize],
) -> Result<StratifiedSummary> {
    if dists.nrows() != transitions.len() || dists.ncols() != NUM_ACTIONS * N_ATOMS {
        return Err(Error::Shape("distribution matrix does not match transitions".into()));
    }
    let mut strata = Vec::new();
    for outcome in [Outcome::Nonsurvivor, Outcome::Survivor, Outcome::Censored] {
        for &h in buckets {
            let rows: Vec<usize> = (0..transitions.len())
                .filter(|&i| transitions.outcomes[i] == outcome && transitions.hours_to_end[i] == h)
                .collect();
            if rows.is_empty() {
                if outcome != Outcome::Censored {
                    log::warn!("no {outcome:?} states {h} h from the end; bucket omitted");
                }
                continue;
            }
            let mut mean = vec![0.0; NUM_ACTIONS * N_ATOMS];
            for &r in &rows {
                for (m, v) in mean.iter_mut().zip(dists.row(r)) {
                    *m += v / rows.len() as f64;
                }
            }
            let distributions: Vec<Vec<f64>> = mean.chunks(N_ATOMS).map(|c| c.to_vec()).collect();
            let mass_below_zero = distributions.iter().map(|d| mass_below_zero(d)).collect();
            strata.push(StratumDistribution {
                outcome,
                hours_to_end: h,
                count: rows.len(),
                distributions,
                mass_below_zero,
            });
        }
    }
    Ok(StratifiedSummary { strata })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub hours_to_death: usize,
    pub fraction: f64,
    pub count: usize,
}

/// Fraction of non-survivor states with vasopressor recommended, per hour
/// before death (1 = last recorded hour), over the final `window` hours.
pub fn vaso_frequency_curve(actions: &[Action], transitions: &Transitions, window: usize) -> Result<Vec<CurvePoint>> {
    if actions.len() != transitions.len() {
        return Err(Error::Shape("one action per transition required".into()));
    }
    let mut counts = vec![(0usize, 0usize); window + 1];
    for i in 0..transitions.len() {
        let h = transitions.hours_to_end[i];
        if transitions.outcomes[i] == Outcome::Nonsurvivor && h >= 1 && h <= window {
            counts[h].1 += 1;
            if actions[i].vaso > 0 {
                counts[h].0 += 1;
            }
        }
    }
    if counts.iter().all(|c| c.1 == 0) {
        return Err(Error::Contract("no non-survivor states in the window".into()));
    }
    Ok((1..=window)
        .filter(|&h| counts[h].1 > 0)
        .map(|h| CurvePoint {
            hours_to_death: h,
            fraction: counts[h].0 as f64 / counts[h].1 as f64,
            count: counts[h].1,
        })
        .collect())
}

pub fn write_curves_csv<W: Write>(mut w: W, curves: &[(&str, &[CurvePoint])]) -> Result<()> {
    writeln!(w, "policy,hours_to_death,fraction,count")?;
    for (name, curve) in curves {
        for p in curve.iter() {
            writeln!(w, "{name},{},{},{}", p.hours_to_death, p.fraction, p.count)?;
        }
    }
    Ok(())
}

/// Mean fraction over the points with `hours_to_death ≤ last`.
pub fn tail_fraction(curve: &[CurvePoint], last: usize) -> f64 {
    let (n, k) = curve
        .iter()
        .filter(|p| p.hours_to_death <= last)
        .fold((0usize, 0.0f64), |(n, k), p| (n + p.count, k + p.fraction * p.count as f64));
    if n == 0 {
        0.0
    } else {
        k / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    Overall,
    SofaLow,
    SofaMedium,
    SofaHigh,
    NonsurvivorLast24,
}

impl Stratum {
    pub const ALL: [Stratum; 5] =
        [Stratum::Overall, Stratum::SofaLow, Stratum::SofaMedium, Stratum::SofaHigh, Stratum::NonsurvivorLast24];

    fn contains(self, sofa: f64, outcome: Outcome, hours_to_end: usize) -> bool {
        match self {
            Stratum::Overall => true,
            Stratum::SofaLow => sofa < 5.0,
            Stratum::SofaMedium => (5.0..15.0).contains(&sofa),
            Stratum::SofaHigh => sofa >= 15.0,
            Stratum::NonsurvivorLast24 => outcome == Outcome::Nonsurvivor && hours_to_end <= 24,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stratum::Overall => "overall",
            Stratum::SofaLow => "sofa_low",
            Stratum::SofaMedium => "sofa_medium",
            Stratum::SofaHigh => "sofa_high",
            Stratum::NonsurvivorLast24 => "nonsurvivor_last_24h",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub stratum: Stratum,
    pub count: usize,
    /// `grid[vaso][fluid]` frequency; sums to 1 when `count > 0`.
    pub grid: [[f64; 3]; 3],
}

/// Action frequency grids per stratum. `sofa` is the raw SOFA of each state.
pub fn action_heatmap(actions: &[Action], sofa: &[f64], transitions: &Transitions) -> Result<Vec<Heatmap>> {
    if actions.len() != transitions.len() || sofa.len() != transitions.len() {
        return Err(Error::Shape("one action and SOFA value per transition required".into()));
    }
    Ok(Stratum::ALL
        .iter()
        .map(|&stratum| {
            let mut grid = [[0.0; 3]; 3];
            let mut count = 0;
            for i in 0..actions.len() {
                if stratum.contains(sofa[i], transitions.outcomes[i], transitions.hours_to_end[i]) {
                    grid[actions[i].vaso as usize][actions[i].fluid as usize] += 1.0;
                    count += 1;
                }
            }
            if count > 0 {
                grid.iter_mut().flatten().for_each(|v| *v /= count as f64);
            }
            Heatmap { stratum, count, grid }
        })
        .collect())
}

pub fn write_heatmaps_csv<W: Write>(mut w: W, maps: &[(&str, &[Heatmap])]) -> Result<()> {
    writeln!(w, "policy,stratum,count,vaso,fluid,frequency")?;
    for (name, hs) in maps {
        for h in hs.iter() {
            for v in 0..3 {
                for f in 0..3 {
                    writeln!(w, "{name},{},{},{v},{f},{}", h.stratum.name(), h.count, h.grid[v][f])?;
                }
            }
        }
    }
    Ok(())
}

/// Per-action mean uncertainty split by outcome and stay phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySummary {
    pub survivor: Vec<f64>,
    pub nonsurvivor: Vec<f64>,
    pub nonsurvivor_first_24h: Vec<f64>,
    pub nonsurvivor_last_24h: Vec<f64>,
}

pub fn uncertainty_summary(u: ArrayView2<f64>, transitions: &Transitions) -> Result<UncertaintySummary> {
    if u.nrows() != transitions.len() {
        return Err(Error::Shape("uncertainty rows do not match transitions".into()));
    }
    let mean = |pred: &dyn Fn(usize) -> bool| -> Vec<f64> {
        let rows: Vec<usize> = (0..u.nrows()).filter(|&i| pred(i)).collect();
        (0..u.ncols())
            .map(|a| {
                if rows.is_empty() {
                    f64::NAN
                } else {
                    rows.iter().map(|&i| u[[i, a]]).sum::<f64>() / rows.len() as f64
                }
            })
            .collect()
    };
    let dead = |i: usize| transitions.outcomes[i] == Outcome::Nonsurvivor;
    Ok(UncertaintySummary {
        survivor: mean(&|i| transitions.outcomes[i] == Outcome::Survivor),
        nonsurvivor: mean(&dead),
        nonsurvivor_first_24h: mean(&|i| dead(i) && transitions.hours[i] < 24),
        nonsurvivor_last_24h: mean(&|i| dead(i) && transitions.hours_to_end[i] <= 24),
    })
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// Rows `[N, 9·51]` of one action's block, `[N, 51]`.
pub fn action_block(dists: ArrayView2<f64>, action: usize) -> Array2<f64> {
    dists.slice(s![.., action * N_ATOMS..(action + 1) * N_ATOMS]).to_owned()
}
