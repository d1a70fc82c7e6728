//! Label-free choice of the ridge regularizer by held-out constraint violation.
//!
//! Each bag is split into K parts. For every fold the model is fit with the
//! bags shrunk to their training parts (bounds unchanged) and scored by how
//! far the predicted held-out bag means fall outside those same bounds.

use log::info;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{retain_bags, Bag, BallparkProblem, SolveStatus};
use crate::qp::SolverConfig;
use crate::regression::{self, predict, RegressionMethod};
use crate::rng::substream;

const TIE_TOLERANCE: f64 = 1e-12;

/// One fold of a bag split.
#[derive(Debug, Clone, PartialEq)]
pub struct BagSplit {
    /// Every bag: shrunk when split, whole when exempt.
    pub train: Vec<Bag>,
    /// Held-out parts of the split bags.
    pub holdout: Vec<Bag>,
    /// Bags too small to split.
    pub exempt: Vec<String>,
}

/// Splits every bag into `k` random parts. Bags with fewer than `k` members
/// are kept whole in every training set.
pub fn split_bags(bags: &[Bag], k: usize, seed: u64) -> Result<Vec<BagSplit>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 folds, got {k}"
        )));
    }
    let mut rng = substream(seed, "cvcv.split");
    let mut parts: Vec<Option<Vec<Vec<usize>>>> = Vec::with_capacity(bags.len());
    for bag in bags {
        if bag.len() < k {
            info!(
                "bag '{}' has {} < {k} members; kept whole",
                bag.name,
                bag.len()
            );
            parts.push(None);
            continue;
        }
        let mut members = bag.members.clone();
        members.shuffle(&mut rng);
        let mut folds = vec![Vec::new(); k];
        for (i, m) in members.into_iter().enumerate() {
            folds[i % k].push(m);
        }
        parts.push(Some(folds));
    }

    Ok((0..k)
        .map(|f| {
            let mut split = BagSplit {
                train: Vec::with_capacity(bags.len()),
                holdout: Vec::new(),
                exempt: Vec::new(),
            };
            for (bag, part) in bags.iter().zip(&parts) {
                match part {
                    None => {
                        split.train.push(bag.clone());
                        split.exempt.push(bag.name.clone());
                    }
                    Some(folds) => {
                        let rest = folds
                            .iter()
                            .enumerate()
                            .filter(|&(g, _)| g != f)
                            .flat_map(|(_, m)| m.iter().copied());
                        split.train.push(shrunk(bag, rest));
                        split.holdout.push(shrunk(bag, folds[f].iter().copied()));
                    }
                }
            }
            split
        })
        .collect())
}

fn shrunk(bag: &Bag, members: impl IntoIterator<Item = usize>) -> Bag {
    let mut b = Bag::new(bag.name.clone(), members);
    b.group = bag.group.clone();
    b
}

/// Distance from `mean` to `[lower, upper]`.
pub fn violation(mean: f64, lower: f64, upper: f64) -> f64 {
    (mean - upper).max(0.0) + (lower - mean).max(0.0)
}

/// `n` log-spaced values from `lo` to `hi`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
        .collect()
}

/// 13 values from 1e-4 to 1e2.
pub fn default_grid() -> Vec<f64> {
    log_grid(1e-4, 1e2, 13)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvcvReport {
    pub grid: Vec<f64>,
    /// `None` where every fold was infeasible.
    #[serde(with = "infinite_as_null")]
    pub mean_violation: Vec<f64>,
    pub chosen_lambda: f64,
    pub folds: usize,
    /// Indexed `[fold][grid index]`.
    #[serde(with = "nested_infinite_as_null")]
    pub per_fold_violations: Vec<Vec<f64>>,
    pub method: RegressionMethod,
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|x| x.is_finite().then_some(*x))
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(v.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect())
    }
}

mod nested_infinite_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|row| {
                row.iter()
                    .map(|x| x.is_finite().then_some(*x))
                    .collect::<Vec<_>>()
            })
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
        let v: Vec<Vec<Option<f64>>> = Vec::deserialize(d)?;
        Ok(v.into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|x| x.unwrap_or(f64::INFINITY))
                    .collect()
            })
            .collect())
    }
}

/// Mean held-out violation of one fit. `+∞` when the fit is infeasible.
fn fold_violation(
    problem: &BallparkProblem,
    split: &BagSplit,
    lambda: f64,
    method: RegressionMethod,
    config: &SolverConfig,
) -> Result<f64> {
    let train = problem.with_constraints(retain_bags(&problem.constraints, split.train.clone()));
    let fit = regression::fit(&train, method, lambda, config)?;
    if fit.solution.status == SolveStatus::Infeasible {
        return Ok(f64::INFINITY);
    }
    let heldout = retain_bags(&problem.constraints, split.holdout.clone()).compile()?;
    if heldout.rows.is_empty() {
        return Ok(0.0);
    }
    let predictions = predict(&fit, problem.dataset.features())?;
    let values = heldout.row_values(predictions.as_slice())?;
    let total: f64 = heldout
        .rows
        .iter()
        .zip(&values)
        .map(|(row, &v)| violation(v, row.lower, row.upper))
        .sum();
    Ok(total / heldout.rows.len() as f64)
}

/// Picks the λ with the lowest mean held-out violation, preferring larger λ on ties.
pub fn tune_lambda(
    problem: &BallparkProblem,
    grid: &[f64],
    k: usize,
    seed: u64,
    method: RegressionMethod,
    config: &SolverConfig,
) -> Result<CvcvReport> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty lambda grid".to_string()));
    }
    if let Some(bad) = grid.iter().find(|&&l| !(l > 0.0 && l.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be positive, got {bad}"
        )));
    }
    let splits = split_bags(&problem.constraints.bags, k, seed)?;

    let cells: Vec<(usize, usize)> = (0..k)
        .flat_map(|f| (0..grid.len()).map(move |g| (f, g)))
        .collect();
    let values = cells
        .par_iter()
        .map(|&(f, g)| fold_violation(problem, &splits[f], grid[g], method, config))
        .collect::<Result<Vec<f64>>>()?;
    let per_fold: Vec<Vec<f64>> = values.chunks(grid.len()).map(<[f64]>::to_vec).collect();

    let mean_violation: Vec<f64> = (0..grid.len())
        .map(|g| {
            let finite: Vec<f64> = per_fold
                .iter()
                .map(|row| row[g])
                .filter(|v| v.is_finite())
                .collect();
            if finite.is_empty() {
                f64::INFINITY
            } else {
                finite.iter().sum::<f64>() / finite.len() as f64
            }
        })
        .collect();

    let chosen = choose_lambda(grid, &mean_violation).ok_or_else(|| {
        Error::InvalidArgument("every lambda on the grid was infeasible".to_string())
    })?;
    Ok(CvcvReport {
        grid: grid.to_vec(),
        mean_violation,
        chosen_lambda: grid[chosen],
        folds: k,
        per_fold_violations: per_fold,
        method,
    })
}

/// Index of the minimum; among near-ties the largest λ wins.
pub(crate) fn choose_lambda(grid: &[f64], scores: &[f64]) -> Option<usize> {
    let best = scores
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return None;
    }
    let tol = TIE_TOLERANCE * best.abs().max(f64::MIN_POSITIVE);
    (0..grid.len())
        .filter(|&g| scores[g] <= best + tol)
        .max_by(|&a, &b| grid[a].total_cmp(&grid[b]))
}
