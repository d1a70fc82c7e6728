//! Cross-validated evaluation, ridge baselines and parameter sweeps.

use std::collections::BTreeMap;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classification::{fit_classifier, predict_class};
use crate::crowd::{
    aggregate_intervals, aggregate_percentile, AggregationMode, AggregationPolicy, CrowdAnswerSet,
    QuestionMap,
};
use crate::cvcv::{choose_lambda, default_grid, tune_lambda};
use crate::error::{Error, Result};
use crate::problem::{Bag, BallparkProblem, Dataset, SolveStatus};
use crate::qp::{ridge_closed_form, SolverConfig};
use crate::regression::{self, fit_with_slack, predict, RegressionMethod};
use crate::rng::{indexed_substream, substream};
use crate::synthetic::{synth_constraints, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Rmse,
    Mae,
    Accuracy,
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Rmse => "rmse",
            Metric::Mae => "mae",
            Metric::Accuracy => "accuracy",
        })
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rmse" => Ok(Metric::Rmse),
            "mae" => Ok(Metric::Mae),
            "accuracy" => Ok(Metric::Accuracy),
            other => Err(Error::InvalidArgument(format!("unknown metric '{other}'"))),
        }
    }
}

/// RMSE, MAE or sign accuracy (`sign(0) = +1`).
pub fn metrics(predictions: &[f64], truth: &[f64], metric: Metric) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            found: predictions.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput(
            "metric over zero predictions".to_string(),
        ));
    }
    let n = truth.len() as f64;
    let pairs = predictions.iter().zip(truth);
    Ok(match metric {
        Metric::Rmse => (pairs.map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n).sqrt(),
        Metric::Mae => pairs.map(|(p, t)| (p - t).abs()).sum::<f64>() / n,
        Metric::Accuracy => {
            let sign = |v: f64| v >= 0.0;
            pairs.filter(|(p, t)| sign(**p) == sign(**t)).count() as f64 / n
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: Metric,
    pub folds: usize,
    pub per_fold: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over folds.
    pub std: f64,
    pub config_fingerprint: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl EvalReport {
    pub fn from_folds(metric: Metric, per_fold: Vec<f64>, diagnostics: Vec<String>) -> Self {
        let k = per_fold.len();
        let mean = per_fold.iter().sum::<f64>() / k as f64;
        let std = if k > 1 {
            (per_fold
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>()
                / (k - 1) as f64)
                .sqrt()
        } else {
            0.0
        };
        Self {
            metric,
            folds: k,
            per_fold,
            mean,
            std,
            config_fingerprint: String::new(),
            diagnostics,
        }
    }

    pub fn with_fingerprint(mut self, fingerprint: impl Into<String>) -> Self {
        self.config_fingerprint = fingerprint.into();
        self
    }

    /// Tidy CSV: one row per fold plus a header.
    pub fn to_csv(&self, label: &str) -> String {
        let mut out = String::from("label,metric,fold,value,fingerprint\n");
        for (f, v) in self.per_fold.iter().enumerate() {
            out.push_str(&format!(
                "{label},{},{f},{v},{}\n",
                self.metric, self.config_fingerprint
            ));
        }
        out
    }
}

/// How the regularizer is picked for each fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaChoice {
    Fixed(f64),
    Cvcv { grid: Vec<f64>, folds: usize },
}

impl LambdaChoice {
    pub fn cvcv_default(folds: usize) -> Self {
        LambdaChoice::Cvcv {
            grid: default_grid(),
            folds,
        }
    }
}

/// What gets fit on each training fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Learner {
    Regression {
        method: RegressionMethod,
        lambda: LambdaChoice,
    },
    Classification {
        cost: f64,
    },
}

/// Fits the learner on `problem` and predicts `features`. Returns the
/// predictions and the fit status.
pub fn fit_predict(
    problem: &BallparkProblem,
    learner: &Learner,
    features: &DMatrix<f64>,
    seed: u64,
    config: &SolverConfig,
) -> Result<(Vec<f64>, SolveStatus, f64)> {
    match learner {
        Learner::Regression { method, lambda } => {
            let lambda = resolve_lambda(problem, lambda, *method, seed, config)?;
            let fit = regression::fit(problem, *method, lambda, config)?;
            let pred = predict(&fit, features)?;
            Ok((
                pred.iter().copied().collect(),
                fit.solution.status,
                fit.solution.total_slack(),
            ))
        }
        Learner::Classification { cost } => {
            let fit = fit_classifier(problem, *cost, config)?;
            let pred = predict_class(&fit, features)?;
            let slack = fit.total_slack();
            Ok((pred, fit.status, slack))
        }
    }
}

fn resolve_lambda(
    problem: &BallparkProblem,
    choice: &LambdaChoice,
    method: RegressionMethod,
    seed: u64,
    config: &SolverConfig,
) -> Result<f64> {
    match choice {
        LambdaChoice::Fixed(l) => Ok(*l),
        LambdaChoice::Cvcv { grid, folds } => {
            if method == RegressionMethod::Feasibility {
                return Ok(grid[0]);
            }
            Ok(tune_lambda(problem, grid, *folds, seed, method, config)?.chosen_lambda)
        }
    }
}

/// Row indices of each of `k` folds after a seeded shuffle.
pub fn kfold_indices(n: usize, k: usize, seed: u64, stream: &str) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(Error::InvalidArgument(format!(
            "need 2 <= folds <= rows, got {k} folds for {n} rows"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, stream));
    let mut folds = vec![Vec::new(); k];
    for (pos, i) in order.into_iter().enumerate() {
        folds[pos % k].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

fn complement(n: usize, held: &[usize]) -> Vec<usize> {
    let mut mask = vec![true; n];
    for &i in held {
        mask[i] = false;
    }
    (0..n).filter(|&i| mask[i]).collect()
}

/// K-fold evaluation against ground-truth targets. Bags are restricted to
/// each training fold with their bounds unchanged.
pub fn kfold_eval(
    problem: &BallparkProblem,
    learner: &Learner,
    metric: Metric,
    k: usize,
    seed: u64,
    config: &SolverConfig,
) -> Result<EvalReport> {
    let targets = problem.dataset.require_targets("evaluation")?.clone();
    let n = problem.dataset.n_rows();
    let folds = kfold_indices(n, k, seed, "eval.kfold")?;

    let results = (0..k)
        .into_par_iter()
        .map(|f| -> Result<(f64, Vec<String>)> {
            let test = &folds[f];
            let train = complement(n, test);
            let (sub, dropped) = problem.restrict_rows(&train)?;
            let diagnostics: Vec<String> = dropped
                .iter()
                .map(|b| format!("fold {f}: bag '{b}' has no training rows; dropped"))
                .collect();
            for d in &diagnostics {
                warn!("{d}");
            }
            let features = problem.dataset.features().select_rows(test);
            let (pred, _, _) = fit_predict(&sub, learner, &features, seed, config)?;
            let truth: Vec<f64> = test.iter().map(|&i| targets[i]).collect();
            Ok((metrics(&pred, &truth, metric)?, diagnostics))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut per_fold = Vec::with_capacity(k);
    let mut diagnostics = Vec::new();
    for (v, d) in results {
        per_fold.push(v);
        diagnostics.extend(d);
    }
    Ok(EvalReport::from_folds(metric, per_fold, diagnostics))
}

/// Ridge on `x` with an unpenalized intercept. Returns `(w, b)`.
fn centered_ridge(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<(DVector<f64>, f64)> {
    let x_mean = x.row_mean();
    let y_mean = y.mean();
    let xc = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - x_mean[j]);
    let yc = y.map(|v| v - y_mean);
    let w = ridge_closed_form(&xc, &yc, lambda)?;
    let b = y_mean - x_mean.transpose().dot(&w);
    Ok((w, b))
}

fn ridge_predict(x: &DMatrix<f64>, w: &DVector<f64>, b: f64) -> DVector<f64> {
    (x * w).add_scalar(b)
}

/// λ with the lowest inner-CV squared error (larger λ on ties).
fn inner_cv_lambda(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    grid: &[f64],
    seed: u64,
    fold: usize,
) -> Result<f64> {
    let m = x.nrows();
    let k = 3.min(m);
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut indexed_substream(seed, "eval.ridge.inner", fold));
    let parts: Vec<Vec<usize>> = (0..k)
        .map(|f| order.iter().skip(f).step_by(k).copied().collect())
        .collect();
    let mut scores = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let mut sse = 0.0;
        for test in &parts {
            let train = order
                .iter()
                .copied()
                .filter(|i| !test.contains(i))
                .collect::<Vec<_>>();
            let yt = DVector::from_iterator(train.len(), train.iter().map(|&i| y[i]));
            let (w, b) = centered_ridge(&x.select_rows(&train), &yt, lambda)?;
            let pred = ridge_predict(&x.select_rows(test), &w, b);
            sse += test
                .iter()
                .zip(pred.iter())
                .map(|(&i, p)| (p - y[i]).powi(2))
                .sum::<f64>();
        }
        scores.push(sse);
    }
    choose_lambda(grid, &scores)
        .map(|g| grid[g])
        .ok_or_else(|| Error::InvalidArgument("no finite inner-CV score".to_string()))
}

/// Default λ grid for the supervised baseline.
pub fn ridge_grid() -> Vec<f64> {
    crate::cvcv::log_grid(1e-3, 1e3, 13)
}

/// Supervised ridge trained on `budget` random rows of each training fold,
/// with λ picked by inner 3-fold CV.
pub fn ridge_baseline(
    dataset: &Dataset,
    budget: usize,
    grid: &[f64],
    k: usize,
    seed: u64,
    metric: Metric,
) -> Result<EvalReport> {
    if budget < 2 {
        return Err(Error::InvalidArgument(format!(
            "label budget must be at least 2, got {budget}"
        )));
    }
    if grid.is_empty() || grid.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
        return Err(Error::InvalidArgument(
            "ridge grid needs positive values".to_string(),
        ));
    }
    let y = dataset.require_targets("ridge baseline")?;
    let n = dataset.n_rows();
    let folds = kfold_indices(n, k, seed, "eval.kfold")?;
    let per_fold = (0..k)
        .into_par_iter()
        .map(|f| -> Result<f64> {
            let train = complement(n, &folds[f]);
            if budget > train.len() {
                return Err(Error::InvalidArgument(format!(
                    "label budget {budget} exceeds training fold size {}",
                    train.len()
                )));
            }
            let mut rng = indexed_substream(seed, "eval.ridge.sample", f);
            let picked: Vec<usize> = index::sample(&mut rng, train.len(), budget)
                .into_iter()
                .map(|p| train[p])
                .collect();
            let x = dataset.features().select_rows(&picked);
            let yt = DVector::from_iterator(budget, picked.iter().map(|&i| y[i]));
            let lambda = inner_cv_lambda(&x, &yt, grid, seed, f)?;
            let (w, b) = centered_ridge(&x, &yt, lambda)?;
            let test = &folds[f];
            let pred = ridge_predict(&dataset.features().select_rows(test), &w, b);
            let truth: Vec<f64> = test.iter().map(|&i| y[i]).collect();
            metrics(pred.as_slice(), &truth, metric)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_folds(metric, per_fold, Vec::new()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParameter {
    Epsilon,
    #[serde(rename = "b_l")]
    LowerQuantile,
    #[serde(rename = "d_l")]
    DiffLowerQuantile,
    Lambda,
}

impl std::fmt::Display for SweepParameter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepParameter::Epsilon => "epsilon",
            SweepParameter::LowerQuantile => "b_l",
            SweepParameter::DiffLowerQuantile => "d_l",
            SweepParameter::Lambda => "lambda",
        })
    }
}

impl std::str::FromStr for SweepParameter {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epsilon" => Ok(SweepParameter::Epsilon),
            "b_l" | "b-l" => Ok(SweepParameter::LowerQuantile),
            "d_l" | "d-l" => Ok(SweepParameter::DiffLowerQuantile),
            "lambda" => Ok(SweepParameter::Lambda),
            other => Err(Error::InvalidArgument(format!(
                "unknown sweep parameter '{other}'"
            ))),
        }
    }
}

/// Source of the problem for each sweep value.
#[derive(Debug, Clone)]
pub enum SweepTemplate {
    /// Synthetic ε-constraints on a dataset with targets.
    Synthetic {
        dataset: Dataset,
        spec: SyntheticSpec,
    },
    /// Crowd answers aggregated under a policy.
    Crowd {
        dataset: Dataset,
        answers: CrowdAnswerSet,
        questions: QuestionMap,
        bags: Vec<Bag>,
        policy: AggregationPolicy,
        /// Extra constraint rows appended after aggregation (e.g. a global bound).
        global_upper: Option<(Bag, f64)>,
    },
    /// A fixed problem.
    Fixed(BallparkProblem),
}

impl SweepTemplate {
    fn build(&self, parameter: SweepParameter, value: f64) -> Result<BallparkProblem> {
        match (self, parameter) {
            (SweepTemplate::Synthetic { dataset, spec }, SweepParameter::Epsilon) => {
                let spec = SyntheticSpec {
                    epsilon: value,
                    ..spec.clone()
                };
                Ok(BallparkProblem::new(
                    dataset.clone(),
                    synth_constraints(dataset, &spec)?,
                ))
            }
            (
                SweepTemplate::Crowd {
                    dataset,
                    answers,
                    questions,
                    bags,
                    policy,
                    global_upper,
                },
                SweepParameter::LowerQuantile | SweepParameter::DiffLowerQuantile,
            ) => {
                let mut policy = policy.clone();
                if parameter == SweepParameter::LowerQuantile {
                    policy.lower_quantile = value;
                } else {
                    policy.diff_lower_quantile = value;
                }
                let agg = match policy.mode {
                    AggregationMode::Percentile => {
                        aggregate_percentile(answers, &policy, bags.clone(), questions)?
                    }
                    AggregationMode::IntervalMean => {
                        aggregate_intervals(answers, bags.clone(), questions)?
                    }
                };
                let mut cs = agg.constraints;
                if let Some((bag, upper)) = global_upper {
                    cs = crate::crowd::add_global_bound(&cs, *upper, bag.clone(), false);
                }
                Ok(BallparkProblem::new(dataset.clone(), cs))
            }
            (SweepTemplate::Fixed(p), SweepParameter::Lambda) => Ok(p.clone()),
            _ => Err(Error::InvalidArgument(format!(
                "parameter {parameter} cannot be swept on this template"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: SweepParameter,
    pub value: f64,
    pub report: EvalReport,
    /// Whether the full-data constraints are feasible without slack.
    pub feasible: bool,
    /// Total slack of a full-data slack fit; 0 when feasible.
    pub total_slack: f64,
}

/// One row per value: evaluation with slack escalation plus a full-data
/// feasibility check.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    template: &SweepTemplate,
    parameter: SweepParameter,
    values: &[f64],
    learner: &Learner,
    metric: Metric,
    k: usize,
    seed: u64,
    config: &SolverConfig,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument(
            "sweep needs at least one value".to_string(),
        ));
    }
    let escalate = SolverConfig {
        escalate_to_slack: true,
        ..config.clone()
    };
    let strict = SolverConfig {
        escalate_to_slack: false,
        ..config.clone()
    };
    values
        .par_iter()
        .map(|&value| -> Result<SweepRow> {
            let problem = template.build(parameter, value)?;
            let learner = match (learner, parameter) {
                (Learner::Regression { method, .. }, SweepParameter::Lambda) => {
                    Learner::Regression {
                        method: *method,
                        lambda: LambdaChoice::Fixed(value),
                    }
                }
                _ => learner.clone(),
            };
            let (feasible, total_slack) = feasibility(&problem, &learner, &strict)?;
            if !feasible {
                info!("{parameter}={value}: infeasible, total slack {total_slack}");
            }
            let report = kfold_eval(&problem, &learner, metric, k, seed, &escalate)?;
            Ok(SweepRow {
                parameter,
                value,
                report,
                feasible,
                total_slack,
            })
        })
        .collect()
}

fn feasibility(
    problem: &BallparkProblem,
    learner: &Learner,
    strict: &SolverConfig,
) -> Result<(bool, f64)> {
    match learner {
        Learner::Regression { method, lambda } => {
            let lambda = match lambda {
                LambdaChoice::Fixed(l) => *l,
                LambdaChoice::Cvcv { grid, .. } => grid[grid.len() / 2],
            };
            let hard = regression::fit(problem, *method, lambda, strict)?;
            if hard.solution.status != SolveStatus::Infeasible {
                return Ok((true, 0.0));
            }
            let soft =
                fit_with_slack(problem, *method, Some(lambda), strict.slack_penalty, strict)?;
            Ok((false, soft.solution.total_slack()))
        }
        Learner::Classification { cost } => {
            let hard = fit_classifier(problem, *cost, strict)?;
            if hard.status != SolveStatus::Infeasible {
                return Ok((true, 0.0));
            }
            let soft = fit_classifier(
                problem,
                *cost,
                &SolverConfig {
                    escalate_to_slack: true,
                    ..strict.clone()
                },
            )?;
            Ok((false, soft.total_slack()))
        }
    }
}

/// Tidy CSV of a sweep: one row per fold measurement.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out =
        String::from("parameter,value,metric,fold,score,feasible,total_slack,fingerprint\n");
    for r in rows {
        for (f, v) in r.report.per_fold.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{f},{v},{},{},{}\n",
                r.parameter,
                r.value,
                r.report.metric,
                r.feasible,
                r.total_slack,
                r.report.config_fingerprint
            ));
        }
    }
    out
}

/// Summary table keyed by value, for JSON output.
pub fn sweep_summary(rows: &[SweepRow]) -> BTreeMap<String, f64> {
    rows.iter()
        .map(|r| (format!("{}", r.value), r.report.mean))
        .collect()
}
