//! Binary classification from label-proportion constraints.
//!
//! Latent labels `y ∈ [−1, 1]^N` are relaxed and learned jointly with a
//! linear max-margin classifier by alternating two convex steps:
//!
//! - **w-step**: hinge-loss SVM on the current `y` (dual coordinate descent);
//! - **y-step**: a linear program over `y` with the proportion constraints,
//!   where a bag's proportion is `p̂ = mean(y)/2 + 1/2`.
//!
//! A half-step that would raise the joint objective is discarded, so the
//! recorded objective never increases.

use std::collections::BTreeMap;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::problem::{
    validate_problem, BallparkProblem, CompiledConstraints, Diagnostic, DiagnosticKind, FeatureMap,
    SolveStatus,
};
use crate::qp::{self, QpStatus, QuadraticProgram, SolverConfig};
use crate::regression::{predict_linear, ConstraintReport};

const MAX_ROUNDS: usize = 50;
const DCD_MAX_EPOCHS: usize = 2000;
const DCD_TOL: f64 = 1e-9;
const MONOTONE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationFit {
    pub weights: Vec<f64>,
    pub latent_labels: Vec<f64>,
    pub iterations: usize,
    /// Joint objective after each alternation round.
    pub objective_trace: Vec<f64>,
    pub status: SolveStatus,
    /// Per-row slack; all zero unless the constraints were infeasible.
    pub slacks: BTreeMap<String, f64>,
    /// Proportion rows evaluated on the latent labels.
    pub constraint_report: Vec<ConstraintReport>,
    pub cost: f64,
    pub feature_map: FeatureMap,
    pub input_dim: usize,
}

impl ClassificationFit {
    pub fn objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(f64::NAN)
    }

    pub fn total_slack(&self) -> f64 {
        self.slacks.values().sum()
    }

    pub fn report<'a>(
        &'a self,
        fingerprint: &'a str,
        p_hat: &'a BTreeMap<String, f64>,
    ) -> ClassificationReport<'a> {
        ClassificationReport {
            fingerprint,
            method: "classification",
            cost: self.cost,
            objective: self.objective(),
            status: self.status,
            iterations: self.iterations,
            objective_trace: &self.objective_trace,
            constraints: &self.constraint_report,
            weights: &self.weights,
            p_hat,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassificationReport<'a> {
    pub fingerprint: &'a str,
    pub method: &'static str,
    pub cost: f64,
    pub objective: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub objective_trace: &'a [f64],
    pub constraints: &'a [ConstraintReport],
    pub weights: &'a [f64],
    pub p_hat: &'a BTreeMap<String, f64>,
}

/// Joint objective `½‖w‖² + (C/N) Σ max(0, 1 − yᵢ·wᵀφᵢ)`.
pub fn joint_objective(
    design: &DMatrix<f64>,
    w: &DVector<f64>,
    y: &DVector<f64>,
    cost: f64,
) -> f64 {
    let f = design * w;
    let hinge: f64 = f
        .iter()
        .zip(y.iter())
        .map(|(fi, yi)| (1.0 - yi * fi).max(0.0))
        .sum();
    0.5 * w.norm_squared() + cost / design.nrows() as f64 * hinge
}

/// Hinge-loss SVM with real-valued labels, by dual coordinate descent.
/// `alpha` is warm-started and updated in place.
fn svm_step(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    cost: f64,
    alpha: &mut DVector<f64>,
) -> DVector<f64> {
    let n = design.nrows();
    let upper = cost / n as f64;
    let sq_norms: Vec<f64> = (0..n).map(|i| design.row(i).norm_squared()).collect();
    let mut w = DVector::zeros(design.ncols());
    for i in 0..n {
        alpha[i] = alpha[i].clamp(0.0, upper);
        if y[i] == 0.0 {
            alpha[i] = upper;
        }
        w.axpy(alpha[i] * y[i], &design.row(i).transpose(), 1.0);
    }
    for epoch in 0..DCD_MAX_EPOCHS {
        let mut max_pg: f64 = 0.0;
        for i in 0..n {
            let q = y[i] * y[i] * sq_norms[i];
            if q == 0.0 {
                continue;
            }
            let g = y[i] * design.row(i).dot(&w.transpose()) - 1.0;
            let pg = if alpha[i] <= 0.0 {
                g.min(0.0)
            } else if alpha[i] >= upper {
                g.max(0.0)
            } else {
                g
            };
            max_pg = max_pg.max(pg.abs());
            if pg != 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / q).clamp(0.0, upper);
                let step = (alpha[i] - old) * y[i];
                if step != 0.0 {
                    w.axpy(step, &design.row(i).transpose(), 1.0);
                }
            }
        }
        if max_pg < DCD_TOL {
            debug!("svm step converged after {} epochs", epoch + 1);
            break;
        }
    }
    w
}

/// Proportion rows rewritten over `y`: `p̂ = mean(y)/2 + 1/2`.
struct LatentRows {
    a: DMatrix<f64>,
    lower: DVector<f64>,
    upper: DVector<f64>,
}

fn latent_rows(compiled: &CompiledConstraints, n: usize) -> LatentRows {
    let a = compiled.instance_matrix(n);
    let ones = DVector::from_element(n, 1.0);
    let offset = &a * ones;
    let r = a.nrows();
    LatentRows {
        lower: DVector::from_fn(r, |k, _| 2.0 * compiled.rows[k].lower - offset[k]),
        upper: DVector::from_fn(r, |k, _| 2.0 * compiled.rows[k].upper - offset[k]),
        a,
    }
}

/// Sparse terms with lower and upper bounds.
type SparseRow = (Vec<(usize, f64)>, f64, f64);

struct LabelStep {
    y: DVector<f64>,
    slacks: Vec<f64>,
    status: QpStatus,
}

/// y-step LP over `(y, t[, ξ])`: minimize `Σ tᵢ (+ penalty·Σ ξ)` with
/// `tᵢ ≥ 1 − fᵢyᵢ`, `tᵢ ≥ 0`, `yᵢ ∈ [−1, 1]` and the proportion rows.
fn label_step(
    f: &DVector<f64>,
    rows: &LatentRows,
    slack_penalty: Option<f64>,
    config: &SolverConfig,
) -> Result<LabelStep> {
    let n = f.len();
    let r = rows.a.nrows();
    let n_slack = if slack_penalty.is_some() { r } else { 0 };
    let nv = 2 * n + n_slack;

    let mut linear = DVector::zeros(nv);
    linear.rows_mut(n, n).fill(1.0);
    if let Some(p) = slack_penalty {
        linear.rows_mut(2 * n, r).fill(p);
    }

    let mut a_rows: Vec<SparseRow> = Vec::with_capacity(3 * n + 3 * r);
    for i in 0..n {
        a_rows.push((vec![(i, f[i]), (n + i, 1.0)], 1.0, f64::INFINITY));
        a_rows.push((vec![(n + i, 1.0)], 0.0, f64::INFINITY));
        a_rows.push((vec![(i, 1.0)], -1.0, 1.0));
    }
    for k in 0..r {
        let terms: Vec<(usize, f64)> = (0..n)
            .filter(|&i| rows.a[(k, i)] != 0.0)
            .map(|i| (i, rows.a[(k, i)]))
            .collect();
        match slack_penalty {
            None => a_rows.push((terms, rows.lower[k], rows.upper[k])),
            Some(_) => {
                let xi = 2 * n + k;
                if rows.upper[k].is_finite() {
                    let mut t = terms.clone();
                    t.push((xi, -1.0));
                    a_rows.push((t, f64::NEG_INFINITY, rows.upper[k]));
                }
                if rows.lower[k].is_finite() {
                    let mut t = terms;
                    t.push((xi, 1.0));
                    a_rows.push((t, rows.lower[k], f64::INFINITY));
                }
                a_rows.push((vec![(xi, 1.0)], 0.0, f64::INFINITY));
            }
        }
    }
    let mut a = DMatrix::zeros(a_rows.len(), nv);
    for (row, (terms, _, _)) in a_rows.iter().enumerate() {
        for &(j, v) in terms {
            a[(row, j)] += v;
        }
    }
    let lower = DVector::from_iterator(a_rows.len(), a_rows.iter().map(|r| r.1));
    let upper = DVector::from_iterator(a_rows.len(), a_rows.iter().map(|r| r.2));
    let qp = QuadraticProgram::new(DMatrix::zeros(nv, nv), linear, a, lower, upper)?;
    let sol = qp::solve_qp(&qp, config)?;
    let y = sol.x.rows(0, n).map(|v| v.clamp(-1.0, 1.0));
    // Rows over y are twice the proportion rows.
    let slacks = (0..n_slack)
        .map(|k| 0.5 * sol.x[2 * n + k].max(0.0))
        .collect();
    Ok(LabelStep {
        y,
        slacks,
        status: sol.status,
    })
}

/// Midpoint start: each bagged instance takes the average of `2·mid − 1`
/// over the bounded bags it belongs to; others start at 0.
fn initial_labels(problem: &BallparkProblem) -> DVector<f64> {
    let n = problem.dataset.n_rows();
    let mut sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    for b in &problem.constraints.bounds {
        let Some(bag) = problem.constraints.bag(&b.bag) else {
            continue;
        };
        let lo = if b.lower.is_finite() {
            b.lower.max(0.0)
        } else {
            0.0
        };
        let hi = if b.upper.is_finite() {
            b.upper.min(1.0)
        } else {
            1.0
        };
        let target = (lo + hi) - 1.0;
        for &i in &bag.members {
            sum[i] += target;
            count[i] += 1;
        }
    }
    DVector::from_fn(n, |i, _| {
        if count[i] == 0 {
            0.0
        } else {
            (sum[i] / count[i] as f64).clamp(-1.0, 1.0)
        }
    })
}

fn check_classification_problem(problem: &BallparkProblem, cost: f64) -> Result<()> {
    let mut diagnostics = validate_problem(problem);
    for (k, _) in problem.constraints.ratios.iter().enumerate() {
        diagnostics.push(Diagnostic::new(
            DiagnosticKind::UnsupportedConstraint,
            format!("ratio[{k}]: ratio constraints are not supported for classification"),
        ));
    }
    for (k, b) in problem.constraints.bounds.iter().enumerate() {
        if b.lower > 1.0 || b.upper < 0.0 {
            diagnostics.push(Diagnostic::new(
                DiagnosticKind::InvertedBounds,
                format!(
                    "bound[{k}]: proportion bounds [{}, {}] exclude [0, 1]",
                    b.lower, b.upper
                ),
            ));
        }
    }
    if !diagnostics.is_empty() {
        return Err(Error::InvalidProblem(diagnostics));
    }
    if !(cost > 0.0 && cost.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "cost must be positive, got {cost}"
        )));
    }
    Ok(())
}

/// Alternating minimization of the joint hinge objective.
pub fn fit_classifier(
    problem: &BallparkProblem,
    cost: f64,
    config: &SolverConfig,
) -> Result<ClassificationFit> {
    check_classification_problem(problem, cost)?;
    config.validate()?;
    let design = problem.design();
    let n = design.nrows();
    let compiled = problem.constraints.compile()?;
    let rows = latent_rows(&compiled, n);

    let mut y = initial_labels(problem);
    let mut alpha = DVector::zeros(n);
    let mut w = svm_step(&design, &y, cost, &mut alpha);

    let mut slack_penalty = None;
    let mut slacks = vec![0.0; rows.a.nrows()];
    let mut trace: Vec<f64> = Vec::new();
    let mut status = SolveStatus::MaxIterations;
    let mut y_feasible = false;
    let mut rounds = 0;

    let total = |w: &DVector<f64>, y: &DVector<f64>, slacks: &[f64], penalty: Option<f64>| {
        joint_objective(&design, w, y, cost)
            + penalty.map_or(0.0, |p| p * slacks.iter().sum::<f64>())
    };

    for round in 1..=MAX_ROUNDS {
        rounds = round;
        // y-step. The LP is scaled by C/N relative to the joint objective.
        let f = &design * &w;
        let mut step = label_step(
            &f,
            &rows,
            slack_penalty.map(|p: f64| p * n as f64 / (2.0 * cost)),
            config,
        )?;
        if step.status == QpStatus::Infeasible && slack_penalty.is_none() {
            if !config.escalate_to_slack {
                return Ok(finish(
                    problem,
                    &compiled,
                    w,
                    y,
                    rounds,
                    trace,
                    SolveStatus::Infeasible,
                    &slacks,
                    cost,
                ));
            }
            warn!(
                "proportion constraints infeasible; continuing with slack penalty {}",
                config.slack_penalty
            );
            slack_penalty = Some(config.slack_penalty);
            y_feasible = false;
            step = label_step(
                &f,
                &rows,
                slack_penalty.map(|p| p * n as f64 / (2.0 * cost)),
                config,
            )?;
        }
        if step.status == QpStatus::Infeasible {
            return Err(Error::InvalidArgument(
                "label step infeasible even with slack".to_string(),
            ));
        }
        let candidate = total(&w, &step.y, &step.slacks, slack_penalty);
        let current = total(&w, &y, &slacks, slack_penalty);
        if !y_feasible || candidate <= current + MONOTONE_SLACK * current.abs().max(1.0) {
            y = step.y;
            if slack_penalty.is_some() {
                slacks = step.slacks;
            }
            y_feasible = true;
        }

        // w-step.
        let before = total(&w, &y, &slacks, slack_penalty);
        let mut trial_alpha = alpha.clone();
        let w_new = svm_step(&design, &y, cost, &mut trial_alpha);
        let after = total(&w_new, &y, &slacks, slack_penalty);
        if after <= before {
            w = w_new;
            alpha = trial_alpha;
        }

        let value = total(&w, &y, &slacks, slack_penalty);
        let previous = trace.last().copied();
        trace.push(value);
        if let Some(prev) = previous {
            if prev - value <= config.rel_tolerance * prev.abs().max(1.0) {
                status = SolveStatus::Optimal;
                break;
            }
        }
    }
    if status == SolveStatus::Optimal && slack_penalty.is_some() {
        status = if slacks.iter().any(|&s| s > 1e-9) {
            SolveStatus::OptimalWithSlack
        } else {
            SolveStatus::Optimal
        };
    }
    Ok(finish(
        problem, &compiled, w, y, rounds, trace, status, &slacks, cost,
    ))
}

#[allow(clippy::too_many_arguments)]
fn finish(
    problem: &BallparkProblem,
    compiled: &CompiledConstraints,
    w: DVector<f64>,
    y: DVector<f64>,
    iterations: usize,
    objective_trace: Vec<f64>,
    status: SolveStatus,
    slacks: &[f64],
    cost: f64,
) -> ClassificationFit {
    let proportions: Vec<f64> = y.iter().map(|v| 0.5 * v + 0.5).collect();
    let values = compiled
        .row_values(&proportions)
        .unwrap_or_else(|_| vec![f64::NAN; compiled.rows.len()]);
    let mut slack_map = BTreeMap::new();
    let report = compiled
        .rows
        .iter()
        .zip(values)
        .zip(slacks)
        .map(|((row, v), &s)| {
            let s = if s <= 1e-9 { 0.0 } else { s };
            slack_map.insert(row.id.clone(), s);
            ConstraintReport {
                id: row.id.clone(),
                lhs_value: v,
                lower: row.lower,
                upper: row.upper,
                slack: s,
                violation: row.violation(v),
            }
        })
        .collect();
    ClassificationFit {
        weights: w.iter().copied().collect(),
        latent_labels: y.iter().copied().collect(),
        iterations,
        objective_trace,
        status,
        slacks: slack_map,
        constraint_report: report,
        cost,
        feature_map: problem.feature_map,
        input_dim: problem.dataset.n_features(),
    }
}

/// `sign(wᵀφ(x))` per row, with `sign(0) = +1`.
pub fn predict_class(fit: &ClassificationFit, features: &DMatrix<f64>) -> Result<Vec<f64>> {
    let scores = predict_linear(&fit.weights, fit.feature_map, fit.input_dim, features)?;
    Ok(scores
        .iter()
        .map(|&s| if s >= 0.0 { 1.0 } else { -1.0 })
        .collect())
}

/// Estimated positive proportion `mean(y)/2 + 1/2` of each bag under the latent labels.
pub fn p_hat(fit: &ClassificationFit, problem: &BallparkProblem) -> Result<BTreeMap<String, f64>> {
    problem
        .constraints
        .bags
        .iter()
        .map(|b| {
            let m = crate::problem::bag_mean(&fit.latent_labels, b)?;
            Ok((b.name.clone(), 0.5 * m + 0.5))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{positive_proportion, Bag, BoundConstraint, ConstraintSet, Dataset};
    use crate::rng::substream;
    use rand::Rng;

    fn bound(bag: &str, lower: f64, upper: f64) -> BoundConstraint {
        BoundConstraint {
            bag: bag.into(),
            lower,
            upper,
        }
    }

    fn two_clusters(per: usize, seed: u64) -> (Dataset, Vec<f64>) {
        let mut rng = substream(seed, "test.clusters");
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (center, label) in [(3.0, 1.0), (-3.0, -1.0)] {
            for _ in 0..per {
                rows.push(vec![
                    center + rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]);
                labels.push(label);
            }
        }
        (
            Dataset::from_rows(&rows, vec!["a".into(), "b".into()]).unwrap(),
            labels,
        )
    }

    #[test]
    fn separable_clusters_fully_recovered() {
        let (ds, labels) = two_clusters(20, 1);
        let mut cs =
            ConstraintSet::with_bags(vec![Bag::new("pos", 0..20), Bag::new("neg", 20..40)]);
        cs.bounds.push(bound("pos", 0.9, 1.0));
        cs.bounds.push(bound("neg", 0.0, 0.1));
        let problem = BallparkProblem::new(ds.clone(), cs);
        let fit = fit_classifier(&problem, 10.0, &SolverConfig::default()).unwrap();
        let pred = predict_class(&fit, ds.features()).unwrap();
        assert_eq!(pred, labels);
        for pair in fit.objective_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-8);
        }
    }

    #[test]
    fn pinned_half_proportion() {
        let rows: Vec<Vec<f64>> = [-2.0, -1.0, 1.0, 2.0].iter().map(|&x| vec![x]).collect();
        let ds = Dataset::from_rows(&rows, vec!["x".into()]).unwrap();
        let mut cs = ConstraintSet::with_bags(vec![Bag::new("all", 0..4)]);
        cs.bounds.push(bound("all", 0.5, 0.5));
        let problem = BallparkProblem::new(ds, cs);
        let fit = fit_classifier(&problem, 1.0, &SolverConfig::default()).unwrap();
        let p = p_hat(&fit, &problem).unwrap();
        assert!((p["all"] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn all_positive_bag_forces_labels() {
        let (ds, _) = two_clusters(5, 2);
        let mut cs = ConstraintSet::with_bags(vec![Bag::new("all", 0..10)]);
        cs.bounds.push(bound("all", 1.0, 1.0));
        let fit =
            fit_classifier(&BallparkProblem::new(ds, cs), 1.0, &SolverConfig::default()).unwrap();
        assert!(fit.latent_labels.iter().all(|&y| (y - 1.0).abs() < 1e-6));
    }

    #[test]
    fn ratios_rejected() {
        let (ds, _) = two_clusters(3, 3);
        let mut cs = ConstraintSet::with_bags(vec![Bag::new("a", 0..3), Bag::new("b", 3..6)]);
        cs.ratios.push(crate::problem::RatioConstraint {
            bag_num: "a".into(),
            bag_den: "b".into(),
            lower: 1.0,
            upper: 2.0,
            positivity_floor: 0.01,
        });
        assert!(
            fit_classifier(&BallparkProblem::new(ds, cs), 1.0, &SolverConfig::default()).is_err()
        );
    }

    #[test]
    fn contradictory_proportions_use_slack() {
        let (ds, _) = two_clusters(5, 4);
        let mut cs = ConstraintSet::with_bags(vec![Bag::new("all", 0..10)]);
        cs.bounds.push(bound("all", 0.0, 0.2));
        cs.bounds.push(bound("all", 0.8, 1.0));
        let problem = BallparkProblem::new(ds, cs);
        let fit = fit_classifier(&problem, 1.0, &SolverConfig::default()).unwrap();
        assert!(fit.total_slack() > 0.5);
        let strict = SolverConfig {
            escalate_to_slack: false,
            ..SolverConfig::default()
        };
        let fit = fit_classifier(&problem, 1.0, &strict).unwrap();
        assert_eq!(fit.status, SolveStatus::Infeasible);
    }

    #[test]
    fn predict_examples() {
        let fit = ClassificationFit {
            weights: vec![1.0, 0.0],
            latent_labels: vec![],
            iterations: 0,
            objective_trace: vec![],
            status: SolveStatus::Optimal,
            slacks: BTreeMap::new(),
            constraint_report: vec![],
            cost: 1.0,
            feature_map: FeatureMap::IdentityWithBias,
            input_dim: 1,
        };
        let x = DMatrix::from_column_slice(3, 1, &[2.0, -2.0, 0.0]);
        assert_eq!(predict_class(&fit, &x).unwrap(), vec![1.0, -1.0, 1.0]);
        assert!(predict_class(&fit, &DMatrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn p_hat_matches_rounded_proportion() {
        let ds = Dataset::new(
            DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]),
            vec!["x".into()],
        )
        .unwrap();
        let bag = Bag::new("b", [0, 1, 3]);
        let problem = BallparkProblem::new(ds, ConstraintSet::with_bags(vec![bag.clone()]));
        let labels = vec![1.0, -1.0, -1.0, 1.0];
        let fit = ClassificationFit {
            weights: vec![0.0, 0.0],
            latent_labels: labels.clone(),
            iterations: 0,
            objective_trace: vec![],
            status: SolveStatus::Optimal,
            slacks: BTreeMap::new(),
            constraint_report: vec![],
            cost: 1.0,
            feature_map: FeatureMap::IdentityWithBias,
            input_dim: 1,
        };
        let p = p_hat(&fit, &problem).unwrap();
        assert!((p["b"] - positive_proportion(&labels, &bag).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn svm_step_matches_known_separator() {
        // Points ±1 on a line with labels ±1 and a large cost: the hard-margin
        // separator through the origin has w = (1, 0).
        let design = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, -1.0, 1.0]);
        let y = DVector::from_vec(vec![1.0, -1.0]);
        let mut alpha = DVector::zeros(2);
        let w = svm_step(&design, &y, 1e3, &mut alpha);
        assert!((w[0] - 1.0).abs() < 1e-6 && w[1].abs() < 1e-6, "{w}");
    }
}
