//! Regression from bag-level constraints.
//!
//! Two fits are provided:
//!
//! - **Two-step**: the ridge weights are written in closed form as a function
//!   of the latent labels `y`, leaving a QP in `y` alone:
//!   minimize `yᵀ (I − H) y / N` over the constraint set, where `H` is the
//!   ridge hat matrix. This is the joint objective `(‖y − Φw‖² + λ‖w‖²) / N`
//!   with `w` already minimized out. The weights are then the ridge fit to
//!   the optimal `y`.
//! - **Feasibility**: minimum-norm weights whose *predictions* satisfy the
//!   constraints. No latent labels.
//!
//! Either fit can be softened with per-row slack variables, which widen a
//! row on both sides at a linear cost.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{
    validate_problem, BallparkProblem, CompiledConstraints, DiagnosticKind, FeatureMap, Solution,
    SolveStatus,
};
use crate::qp::{self, QpStatus, QuadraticProgram, SolverConfig};

/// Slack below this is reported as zero.
const ZERO_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegressionMethod {
    TwoStep,
    Feasibility,
}

impl std::fmt::Display for RegressionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RegressionMethod::TwoStep => "two-step",
            RegressionMethod::Feasibility => "feasibility",
        })
    }
}

impl std::str::FromStr for RegressionMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-step" => Ok(RegressionMethod::TwoStep),
            "feasibility" => Ok(RegressionMethod::Feasibility),
            other => Err(Error::InvalidArgument(format!("unknown method '{other}'"))),
        }
    }
}

/// Per-row outcome of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub id: String,
    pub lhs_value: f64,
    #[serde(serialize_with = "ser_bound")]
    pub lower: f64,
    #[serde(serialize_with = "ser_bound")]
    pub upper: f64,
    pub slack: f64,
    pub violation: f64,
}

pub(crate) fn ser_bound<S: serde::Serializer>(
    v: &f64,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit {
    pub method: RegressionMethod,
    pub solution: Solution,
    /// Ridge regularizer λ; `None` for the feasibility method.
    pub regularizer_used: Option<f64>,
    pub constraint_report: Vec<ConstraintReport>,
    pub feature_map: FeatureMap,
    pub input_dim: usize,
    pub iterations: usize,
}

/// Fit report document written by the CLI.
#[derive(Debug, Clone, Serialize)]
pub struct FitReport<'a> {
    pub fingerprint: &'a str,
    pub method: RegressionMethod,
    pub lambda: Option<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub constraints: &'a [ConstraintReport],
    pub weights: &'a [f64],
}

impl RegressionFit {
    pub fn report<'a>(&'a self, fingerprint: &'a str) -> FitReport<'a> {
        FitReport {
            fingerprint,
            method: self.method,
            lambda: self.regularizer_used,
            objective: self.solution.objective,
            status: self.solution.status,
            constraints: &self.constraint_report,
            weights: &self.solution.weights,
        }
    }

    pub fn max_violation(&self) -> f64 {
        self.constraint_report
            .iter()
            .map(|c| c.violation)
            .fold(0.0, f64::max)
    }
}

/// Fits with the given method, escalating to slack per `config`.
pub fn fit(
    problem: &BallparkProblem,
    method: RegressionMethod,
    regularizer: f64,
    config: &SolverConfig,
) -> Result<RegressionFit> {
    match method {
        RegressionMethod::TwoStep => fit_two_step(problem, regularizer, config),
        RegressionMethod::Feasibility => fit_feasibility(problem, config),
    }
}

/// Two-step fit: QP over latent labels, then ridge on the solution.
pub fn fit_two_step(
    problem: &BallparkProblem,
    regularizer: f64,
    config: &SolverConfig,
) -> Result<RegressionFit> {
    check_problem(problem, false)?;
    check_regularizer(regularizer)?;
    let system = two_step_system(problem, regularizer)?;
    hard_fit(problem, system, Some(regularizer), config)
}

/// Minimum-norm weights whose bag-mean predictions satisfy the constraints.
pub fn fit_feasibility(problem: &BallparkProblem, config: &SolverConfig) -> Result<RegressionFit> {
    check_problem(problem, false)?;
    let system = feasibility_system(problem)?;
    hard_fit(problem, system, None, config)
}

/// Fit with every constraint row softened by a non-negative slack.
///
/// Inverted bounds are tolerated here: the slack absorbs them.
pub fn fit_with_slack(
    problem: &BallparkProblem,
    method: RegressionMethod,
    regularizer: Option<f64>,
    slack_penalty: f64,
    config: &SolverConfig,
) -> Result<RegressionFit> {
    check_problem(problem, true)?;
    if !(slack_penalty > 0.0 && slack_penalty.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "slack penalty must be positive, got {slack_penalty}"
        )));
    }
    let system = match method {
        RegressionMethod::TwoStep => {
            let lambda = regularizer.ok_or_else(|| {
                Error::InvalidArgument("two-step fit needs a regularizer".to_string())
            })?;
            check_regularizer(lambda)?;
            two_step_system(problem, lambda)?
        }
        RegressionMethod::Feasibility => feasibility_system(problem)?,
    };
    let lambda = match method {
        RegressionMethod::TwoStep => regularizer,
        RegressionMethod::Feasibility => None,
    };
    slack_fit(problem, system, lambda, slack_penalty, config)
}

/// Predictions `wᵀφ(x)` for each row of `features`.
pub fn predict(fit: &RegressionFit, features: &DMatrix<f64>) -> Result<DVector<f64>> {
    predict_linear(
        &fit.solution.weights,
        fit.feature_map,
        fit.input_dim,
        features,
    )
}

pub(crate) fn predict_linear(
    weights: &[f64],
    feature_map: FeatureMap,
    input_dim: usize,
    features: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    if features.ncols() != input_dim {
        return Err(Error::DimensionMismatch {
            expected: input_dim,
            found: features.ncols(),
        });
    }
    let phi = feature_map.apply(features);
    if phi.ncols() != weights.len() {
        return Err(Error::DimensionMismatch {
            expected: weights.len(),
            found: phi.ncols(),
        });
    }
    Ok(phi * DVector::from_column_slice(weights))
}

fn check_regularizer(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "regularizer must be positive, got {lambda}"
        )))
    }
}

fn check_problem(problem: &BallparkProblem, allow_inverted: bool) -> Result<()> {
    let diagnostics: Vec<_> = validate_problem(problem)
        .into_iter()
        .filter(|d| !(allow_inverted && d.kind == DiagnosticKind::InvertedBounds))
        .collect();
    if diagnostics.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidProblem(diagnostics))
    }
}

/// Which variables the QP is over.
enum Space {
    /// Latent labels, with the design needed for the final ridge step.
    Latent {
        design: DMatrix<f64>,
        row_weights: Option<DVector<f64>>,
        lambda: f64,
        /// Maps the QP variables back to `s`; `None` when they are `s` itself.
        basis: Option<DMatrix<f64>>,
    },
    /// Weights directly.
    Weights { design: DMatrix<f64> },
}

/// QP data before any slack is added.
struct BaseSystem {
    space: Space,
    compiled: CompiledConstraints,
    quadratic: DMatrix<f64>,
    linear: DVector<f64>,
    /// Constraint rows expressed over the QP variables.
    rows: DMatrix<f64>,
    /// Rows that are never softened (labeled pins).
    fixed_rows: DMatrix<f64>,
    fixed_values: DVector<f64>,
    constant: f64,
}

/// Relative weight of labeled rows against unlabeled ones, or `None` when
/// labeled rows are treated like unlabeled ones.
fn labeled_row_weights(problem: &BallparkProblem) -> Option<DVector<f64>> {
    let labeled = problem.dataset.labeled_indices();
    if problem.labeled_cost <= 0.0 || labeled.is_empty() {
        return None;
    }
    let n = problem.dataset.n_rows() as f64;
    let rel = (problem.labeled_cost / labeled.len() as f64) / (problem.unlabeled_cost / n);
    Some(DVector::from_fn(problem.dataset.n_rows(), |i, _| {
        if labeled.contains(&i) {
            rel
        } else {
            1.0
        }
    }))
}

/// Gram-Schmidt residuals below this fraction of the largest row norm count as dependent.
const RANK_TOL: f64 = 1e-12;

fn two_step_system(problem: &BallparkProblem, lambda: f64) -> Result<BaseSystem> {
    let design = problem.design();
    let n = design.nrows();
    let compiled = problem.constraints.compile()?;
    let row_weights = labeled_row_weights(problem);
    let nf = n as f64;

    // Write y = Φ w + r and minimize (λ‖w‖² + rᵀ C r) / N jointly; for fixed
    // y the best w is the ridge fit, so this is the reduced objective. With
    // s = (√λ w, C^(1/2) r) the objective is ‖s‖² / N and each constraint
    // row a on y becomes [a Φ / √λ, a C^(-1/2)] on s.
    let c = row_weights
        .clone()
        .unwrap_or_else(|| DVector::from_element(n, 1.0));
    let p = design.ncols();
    let root_lambda = lambda.sqrt();
    let lift = |a: &DMatrix<f64>| -> DMatrix<f64> {
        let mut out = DMatrix::zeros(a.nrows(), p + n);
        out.view_mut((0, 0), (a.nrows(), p))
            .copy_from(&((a * &design) / root_lambda));
        for j in 0..n {
            let scale = 1.0 / c[j].sqrt();
            for i in 0..a.nrows() {
                out[(i, p + j)] = a[(i, j)] * scale;
            }
        }
        out
    };

    let rows = lift(&compiled.instance_matrix(n));

    let (fixed_rows, fixed_values) = match &row_weights {
        None => (DMatrix::zeros(0, p + n), DVector::zeros(0)),
        Some(_) => {
            let targets = problem.dataset.require_targets("labeled rows")?;
            let labeled: Vec<usize> = problem.dataset.labeled_indices().iter().copied().collect();
            let mut a = DMatrix::zeros(labeled.len(), n);
            let mut v = DVector::zeros(labeled.len());
            for (r, &i) in labeled.iter().enumerate() {
                a[(r, i)] = 1.0;
                v[r] = targets[i];
            }
            (lift(&a), v)
        }
    };

    let r = rows.nrows();
    let (rows, fixed_rows, basis) = if r + fixed_rows.nrows() < p + n {
        // At the optimum s lies in the row space of the constraints, so the
        // QP shrinks to one variable per independent row.
        let b = stack_rows(&rows, &fixed_rows);
        let basis = row_space_basis(&b);
        let reduced = &b * &basis;
        let rows = reduced.rows(0, r).into_owned();
        let fixed = reduced.rows(r, reduced.nrows() - r).into_owned();
        (rows, fixed, Some(basis))
    } else {
        (rows, fixed_rows, None)
    };
    let nv = rows.ncols();

    Ok(BaseSystem {
        space: Space::Latent {
            design,
            row_weights,
            lambda,
            basis,
        },
        compiled,
        quadratic: DMatrix::identity(nv, nv) * (2.0 / nf),
        linear: DVector::zeros(nv),
        rows,
        fixed_rows,
        fixed_values,
        constant: 0.0,
    })
}

/// Orthonormal columns spanning the row space of `b`, by modified
/// Gram-Schmidt with one reorthogonalization pass. Rows whose remainder is
/// below `RANK_TOL` times the largest row norm are dependent and skipped.
fn row_space_basis(b: &DMatrix<f64>) -> DMatrix<f64> {
    let scale = b.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for row in b.row_iter() {
        let mut v = row.transpose();
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&v);
                v.axpy(-c, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm > RANK_TOL * scale {
            basis.push(v / norm);
        }
    }
    if basis.is_empty() {
        DMatrix::zeros(b.ncols(), 0)
    } else {
        DMatrix::from_columns(&basis)
    }
}

fn feasibility_system(problem: &BallparkProblem) -> Result<BaseSystem> {
    let design = problem.design();
    let n = design.nrows();
    let p = design.ncols();
    let compiled = problem.constraints.compile()?;
    let rows = compiled.instance_matrix(n) * &design;

    let mut quadratic = DMatrix::identity(p, p);
    let mut linear = DVector::zeros(p);
    let mut constant = 0.0;
    let labeled = problem.dataset.labeled_indices();
    if problem.labeled_cost > 0.0 && !labeled.is_empty() {
        let targets = problem.dataset.require_targets("labeled rows")?;
        let idx: Vec<usize> = labeled.iter().copied().collect();
        let phi_l = design.select_rows(&idx);
        let y_l = DVector::from_iterator(idx.len(), idx.iter().map(|&i| targets[i]));
        let k = problem.labeled_cost / idx.len() as f64;
        quadratic += phi_l.transpose() * &phi_l * (2.0 * k);
        linear -= phi_l.transpose() * &y_l * (2.0 * k);
        constant = k * y_l.norm_squared();
    }

    Ok(BaseSystem {
        space: Space::Weights { design },
        compiled,
        quadratic: symmetrize(quadratic),
        linear,
        rows,
        fixed_rows: DMatrix::zeros(0, p),
        fixed_values: DVector::zeros(0),
        constant,
    })
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn stack_rows(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let cols = top.ncols().max(bottom.ncols());
    let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), cols);
    if top.nrows() > 0 {
        out.view_mut((0, 0), top.shape()).copy_from(top);
    }
    if bottom.nrows() > 0 {
        out.view_mut((top.nrows(), 0), bottom.shape())
            .copy_from(bottom);
    }
    out
}

fn hard_fit(
    problem: &BallparkProblem,
    system: BaseSystem,
    lambda: Option<f64>,
    config: &SolverConfig,
) -> Result<RegressionFit> {
    let r = system.rows.nrows();
    let lower = DVector::from_iterator(
        r + system.fixed_values.len(),
        system
            .compiled
            .rows
            .iter()
            .map(|row| row.lower)
            .chain(system.fixed_values.iter().copied()),
    );
    let upper = DVector::from_iterator(
        r + system.fixed_values.len(),
        system
            .compiled
            .rows
            .iter()
            .map(|row| row.upper)
            .chain(system.fixed_values.iter().copied()),
    );
    let qp = QuadraticProgram::new(
        system.quadratic.clone(),
        system.linear.clone(),
        stack_rows(&system.rows, &system.fixed_rows),
        lower,
        upper,
    )?;
    let sol = qp::solve_qp(&qp, config)?;
    match sol.status {
        QpStatus::Infeasible if config.escalate_to_slack => {
            warn!(
                "constraints infeasible ({}); refitting with slack penalty {}",
                sol.certificate.as_deref().unwrap_or("no certificate"),
                config.slack_penalty
            );
            slack_fit(problem, system, lambda, config.slack_penalty, config)
        }
        status => {
            let status = match status {
                QpStatus::Optimal => SolveStatus::Optimal,
                QpStatus::Infeasible => SolveStatus::Infeasible,
                QpStatus::MaxIterations => SolveStatus::MaxIterations,
            };
            let slacks = vec![0.0; r];
            assemble(
                problem,
                &system,
                lambda,
                &sol.x,
                &slacks,
                0.0,
                status,
                sol.iterations,
                config,
            )
        }
    }
}

fn slack_fit(
    problem: &BallparkProblem,
    system: BaseSystem,
    lambda: Option<f64>,
    penalty: f64,
    config: &SolverConfig,
) -> Result<RegressionFit> {
    let nv = system.linear.len();
    let r = system.rows.nrows();
    let total = nv + r;

    let mut quadratic = DMatrix::zeros(total, total);
    quadratic
        .view_mut((0, 0), (nv, nv))
        .copy_from(&system.quadratic);
    let mut linear = DVector::from_element(total, penalty);
    linear.rows_mut(0, nv).copy_from(&system.linear);

    let mut a_rows: Vec<DVector<f64>> = Vec::new();
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    for (k, row) in system.compiled.rows.iter().enumerate() {
        let base = system.rows.row(k).transpose();
        if row.upper.is_finite() {
            let mut v = DVector::zeros(total);
            v.rows_mut(0, nv).copy_from(&base);
            v[nv + k] = -1.0;
            a_rows.push(v);
            lower.push(f64::NEG_INFINITY);
            upper.push(row.upper);
        }
        if row.lower.is_finite() {
            let mut v = DVector::zeros(total);
            v.rows_mut(0, nv).copy_from(&base);
            v[nv + k] = 1.0;
            a_rows.push(v);
            lower.push(row.lower);
            upper.push(f64::INFINITY);
        }
        let mut v = DVector::zeros(total);
        v[nv + k] = 1.0;
        a_rows.push(v);
        lower.push(0.0);
        upper.push(f64::INFINITY);
    }
    for (k, &value) in system.fixed_values.iter().enumerate() {
        let mut v = DVector::zeros(total);
        v.rows_mut(0, nv)
            .copy_from(&system.fixed_rows.row(k).transpose());
        a_rows.push(v);
        lower.push(value);
        upper.push(value);
    }
    let a = DMatrix::from_fn(a_rows.len(), total, |i, j| a_rows[i][j]);
    let qp = QuadraticProgram::new(
        quadratic,
        linear,
        a,
        DVector::from_vec(lower),
        DVector::from_vec(upper),
    )?;
    let sol = qp::solve_qp(&qp, config)?;
    let x = sol.x.rows(0, nv).into_owned();
    let slacks: Vec<f64> = sol
        .x
        .rows(nv, r)
        .iter()
        .map(|&s| if s <= ZERO_SLACK { 0.0 } else { s })
        .collect();
    let status = match sol.status {
        QpStatus::Optimal => SolveStatus::OptimalWithSlack,
        QpStatus::Infeasible => SolveStatus::Infeasible,
        QpStatus::MaxIterations => SolveStatus::MaxIterations,
    };
    assemble(
        problem,
        &system,
        lambda,
        &x,
        &slacks,
        penalty,
        status,
        sol.iterations,
        config,
    )
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    problem: &BallparkProblem,
    system: &BaseSystem,
    lambda: Option<f64>,
    x: &DVector<f64>,
    slacks: &[f64],
    penalty: f64,
    mut status: SolveStatus,
    iterations: usize,
    config: &SolverConfig,
) -> Result<RegressionFit> {
    let (weights, latent, lhs_source, base_objective) = match &system.space {
        Space::Latent {
            design,
            row_weights,
            lambda,
            basis,
        } => {
            let st = match basis {
                Some(b) => b * x,
                None => x.clone(),
            };
            let p = design.ncols();
            let n = design.nrows();
            let scaled_w = st.rows(0, p) / lambda.sqrt();
            let r = DVector::from_fn(n, |i, _| {
                let c = row_weights.as_ref().map_or(1.0, |c| c[i]);
                st[p + i] / c.sqrt()
            });
            let latent = design * scaled_w + r;
            let w = qp::weighted_ridge(design, &latent, row_weights.as_ref(), *lambda)?;
            let residual = &latent - design * &w;
            let loss = match row_weights {
                None => residual.norm_squared(),
                Some(c) => residual.component_mul(&residual).dot(c),
            };
            let objective = (loss + lambda * w.norm_squared()) / n as f64;
            (w, latent.clone(), latent, objective)
        }
        Space::Weights { design } => {
            let mut objective = 0.5 * x.norm_squared();
            if system.constant > 0.0 {
                let labeled: Vec<usize> =
                    problem.dataset.labeled_indices().iter().copied().collect();
                let targets = problem.dataset.require_targets("labeled rows")?;
                let k = problem.labeled_cost / labeled.len() as f64;
                for &i in &labeled {
                    let r = targets[i] - design.row(i).dot(&x.transpose());
                    objective += k * r * r;
                }
            }
            (x.clone(), DVector::zeros(0), design * x, objective)
        }
    };

    let lhs = system.compiled.row_values(lhs_source.as_slice())?;
    let mut report = Vec::with_capacity(lhs.len());
    let mut slack_map = BTreeMap::new();
    for ((row, &value), &slack) in system.compiled.rows.iter().zip(&lhs).zip(slacks) {
        report.push(ConstraintReport {
            id: row.id.clone(),
            lhs_value: value,
            lower: row.lower,
            upper: row.upper,
            slack,
            violation: row.violation(value),
        });
        slack_map.insert(row.id.clone(), slack);
    }
    let total_slack: f64 = slacks.iter().sum();
    if status == SolveStatus::OptimalWithSlack
        && total_slack == 0.0
        && report.iter().all(|c| c.violation <= config.abs_tolerance)
    {
        status = SolveStatus::Optimal;
    }

    Ok(RegressionFit {
        method: match system.space {
            Space::Latent { .. } => RegressionMethod::TwoStep,
            Space::Weights { .. } => RegressionMethod::Feasibility,
        },
        solution: Solution {
            weights: weights.iter().copied().collect(),
            latent_labels: latent.iter().copied().collect(),
            slacks: slack_map,
            objective: base_objective + penalty * total_slack,
            status,
        },
        regularizer_used: lambda,
        constraint_report: report,
        feature_map: problem.feature_map,
        input_dim: problem.dataset.n_features(),
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{Bag, BoundConstraint, ConstraintSet, Dataset, DiffConstraint};
    use approx::assert_relative_eq;

    fn line_dataset(xs: &[f64]) -> Dataset {
        let rows: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        Dataset::from_rows(&rows, vec!["x".into()]).unwrap()
    }

    fn bound(bag: &str, lower: f64, upper: f64) -> BoundConstraint {
        BoundConstraint {
            bag: bag.into(),
            lower,
            upper,
        }
    }

    #[test]
    fn row_space_basis_handles_dependent_rows() {
        // Third row is the difference of the first two; fourth repeats the first.
        let b = DMatrix::from_row_slice(
            4,
            6,
            &[
                0.5, 0.5, 0.0, 0.0, 1.0, 0.0, //
                0.0, 0.25, 0.25, 0.5, 0.0, 0.0, //
                0.5, 0.25, -0.25, -0.5, 1.0, 0.0, //
                0.5, 0.5, 0.0, 0.0, 1.0, 0.0,
            ],
        );
        let q = row_space_basis(&b);
        assert_eq!(q.ncols(), 2);
        assert_relative_eq!(q.transpose() * &q, DMatrix::identity(2, 2), epsilon = 1e-14);
        let residual = &b - &b * &q * q.transpose();
        assert!(residual.amax() < 1e-14);
        assert_eq!(row_space_basis(&DMatrix::zeros(0, 3)).shape(), (3, 0));
    }

    #[test]
    fn equality_pinned_mean() {
        let mut cs = ConstraintSet::with_bags(vec![Bag::new("all", [0, 1])]);
        cs.bounds.push(bound("all", 3.0, 3.0));
        let problem = BallparkProblem::new(line_dataset(&[0.0, 1.0]), cs);
        let fit = fit_two_step(&problem, 1.0, &SolverConfig::default()).unwrap();
        assert_eq!(fit.solution.status, SolveStatus::Optimal);
        let mean = fit.solution.latent_labels.iter().sum::<f64>() / 2.0;
        assert_relative_eq!(mean, 3.0, epsilon = 1e-9);
    }

    #[test]
    fn disjoint_bounds_with_difference() {
        let mut cs = ConstraintSet::with_bags(vec![Bag::new("lo", [0, 1]), Bag::new("hi", [2, 3])]);
        cs.bounds.push(bound("lo", 0.1, 0.3));
        cs.bounds.push(bound("hi", 0.5, 0.7));
        cs.diffs.push(DiffConstraint {
            bag_hi: "hi".into(),
            bag_lo: "lo".into(),
            lower: 0.2,
            upper: f64::INFINITY,
        });
        let problem = BallparkProblem::new(line_dataset(&[0.0, 1.0, 2.0, 3.0]), cs);
        for method in [RegressionMethod::TwoStep, RegressionMethod::Feasibility] {
            let fit = fit(&problem, method, 0.5, &SolverConfig::default()).unwrap();
            assert_eq!(fit.solution.status, SolveStatus::Optimal);
            assert!(
                fit.max_violation() <= 1e-6,
                "{method}: {:?}",
                fit.constraint_report
            );
        }
    }

    #[test]
    fn weights_are_ridge_of_latent_labels() {
        let mut cs = ConstraintSet::with_bags(vec![Bag::new("lo", [0, 1]), Bag::new("hi", [2, 3])]);
        cs.bounds.push(bound("lo", 1.0, 2.0));
        cs.bounds.push(bound("hi", 5.0, 6.0));
        let problem = BallparkProblem::new(line_dataset(&[0.0, 1.0, 2.0, 3.0]), cs);
        let fit = fit_two_step(&problem, 0.1, &SolverConfig::default()).unwrap();
        let y = DVector::from_vec(fit.solution.latent_labels.clone());
        let w = qp::ridge_closed_form(&problem.design(), &y, 0.1).unwrap();
        assert_eq!(w.as_slice(), fit.solution.weights.as_slice());
    }

    #[test]
    fn feasibility_bias_only() {
        let ds = Dataset::new(DMatrix::zeros(3, 1), vec!["zero".into()]).unwrap();
        let mut cs = ConstraintSet::with_bags(vec![Bag::new("all", 0..3)]);
        cs.bounds.push(bound("all", 4.0, 4.0));
        let fit = fit_feasibility(&BallparkProblem::new(ds, cs), &SolverConfig::default()).unwrap();
        assert_relative_eq!(fit.solution.weights[1], 4.0, epsilon = 1e-9);
        assert!(fit.solution.latent_labels.is_empty());
    }

    #[test]
    fn feasibility_unconstrained_is_zero() {
        let problem = BallparkProblem::new(line_dataset(&[1.0, 2.0]), ConstraintSet::default());
        let fit = fit_feasibility(&problem, &SolverConfig::default()).unwrap();
        assert!(fit.solution.weights.iter().all(|w| w.abs() < 1e-9));
    }

    #[test]
    fn feasibility_slope_follows_ordering() {
        // Bag means of x: lo = 0.5, hi = 2.5. Ordered bounds force a positive slope.
        let mut cs = ConstraintSet::with_bags(vec![Bag::new("lo", [0, 1]), Bag::new("hi", [2, 3])]);
        cs.bounds.push(bound("lo", 1.0, 1.0));
        cs.bounds.push(bound("hi", 5.0, 5.0));
        let problem = BallparkProblem::new(line_dataset(&[0.0, 1.0, 2.0, 3.0]), cs.clone());
        let fit = fit_feasibility(&problem, &SolverConfig::default()).unwrap();
        // Two equalities in two unknowns: w·0.5 + b = 1, w·2.5 + b = 5.
        assert_relative_eq!(fit.solution.weights[0], 2.0, epsilon = 1e-8);
        assert_relative_eq!(fit.solution.weights[1], 0.0, epsilon = 1e-8);

        cs.bounds[0] = bound("lo", 5.0, 5.0);
        cs.bounds[1] = bound("hi", 1.0, 1.0);
        let fit = fit_feasibility(&problem.with_constraints(cs), &SolverConfig::default()).unwrap();
        assert!(fit.solution.weights[0] < 0.0);
    }

    #[test]
    fn contradictory_bounds_escalate_to_slack() {
        let mut cs = ConstraintSet::with_bags(vec![Bag::new("all", 0..4)]);
        cs.bounds.push(bound("all", 1.0, 1.0));
        cs.bounds.push(bound("all", 2.0, 2.0));
        let problem = BallparkProblem::new(line_dataset(&[0.0, 1.0, 2.0, 3.0]), cs);
        let fit = fit_two_step(&problem, 1.0, &SolverConfig::default()).unwrap();
        assert_eq!(fit.solution.status, SolveStatus::OptimalWithSlack);
        assert!((fit.solution.total_slack() - 1.0).abs() < 1e-6);

        let strict = SolverConfig {
            escalate_to_slack: false,
            ..SolverConfig::default()
        };
        let fit = fit_two_step(&problem, 1.0, &strict).unwrap();
        assert_eq!(fit.solution.status, SolveStatus::Infeasible);
    }

    #[test]
    fn inverted_bounds_survive_on_the_slack_path() {
        let mut cs = ConstraintSet::with_bags(vec![Bag::new("all", 0..3)]);
        cs.bounds.push(bound("all", 0.0, -1.0));
        let problem = BallparkProblem::new(line_dataset(&[0.0, 1.0, 2.0]), cs);
        assert!(fit_two_step(&problem, 1.0, &SolverConfig::default()).is_err());
        let fit = fit_with_slack(
            &problem,
            RegressionMethod::TwoStep,
            Some(1.0),
            1e3,
            &SolverConfig::default(),
        )
        .unwrap();
        assert_eq!(fit.solution.status, SolveStatus::OptimalWithSlack);
        assert!((fit.solution.total_slack() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn predict_examples() {
        let fit = RegressionFit {
            method: RegressionMethod::Feasibility,
            solution: Solution {
                weights: vec![1.0, 0.0],
                latent_labels: vec![],
                slacks: BTreeMap::new(),
                objective: 0.0,
                status: SolveStatus::Optimal,
            },
            regularizer_used: None,
            constraint_report: vec![],
            feature_map: FeatureMap::IdentityWithBias,
            input_dim: 1,
            iterations: 0,
        };
        let p = predict(&fit, &DMatrix::from_element(1, 1, 3.0)).unwrap();
        assert_eq!(p[0], 3.0);
        assert!(predict(&fit, &DMatrix::zeros(1, 2)).is_err());

        let constant = RegressionFit {
            solution: Solution {
                weights: vec![0.0, 7.0],
                ..fit.solution.clone()
            },
            ..fit
        };
        let p = predict(
            &constant,
            &DMatrix::from_column_slice(3, 1, &[1.0, -2.0, 9.0]),
        )
        .unwrap();
        assert!(p.iter().all(|&v| v == 7.0));
    }

    #[test]
    fn noiseless_line_recovered_with_exact_means() {
        // y = 2x + 1 on x = 0..5, three exact bag means.
        let xs = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let bags = vec![
            Bag::new("a", [0, 1]),
            Bag::new("b", [2, 3]),
            Bag::new("c", [4, 5]),
        ];
        let mut cs = ConstraintSet::with_bags(bags.clone());
        for b in &bags {
            let m = crate::problem::bag_mean(&ys, b).unwrap();
            cs.bounds.push(bound(&b.name, m, m));
        }
        let problem = BallparkProblem::new(line_dataset(&xs), cs);
        let grid = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        for method in [RegressionMethod::TwoStep, RegressionMethod::Feasibility] {
            let fit = fit(&problem, method, 1e-6, &SolverConfig::default()).unwrap();
            let p = predict(&fit, &grid).unwrap();
            for (got, want) in p.iter().zip([1.0, 3.0, 5.0]) {
                assert!((got - want).abs() < 1e-3, "{method}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn labeled_rows_are_pinned() {
        let ds = line_dataset(&[0.0, 1.0, 2.0, 3.0])
            .with_targets(DVector::from_vec(vec![1.0, 3.0, 5.0, 7.0]))
            .unwrap()
            .with_labeled([0])
            .unwrap();
        let mut cs = ConstraintSet::with_bags(vec![Bag::new("all", 0..4)]);
        cs.bounds.push(bound("all", 4.0, 4.0));
        let problem = BallparkProblem::new(ds, cs).with_costs(1.0, 1.0);
        let fit = fit_two_step(&problem, 0.1, &SolverConfig::default()).unwrap();
        assert_eq!(fit.solution.status, SolveStatus::Optimal);
        assert_relative_eq!(fit.solution.latent_labels[0], 1.0, epsilon = 1e-7);
        let fit = fit_feasibility(&problem, &SolverConfig::default()).unwrap();
        assert_eq!(fit.solution.status, SolveStatus::Optimal);
    }
}
