//! Dense numerical kernels: ridge regression, the ridge hat matrix and a
//! convex QP solver for `min ½xᵀQx + cᵀx  s.t.  l ≤ Ax ≤ u`.

mod admm;
mod polish;
mod scaling;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest condition number accepted for an unregularized ridge solve.
const MAX_RIDGE_CONDITION: f64 = 1e12;

/// `min ½xᵀQx + cᵀx` subject to `ineq_lower ≤ A x ≤ ineq_upper`.
///
/// Infinite entries in the bound vectors mean "no bound on that side".
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram {
    pub quadratic: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_lower: DVector<f64>,
    pub ineq_upper: DVector<f64>,
}

impl QuadraticProgram {
    pub fn new(
        quadratic: DMatrix<f64>,
        linear: DVector<f64>,
        ineq_matrix: DMatrix<f64>,
        ineq_lower: DVector<f64>,
        ineq_upper: DVector<f64>,
    ) -> Result<Self> {
        let qp = Self {
            quadratic,
            linear,
            ineq_matrix,
            ineq_lower,
            ineq_upper,
        };
        qp.check()?;
        Ok(qp)
    }

    pub fn n_vars(&self) -> usize {
        self.linear.len()
    }

    pub fn n_rows(&self) -> usize {
        self.ineq_lower.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.quadratic * x)) + self.linear.dot(x)
    }

    /// Largest amount by which `x` violates a constraint row.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let ax = &self.ineq_matrix * x;
        ax.iter()
            .zip(self.ineq_lower.iter().zip(self.ineq_upper.iter()))
            .map(|(&v, (&l, &u))| (v - u).max(l - v).max(0.0))
            .fold(0.0, f64::max)
    }

    fn check(&self) -> Result<()> {
        let n = self.linear.len();
        let (qr, qc) = self.quadratic.shape();
        if qr != n || qc != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: if qr != n { qr } else { qc },
            });
        }
        let m = self.ineq_lower.len();
        if self.ineq_upper.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                found: self.ineq_upper.len(),
            });
        }
        if self.ineq_matrix.nrows() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                found: self.ineq_matrix.nrows(),
            });
        }
        if m > 0 && self.ineq_matrix.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: self.ineq_matrix.ncols(),
            });
        }
        let scale = self.quadratic.amax().max(1.0);
        for i in 0..n {
            for j in 0..i {
                if (self.quadratic[(i, j)] - self.quadratic[(j, i)]).abs() > 1e-10 * scale {
                    return Err(Error::InvalidArgument(format!(
                        "quadratic term not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let finite = self.quadratic.iter().all(|v| v.is_finite())
            && self.linear.iter().all(|v| v.is_finite())
            && self.ineq_matrix.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidArgument(
                "non-finite entry in QP data".to_string(),
            ));
        }
        for (i, (&l, &u)) in self
            .ineq_lower
            .iter()
            .zip(self.ineq_upper.iter())
            .enumerate()
        {
            if l.is_nan() || u.is_nan() || l == f64::INFINITY || u == f64::NEG_INFINITY {
                return Err(Error::InvalidArgument(format!(
                    "row {i} has unusable bounds [{l}, {u}]"
                )));
            }
            if l > u {
                return Err(Error::InvalidArgument(format!(
                    "row {i} has lower {l} > upper {u}"
                )));
            }
        }
        Ok(())
    }
}

/// Tolerances and limits shared by all solvers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub abs_tolerance: f64,
    pub rel_tolerance: f64,
    pub max_iterations: usize,
    /// Denominator-mean floor for ratio constraints, in label units.
    pub positivity_floor_default: f64,
    /// Retry infeasible fits with slack variables instead of reporting infeasibility.
    pub escalate_to_slack: bool,
    /// Linear cost per unit of slack, in label units.
    pub slack_penalty: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            abs_tolerance: 1e-6,
            rel_tolerance: 1e-6,
            max_iterations: 20_000,
            positivity_floor_default: 1e-3,
            escalate_to_slack: true,
            slack_penalty: 1e3,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.abs_tolerance > 0.0
            && self.rel_tolerance > 0.0
            && self.max_iterations > 0
            && self.positivity_floor_default > 0.0
            && self.slack_penalty > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "solver settings must be positive: {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Row multipliers: negative at active lower bounds, positive at active upper bounds.
    pub duals: DVector<f64>,
    pub status: QpStatus,
    pub objective: f64,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Set when the solution came from the active-set refinement step.
    pub polished: bool,
    /// Human-readable infeasibility certificate.
    pub certificate: Option<String>,
}

/// Solves a convex QP by operator splitting with active-set polishing.
///
/// `Err` only for malformed input; infeasibility and the iteration cap are
/// reported through [`QpSolution::status`].
pub fn solve_qp(qp: &QuadraticProgram, config: &SolverConfig) -> Result<QpSolution> {
    qp.check()?;
    config.validate()?;
    admm::solve(qp, config)
}

/// `(λI + ΦᵀΦ)⁻¹ Φᵀ y` via a Cholesky factorization.
pub fn ridge_closed_form(
    design: &DMatrix<f64>,
    targets: &DVector<f64>,
    regularizer: f64,
) -> Result<DVector<f64>> {
    weighted_ridge(design, targets, None, regularizer)
}

/// Ridge with per-row weights: `(λI + ΦᵀCΦ)⁻¹ ΦᵀC y`.
pub fn weighted_ridge(
    design: &DMatrix<f64>,
    targets: &DVector<f64>,
    row_weights: Option<&DVector<f64>>,
    regularizer: f64,
) -> Result<DVector<f64>> {
    if design.nrows() != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: design.nrows(),
            found: targets.len(),
        });
    }
    let weighted_design = match row_weights {
        Some(c) => {
            if c.len() != design.nrows() {
                return Err(Error::DimensionMismatch {
                    expected: design.nrows(),
                    found: c.len(),
                });
            }
            DMatrix::from_fn(design.nrows(), design.ncols(), |i, j| c[i] * design[(i, j)])
        }
        None => design.clone(),
    };
    let chol = ridge_factor(design, &weighted_design, regularizer)?;
    let rhs = weighted_design.transpose() * targets;
    Ok(chol.solve(&rhs))
}

/// Factor of `λI + Φᵀ(CΦ)`.
fn ridge_factor(
    design: &DMatrix<f64>,
    weighted_design: &DMatrix<f64>,
    regularizer: f64,
) -> Result<Cholesky<f64, Dyn>> {
    if !(regularizer >= 0.0 && regularizer.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "regularizer must be a finite non-negative number, got {regularizer}"
        )));
    }
    let p = design.ncols();
    let mut gram = design.transpose() * weighted_design;
    gram = (&gram + gram.transpose()) * 0.5;
    for i in 0..p {
        gram[(i, i)] += regularizer;
    }
    let chol = Cholesky::new(gram).ok_or_else(|| {
        Error::SingularMatrix(format!(
            "ridge system not positive definite at lambda={regularizer}"
        ))
    })?;
    if regularizer == 0.0 {
        let diag = chol.l_dirty().diagonal();
        let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| {
            (lo.min(v.abs()), hi.max(v.abs()))
        });
        // cond(G) is at least (max L_ii / min L_ii)^2.
        if lo == 0.0 || (hi / lo).powi(2) > MAX_RIDGE_CONDITION {
            return Err(Error::SingularMatrix(
                "unregularized ridge system is ill-conditioned".to_string(),
            ));
        }
    }
    Ok(chol)
}

/// `H = Φ(λI + ΦᵀΦ)⁻¹Φᵀ`, the ridge hat matrix.
pub fn hat_matrix(design: &DMatrix<f64>, regularizer: f64) -> Result<DMatrix<f64>> {
    if regularizer.is_nan() || regularizer <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "hat matrix needs a positive regularizer, got {regularizer}"
        )));
    }
    let chol = ridge_factor(design, design, regularizer)?;
    let solved = chol.solve(&design.transpose());
    let h = design * solved;
    Ok((&h + h.transpose()) * 0.5)
}
