//! Active-set refinement of an approximate ADMM solution.
//!
//! The active set guessed from the iterate is turned into an equality
//! constrained QP and solved through its KKT system. Rows whose multiplier
//! has the wrong sign are released and violated rows are added, until the
//! KKT conditions hold or the round budget runs out.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::scaling::ScaledProblem;
use super::{QuadraticProgram, SolverConfig};

const DELTA: f64 = 1e-7;
const EQ_TOL: f64 = 1e-8;
const MAX_ROUNDS: usize = 30;
const REFINE_STEPS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Lower,
    Upper,
    Equality,
}

pub(super) struct PolishOutcome {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

struct ReducedKkt<'a> {
    sp: &'a ScaledProblem,
    p_reg: &'a Cholesky<f64, Dyn>,
    rows: Vec<usize>,
    a_act: DMatrix<f64>,
    x_basis: DMatrix<f64>,
    schur: Option<Cholesky<f64, Dyn>>,
}

impl<'a> ReducedKkt<'a> {
    fn new(sp: &'a ScaledProblem, p_reg: &'a Cholesky<f64, Dyn>, rows: Vec<usize>) -> Option<Self> {
        let n = sp.q.len();
        let a_act = DMatrix::from_fn(rows.len(), n, |k, j| sp.a[(rows[k], j)]);
        let (x_basis, schur) = if rows.is_empty() {
            (DMatrix::zeros(n, 0), None)
        } else {
            let x_basis = p_reg.solve(&a_act.transpose());
            let mut s = &a_act * &x_basis;
            s = (&s + s.transpose()) * 0.5;
            for i in 0..rows.len() {
                s[(i, i)] += DELTA;
            }
            (x_basis, Some(Cholesky::new(s)?))
        };
        Some(Self {
            sp,
            p_reg,
            rows,
            a_act,
            x_basis,
            schur,
        })
    }

    /// Solves the δ-regularized KKT system for right-hand side (r1, r2).
    fn solve_reg(&self, r1: &DVector<f64>, r2: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let t = self.p_reg.solve(r1);
        match &self.schur {
            None => (t, DVector::zeros(0)),
            Some(s) => {
                let dy = s.solve(&(&self.a_act * &t - r2));
                let dx = t - &self.x_basis * &dy;
                (dx, dy)
            }
        }
    }

    /// Solves the unregularized KKT system by iterative refinement.
    fn solve(&self, b: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let neg_q = -&self.sp.q;
        let (mut x, mut y) = self.solve_reg(&neg_q, b);
        let mut best = (x.clone(), y.clone(), f64::INFINITY);
        for _ in 0..REFINE_STEPS {
            let r1 = &neg_q - &self.sp.p * &x - self.a_act.transpose() * &y;
            let r2 = b - &self.a_act * &x;
            let res = r1.amax().max(r2.amax());
            if res >= best.2 {
                break;
            }
            best = (x.clone(), y.clone(), res);
            if res < 1e-15 {
                break;
            }
            // Slow when P is singular on some coordinates (slack variables).
            let (dx, dy) = self.solve_reg(&r1, &r2);
            x += dx;
            y += dy;
        }
        (best.0, best.1)
    }
}

fn initial_sides(sp: &ScaledProblem, z: &DVector<f64>, y: &DVector<f64>) -> Vec<Option<Side>> {
    (0..sp.l.len())
        .map(|i| {
            let (l, u) = (sp.l[i], sp.u[i]);
            if l.is_finite() && u.is_finite() && (u - l).abs() <= EQ_TOL {
                Some(Side::Equality)
            } else if l.is_finite() && z[i] - l < -y[i] {
                Some(Side::Lower)
            } else if u.is_finite() && u - z[i] < y[i] {
                Some(Side::Upper)
            } else {
                None
            }
        })
        .collect()
}

pub(super) fn polish(
    qp: &QuadraticProgram,
    sp: &ScaledProblem,
    x: &DVector<f64>,
    z: &DVector<f64>,
    y: &DVector<f64>,
    config: &SolverConfig,
) -> Option<PolishOutcome> {
    let n = x.len();
    let m = z.len();
    let mut p_reg = sp.p.clone();
    for i in 0..n {
        p_reg[(i, i)] += DELTA;
    }
    let p_reg = Cholesky::new(p_reg)?;
    let mut sides = initial_sides(sp, z, y);

    for _ in 0..MAX_ROUNDS {
        let rows: Vec<usize> = (0..m).filter(|&i| sides[i].is_some()).collect();
        let b = DVector::from_iterator(
            rows.len(),
            rows.iter().map(|&i| match sides[i] {
                Some(Side::Upper) => sp.u[i],
                _ => sp.l[i],
            }),
        );
        let kkt = ReducedKkt::new(sp, &p_reg, rows)?;
        let (xs, ys) = kkt.solve(&b);
        if !xs.iter().chain(ys.iter()).all(|v| v.is_finite()) {
            return None;
        }

        let mut changed = false;
        let y_tol = 1e-9 * ys.amax().max(1.0);
        for (k, &i) in kkt.rows.iter().enumerate() {
            let wrong = match sides[i] {
                Some(Side::Lower) => ys[k] > y_tol,
                Some(Side::Upper) => ys[k] < -y_tol,
                _ => false,
            };
            if wrong {
                sides[i] = None;
                changed = true;
            }
        }
        let ax = &sp.a * &xs;
        for i in 0..m {
            if sides[i].is_some() {
                continue;
            }
            let viol_tol = 0.1 * config.abs_tolerance * sp.e[i];
            if sp.l[i].is_finite() && ax[i] < sp.l[i] - viol_tol {
                sides[i] = Some(Side::Lower);
                changed = true;
            } else if sp.u[i].is_finite() && ax[i] > sp.u[i] + viol_tol {
                sides[i] = Some(Side::Upper);
                changed = true;
            }
        }
        if changed {
            continue;
        }

        let mut y_full = DVector::zeros(m);
        for (k, &i) in kkt.rows.iter().enumerate() {
            y_full[i] = ys[k];
        }
        let x_u = sp.unscale_x(&xs);
        let y_u = sp.unscale_y(&y_full);
        let primal = qp.max_violation(&x_u);
        let qx = &qp.quadratic * &x_u;
        let aty = if m > 0 {
            qp.ineq_matrix.transpose() * &y_u
        } else {
            DVector::zeros(n)
        };
        let dual = (&qx + &qp.linear + &aty).amax();
        let dual_scale = qx.amax().max(aty.amax()).max(qp.linear.amax());
        let dual_target = config.abs_tolerance + config.rel_tolerance * dual_scale;
        if primal <= config.abs_tolerance && dual <= dual_target {
            return Some(PolishOutcome {
                x: x_u,
                y: y_u,
                primal_residual: primal,
                dual_residual: dual,
            });
        }
        return None;
    }
    None
}
