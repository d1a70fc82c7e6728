//! Operator-splitting iteration (ADMM over `x` and the row values `z = Ax`).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::polish::{polish, PolishOutcome};
use super::scaling::ScaledProblem;
use super::{QpSolution, QpStatus, QuadraticProgram, SolverConfig};
use crate::error::{Error, Result};

const SIGMA: f64 = 1e-6;
const ALPHA: f64 = 1.6;
const RHO_INIT: f64 = 0.1;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_FACTOR: f64 = 1e3;
const EQ_TOL: f64 = 1e-8;
const CHECK_EVERY: usize = 5;
const ADAPT_EVERY: usize = 25;
const ADAPT_RATIO: f64 = 5.0;
const INFEASIBILITY_TOL: f64 = 1e-6;
/// Polishing is tried once residuals are within this factor of the target.
const POLISH_SLACK: f64 = 1e4;
const POLISH_EVERY: usize = 50;

struct Residuals {
    primal: f64,
    dual: f64,
    primal_target: f64,
    dual_target: f64,
    /// Normalized residual ratio used for step-size adaptation.
    rho_ratio: f64,
}

struct Iterate {
    x: DVector<f64>,
    z: DVector<f64>,
    y: DVector<f64>,
}

fn rho_vector(sp: &ScaledProblem, rho: f64) -> DVector<f64> {
    DVector::from_iterator(
        sp.l.len(),
        sp.l.iter().zip(sp.u.iter()).map(|(&l, &u)| {
            if !l.is_finite() && !u.is_finite() {
                RHO_MIN
            } else if (u - l).abs() <= EQ_TOL {
                RHO_EQ_FACTOR * rho
            } else {
                rho
            }
        }),
    )
}

fn factor(sp: &ScaledProblem, rho: &DVector<f64>) -> Result<Cholesky<f64, Dyn>> {
    let n = sp.q.len();
    let mut k = sp.p.clone();
    if sp.a.nrows() > 0 {
        let weighted = DMatrix::from_fn(sp.a.nrows(), n, |i, j| rho[i] * sp.a[(i, j)]);
        k += sp.a.transpose() * weighted;
    }
    for i in 0..n {
        k[(i, i)] += SIGMA;
    }
    Cholesky::new(k).ok_or_else(|| {
        Error::InvalidArgument("quadratic term is not positive semidefinite".to_string())
    })
}

fn project(v: &mut DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) {
    for i in 0..v.len() {
        v[i] = v[i].max(l[i]).min(u[i]);
    }
}

fn residuals(sp: &ScaledProblem, it: &Iterate, config: &SolverConfig) -> Residuals {
    let ax = &sp.a * &it.x;
    let px = &sp.p * &it.x;
    let aty = sp.a.transpose() * &it.y;

    // Unscaled quantities.
    let e_inv = sp.e.map(|v| 1.0 / v);
    let d_inv = sp.d.map(|v| 1.0 / v);
    let prim_vec = (&ax - &it.z).component_mul(&e_inv);
    let ax_u = ax.component_mul(&e_inv);
    let z_u = it.z.component_mul(&e_inv);
    let dual_vec = (&px + &sp.q + &aty).component_mul(&d_inv) / sp.c;
    let px_u = px.component_mul(&d_inv) / sp.c;
    let aty_u = aty.component_mul(&d_inv) / sp.c;
    let q_u = sp.q.component_mul(&d_inv) / sp.c;

    let primal = prim_vec.amax();
    let dual = dual_vec.amax();
    let primal_scale = ax_u.amax().max(z_u.amax());
    let dual_scale = px_u.amax().max(aty_u.amax()).max(q_u.amax());

    let prim_norm = (&ax - &it.z).amax() / ax.amax().max(it.z.amax()).max(1e-30);
    let dual_norm =
        (&px + &sp.q + &aty).amax() / px.amax().max(aty.amax()).max(sp.q.amax()).max(1e-30);
    let rho_ratio = (prim_norm / dual_norm.max(1e-30)).sqrt();

    Residuals {
        primal,
        dual,
        // Row violations are held to the absolute tolerance alone.
        primal_target: config.abs_tolerance,
        dual_target: config.abs_tolerance + config.rel_tolerance * dual_scale,
        rho_ratio: if primal_scale.is_finite() {
            rho_ratio
        } else {
            1.0
        },
    }
}

/// Farkas-type certificate from the change in the dual iterate.
fn infeasibility_certificate(sp: &ScaledProblem, delta_y: &DVector<f64>) -> Option<String> {
    if delta_y.is_empty() {
        return None;
    }
    let v = delta_y.component_mul(&sp.e);
    let norm = v.amax();
    if norm.is_nan() || norm <= 1e-12 {
        return None;
    }
    let d_inv = sp.d.map(|x| 1.0 / x);
    let at_v = (sp.a.transpose() * delta_y).component_mul(&d_inv);
    if at_v.amax() > INFEASIBILITY_TOL * norm {
        return None;
    }
    let l = sp.unscale_z(&sp.l);
    let u = sp.unscale_z(&sp.u);
    let mut support = 0.0;
    for i in 0..v.len() {
        let vi = v[i];
        if vi > 0.0 {
            if u[i].is_finite() {
                support += u[i] * vi;
            } else if vi > INFEASIBILITY_TOL * norm {
                return None;
            }
        } else if vi < 0.0 {
            if l[i].is_finite() {
                support += l[i] * vi;
            } else if -vi > INFEASIBILITY_TOL * norm {
                return None;
            }
        }
    }
    if support < -INFEASIBILITY_TOL * norm {
        Some(format!(
            "row combination with |Aᵀv| <= {:.1e}·|v| has support {:.3e} < 0",
            INFEASIBILITY_TOL,
            support / norm
        ))
    } else {
        None
    }
}

fn finish(
    qp: &QuadraticProgram,
    sp: &ScaledProblem,
    it: &Iterate,
    status: QpStatus,
    iterations: usize,
    res: Option<&Residuals>,
    certificate: Option<String>,
) -> QpSolution {
    let x = sp.unscale_x(&it.x);
    let duals = sp.unscale_y(&it.y);
    let objective = qp.objective(&x);
    QpSolution {
        objective,
        primal_residual: res.map_or(f64::NAN, |r| r.primal),
        dual_residual: res.map_or(f64::NAN, |r| r.dual),
        x,
        duals,
        status,
        iterations,
        polished: false,
        certificate,
    }
}

fn polished_solution(
    qp: &QuadraticProgram,
    outcome: PolishOutcome,
    iterations: usize,
) -> QpSolution {
    QpSolution {
        objective: qp.objective(&outcome.x),
        x: outcome.x,
        duals: outcome.y,
        status: QpStatus::Optimal,
        iterations,
        primal_residual: outcome.primal_residual,
        dual_residual: outcome.dual_residual,
        polished: true,
        certificate: None,
    }
}

pub(super) fn solve(qp: &QuadraticProgram, config: &SolverConfig) -> Result<QpSolution> {
    let sp = ScaledProblem::new(qp);
    let n = qp.n_vars();
    let m = qp.n_rows();

    let mut rho = RHO_INIT;
    let mut rho_vec = rho_vector(&sp, rho);
    let mut chol = factor(&sp, &rho_vec)?;

    let mut it = Iterate {
        x: DVector::zeros(n),
        z: DVector::zeros(m),
        y: DVector::zeros(m),
    };
    project(&mut it.z, &sp.l, &sp.u);

    let mut last_polish: Option<usize> = None;
    let mut last_res: Option<Residuals> = None;

    for k in 1..=config.max_iterations {
        let rhs = &it.x * SIGMA - &sp.q + sp.a.transpose() * (rho_vec.component_mul(&it.z) - &it.y);
        let x_tilde = chol.solve(&rhs);
        let z_tilde = &sp.a * &x_tilde;
        let x_next = &x_tilde * ALPHA + &it.x * (1.0 - ALPHA);
        let z_relaxed = &z_tilde * ALPHA + &it.z * (1.0 - ALPHA);
        let mut z_next = &z_relaxed + it.y.component_div(&rho_vec);
        project(&mut z_next, &sp.l, &sp.u);
        let y_next = &it.y + rho_vec.component_mul(&(&z_relaxed - &z_next));
        let delta_y = &y_next - &it.y;
        it = Iterate {
            x: x_next,
            z: z_next,
            y: y_next,
        };

        if k % CHECK_EVERY != 0 && k != config.max_iterations {
            continue;
        }
        let res = residuals(&sp, &it, config);
        let converged = res.primal <= res.primal_target && res.dual <= res.dual_target;
        let near = res.primal <= POLISH_SLACK * res.primal_target
            && res.dual <= POLISH_SLACK * res.dual_target;

        if converged || (near && last_polish.is_none_or(|p| k - p >= POLISH_EVERY)) {
            last_polish = Some(k);
            if let Some(outcome) = polish(qp, &sp, &it.x, &it.z, &it.y, config) {
                return Ok(polished_solution(qp, outcome, k));
            }
        }
        if converged {
            return Ok(finish(qp, &sp, &it, QpStatus::Optimal, k, Some(&res), None));
        }
        if res.primal > res.primal_target {
            if let Some(cert) = infeasibility_certificate(&sp, &delta_y) {
                return Ok(finish(
                    qp,
                    &sp,
                    &it,
                    QpStatus::Infeasible,
                    k,
                    Some(&res),
                    Some(cert),
                ));
            }
        }
        if k % ADAPT_EVERY == 0 && m > 0 {
            let proposal = (rho * res.rho_ratio).clamp(RHO_MIN, RHO_MAX);
            if proposal > rho * ADAPT_RATIO || proposal < rho / ADAPT_RATIO {
                rho = proposal;
                rho_vec = rho_vector(&sp, rho);
                chol = factor(&sp, &rho_vec)?;
            }
        }
        last_res = Some(res);
    }

    if let Some(outcome) = polish(qp, &sp, &it.x, &it.z, &it.y, config) {
        return Ok(polished_solution(qp, outcome, config.max_iterations));
    }
    Ok(finish(
        qp,
        &sp,
        &it,
        QpStatus::MaxIterations,
        config.max_iterations,
        last_res.as_ref(),
        None,
    ))
}
