//! Test-only oracles and generators, independent of the solver paths they check.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use ballpark::qp::QuadraticProgram;

/// Exact optimum of a strictly convex QP by enumerating active sets.
///
/// Every row is tried inactive, at its lower bound and at its upper bound.
/// Each equality-constrained subproblem is solved through its KKT system and
/// kept if primal feasible; the smallest objective over all kept candidates
/// is the global optimum.
pub fn brute_force_qp(qp: &QuadraticProgram) -> Option<(DVector<f64>, f64)> {
    let n = qp.linear.len();
    let m = qp.ineq_lower.len();
    let mut best: Option<(DVector<f64>, f64)> = None;
    let combos = 3usize.pow(m as u32);
    for code in 0..combos {
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        let mut c = code;
        let mut skip = false;
        for i in 0..m {
            match c % 3 {
                0 => {}
                1 => {
                    if !qp.ineq_lower[i].is_finite() {
                        skip = true;
                    }
                    rows.push(i);
                    rhs.push(qp.ineq_lower[i]);
                }
                _ => {
                    if !qp.ineq_upper[i].is_finite() || qp.ineq_upper[i] == qp.ineq_lower[i] {
                        skip = true;
                    }
                    rows.push(i);
                    rhs.push(qp.ineq_upper[i]);
                }
            }
            c /= 3;
        }
        if skip {
            continue;
        }
        let k = rows.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&qp.quadratic);
        for (r, &i) in rows.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = qp.ineq_matrix[(i, j)];
                kkt[(j, n + r)] = qp.ineq_matrix[(i, j)];
            }
        }
        let mut b = DVector::zeros(n + k);
        for j in 0..n {
            b[j] = -qp.linear[j];
        }
        for r in 0..k {
            b[n + r] = rhs[r];
        }
        let Some(sol) = kkt.lu().solve(&b) else {
            continue;
        };
        let x = sol.rows(0, n).into_owned();
        if !x.iter().all(|v| v.is_finite()) || qp.max_violation(&x) > 1e-9 {
            continue;
        }
        let f = qp.objective(&x);
        if best.as_ref().is_none_or(|(_, bf)| f < *bf) {
            best = Some((x, f));
        }
    }
    best
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Random strictly convex QP with a feasible point by construction.
pub fn random_qp(rng: &mut impl Rng, max_n: usize, max_m: usize) -> QuadraticProgram {
    let n = rng.random_range(1..=max_n);
    let m = rng.random_range(0..=max_m);
    let b = DMatrix::from_fn(n, n, |_, _| normal(rng));
    let q = &b * b.transpose() + DMatrix::identity(n, n) * 0.1;
    let c = DVector::from_fn(n, |_, _| 2.0 * normal(rng));
    let a = DMatrix::from_fn(m, n, |_, _| normal(rng));
    let x0 = DVector::from_fn(n, |_, _| normal(rng));
    let ax0 = &a * &x0;
    let mut lower = DVector::zeros(m);
    let mut upper = DVector::zeros(m);
    for i in 0..m {
        let r1: f64 = rng.random_range(0.0..1.0);
        let r2: f64 = rng.random_range(0.0..1.0);
        match rng.random_range(0..4) {
            0 => {
                lower[i] = ax0[i] - r1;
                upper[i] = ax0[i] + r2;
            }
            1 => {
                lower[i] = ax0[i] - r1;
                upper[i] = f64::INFINITY;
            }
            2 => {
                lower[i] = f64::NEG_INFINITY;
                upper[i] = ax0[i] + r2;
            }
            _ => {
                lower[i] = ax0[i];
                upper[i] = ax0[i];
            }
        }
    }
    QuadraticProgram::new(q, c, a, lower, upper).expect("well-formed random QP")
}
