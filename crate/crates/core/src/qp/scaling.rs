//! Modified Ruiz equilibration of the QP data.

use nalgebra::{DMatrix, DVector};

use super::QuadraticProgram;

const PASSES: usize = 15;
const MIN_SCALING: f64 = 1e-4;
const MAX_SCALING: f64 = 1e4;

/// Scaled problem `P̄ = c·DPD`, `q̄ = c·Dq`, `Ā = EAD`, `l̄ = El`, `ū = Eu`.
pub(super) struct ScaledProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
    pub d: DVector<f64>,
    pub e: DVector<f64>,
    pub c: f64,
}

fn clamp_norm(v: f64) -> f64 {
    if v < MIN_SCALING {
        1.0
    } else {
        v.min(MAX_SCALING)
    }
}

impl ScaledProblem {
    pub fn new(qp: &QuadraticProgram) -> Self {
        let n = qp.n_vars();
        let m = qp.n_rows();
        let mut p = qp.quadratic.clone();
        let mut q = qp.linear.clone();
        let mut a = qp.ineq_matrix.clone();
        if m == 0 {
            a = DMatrix::zeros(0, n);
        }
        let mut d = DVector::from_element(n, 1.0);
        let mut e = DVector::from_element(m, 1.0);
        let mut c = 1.0;

        for _ in 0..PASSES {
            let mut delta_d = DVector::zeros(n);
            for j in 0..n {
                let mut norm = p.column(j).amax();
                if m > 0 {
                    norm = norm.max(a.column(j).amax());
                }
                delta_d[j] = 1.0 / clamp_norm(norm).sqrt();
            }
            let mut delta_e = DVector::zeros(m);
            for i in 0..m {
                delta_e[i] = 1.0 / clamp_norm(a.row(i).amax()).sqrt();
            }
            for j in 0..n {
                for i in 0..n {
                    p[(i, j)] *= delta_d[i] * delta_d[j];
                }
                q[j] *= delta_d[j];
                for i in 0..m {
                    a[(i, j)] *= delta_e[i] * delta_d[j];
                }
            }
            d.component_mul_assign(&delta_d);
            e.component_mul_assign(&delta_e);

            let mean_col = if n > 0 {
                (0..n).map(|j| p.column(j).amax()).sum::<f64>() / n as f64
            } else {
                0.0
            };
            let gamma = 1.0 / clamp_norm(mean_col.max(q.amax()));
            p *= gamma;
            q *= gamma;
            c *= gamma;
        }

        let l = qp.ineq_lower.component_mul(&e);
        let u = qp.ineq_upper.component_mul(&e);
        Self {
            p,
            q,
            a,
            l,
            u,
            d,
            e,
            c,
        }
    }

    pub fn unscale_x(&self, x: &DVector<f64>) -> DVector<f64> {
        x.component_mul(&self.d)
    }

    pub fn unscale_y(&self, y: &DVector<f64>) -> DVector<f64> {
        y.component_mul(&self.e) / self.c
    }

    pub fn unscale_z(&self, z: &DVector<f64>) -> DVector<f64> {
        z.component_div(&self.e)
    }
}
