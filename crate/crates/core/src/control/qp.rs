//! Strictly convex dense QP by the Goldfarb-Idnani dual active set method:
//!
//!   min ½ xᵀGx + aᵀx  subject to  C x ≤ b (row-wise).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers, one per constraint row (zero when inactive).
    pub multipliers: DVector<f64>,
    pub active: Vec<usize>,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QpOutcome {
    Optimal(QpSolution),
    Infeasible,
}

/// Givens rotation zeroing `b` against `a`: returns (c, s, r).
fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    let r = a.hypot(b);
    if r == 0.0 {
        (1.0, 0.0, 0.0)
    } else {
        (a / r, b / r, r)
    }
}

fn rotate_columns(j: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..j.nrows() {
        let (x, y) = (j[(i, p)], j[(i, q)]);
        j[(i, p)] = c * x + s * y;
        j[(i, q)] = -s * x + c * y;
    }
}

/// Solves the QP. `tolerance` is the acceptable absolute violation of each
/// row (rows should be scaled to comparable magnitude).
pub fn solve_qp(g: &DMatrix<f64>, a: &DVector<f64>, c: &DMatrix<f64>, b: &DVector<f64>, tolerance: f64) -> Result<QpOutcome> {
    let n = g.nrows();
    let m = c.nrows();
    if g.ncols() != n || a.len() != n || c.ncols() != n || b.len() != m {
        return Err(Error::Optimizer("QP dimensions are inconsistent".into()));
    }
    let chol = g
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Optimizer("QP Hessian is not positive definite".into()))?;
    // J = L⁻ᵀ, so that JᵀGJ = I.
    let l = chol.l();
    let mut jm = l
        .transpose()
        .solve_upper_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::Optimizer("singular Cholesky factor".into()))?;
    let mut x = -chol.solve(a);
    let mut r = DMatrix::<f64>::zeros(n, n);
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut iterations = 0;
    let max_iterations = 50 * (n + m) + 100;

    let row = |i: usize| c.row(i).transpose();
    let slack = |x: &DVector<f64>, i: usize| b[i] - c.row(i).dot(&x.transpose());

    loop {
        // Most violated row.
        let mut p = None;
        let mut worst = -tolerance;
        for i in 0..m {
            if active.contains(&i) {
                continue;
            }
            let s = slack(&x, i);
            if s < worst {
                worst = s;
                p = Some(i);
            }
        }
        let Some(p) = p else {
            let mut multipliers = DVector::zeros(m);
            for (k, &i) in active.iter().enumerate() {
                multipliers[i] = u[k];
            }
            let objective = 0.5 * x.dot(&(g * &x)) + a.dot(&x);
            return Ok(QpOutcome::Optimal(QpSolution {
                x,
                multipliers,
                active,
                objective,
                iterations,
            }));
        };
        let np = row(p);
        let mut up = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iterations {
                return Err(Error::Optimizer("QP active set iteration limit".into()));
            }
            let q = active.len();
            // Constraint in the form -np·x ≥ -b; dual direction.
            let d = jm.transpose() * (-&np);
            let z = jm.columns(q, n - q) * d.rows(q, n - q);
            let rr = if q > 0 {
                r.view((0, 0), (q, q))
                    .solve_upper_triangular(&d.rows(0, q).into_owned())
                    .ok_or_else(|| Error::Optimizer("singular active set factor".into()))?
            } else {
                DVector::zeros(0)
            };
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for k in 0..q {
                if rr[k] > 0.0 {
                    let t = u[k] / rr[k];
                    if t < t1 {
                        t1 = t;
                        drop = Some(k);
                    }
                }
            }
            let znp = z.dot(&(-&np));
            let sp = slack(&x, p);
            let t2 = if z.amax() <= 1e-14 * (1.0 + d.amax()) || znp <= 0.0 {
                f64::INFINITY
            } else {
                -sp / znp
            };
            if t1.is_infinite() && t2.is_infinite() {
                return Ok(QpOutcome::Infeasible);
            }
            if t2.is_infinite() {
                for k in 0..q {
                    u[k] -= t1 * rr[k];
                }
                up += t1;
                remove_active(&mut jm, &mut r, &mut active, &mut u, drop.expect("finite partial step"));
                continue;
            }
            let t = t1.min(t2);
            x += &z * t;
            for k in 0..q {
                u[k] -= t * rr[k];
            }
            up += t;
            if t2 <= t1 {
                // Full step: add p.
                let mut dd = d.clone();
                for k in (q + 1..n).rev() {
                    let (cs, sn, rv) = givens(dd[k - 1], dd[k]);
                    dd[k - 1] = rv;
                    dd[k] = 0.0;
                    rotate_columns(&mut jm, k - 1, k, cs, sn);
                }
                for k in 0..=q {
                    r[(k, q)] = dd[k];
                }
                active.push(p);
                u.push(up);
                break;
            }
            remove_active(&mut jm, &mut r, &mut active, &mut u, drop.expect("finite partial step"));
        }
    }
}

fn remove_active(jm: &mut DMatrix<f64>, r: &mut DMatrix<f64>, active: &mut Vec<usize>, u: &mut Vec<f64>, l: usize) {
    let q = active.len();
    active.remove(l);
    u.remove(l);
    for col in l..q - 1 {
        for i in 0..q {
            r[(i, col)] = r[(i, col + 1)];
        }
    }
    for i in 0..q {
        r[(i, q - 1)] = 0.0;
    }
    for k in l..q - 1 {
        let (cs, sn, rv) = givens(r[(k, k)], r[(k + 1, k)]);
        r[(k, k)] = rv;
        r[(k + 1, k)] = 0.0;
        for col in k + 1..q - 1 {
            let (x, y) = (r[(k, col)], r[(k + 1, col)]);
            r[(k, col)] = cs * x + sn * y;
            r[(k + 1, col)] = -sn * x + cs * y;
        }
        rotate_columns(jm, k, k + 1, cs, sn);
    }
}
