//! Dense strictly convex QP solver (Goldfarb-Idnani dual active set).
//!
//! Solves `min ½ xᵀ G x + gᵀx` subject to `aᵢᵀx = bᵢ` and `aⱼᵀx ≤ bⱼ` with
//! `G` positive definite. Constraint rows are stored sparsely since the
//! optimal-control problems built on top touch only a few variables per row.
//!
//! The factorization follows the classical scheme: `G = L Lᵀ`, `J = L⁻ᵀ`
//! rotated so that its leading columns span the active normals, and `R` the
//! upper triangular factor of the active set in that basis. Constraints are
//! added and dropped with Givens rotations.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraint {
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl LinearConstraint {
    pub fn new(coeffs: Vec<(usize, f64)>, rhs: f64) -> Self {
        Self { coeffs, rhs }
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().map(|&(i, v)| v * x[i]).sum()
    }
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub equalities: Vec<LinearConstraint>,
    pub inequalities: Vec<LinearConstraint>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers with `G x + g + Σ λᵢ aᵢ = 0`; inequality entries are ≥ 0.
    pub eq_multipliers: Vec<f64>,
    pub ineq_multipliers: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("Hessian is not positive definite")]
    NotConvex,
    #[error("constraints are infeasible")]
    Infeasible,
    #[error("equality constraints are linearly dependent")]
    DependentEqualities,
    #[error("active-set iteration limit reached")]
    MaxIterations,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

struct Factor {
    n: usize,
    // column-major: j[col][row]
    j: Vec<Vec<f64>>,
    // row-major upper triangular, n×n
    r: Vec<Vec<f64>>,
    r_norm: f64,
}

impl Factor {
    fn compute_d(&self, np: &LinearConstraint, d: &mut [f64]) {
        for (col, dj) in self.j.iter().zip(d.iter_mut()) {
            *dj = np.coeffs.iter().map(|&(k, v)| col[k] * v).sum();
        }
    }

    fn update_z(&self, d: &[f64], iq: usize, z: &mut [f64]) {
        z.iter_mut().for_each(|v| *v = 0.0);
        for c in iq..self.n {
            let dc = d[c];
            if dc != 0.0 {
                for (zk, jk) in z.iter_mut().zip(&self.j[c]) {
                    *zk += jk * dc;
                }
            }
        }
    }

    fn update_r(&self, d: &[f64], iq: usize, r: &mut [f64]) {
        for i in (0..iq).rev() {
            let mut s = d[i];
            for k in i + 1..iq {
                s -= self.r[i][k] * r[k];
            }
            r[i] = s / self.r[i][i];
        }
    }

    /// Appends the constraint whose transformed normal is `d`. Returns
    /// false if it is linearly dependent on the active set.
    fn add(&mut self, d: &mut [f64], iq: &mut usize) -> bool {
        let n = self.n;
        for jj in (*iq + 1..n).rev() {
            let mut cc = d[jj - 1];
            let mut ss = d[jj];
            let h = cc.hypot(ss);
            if h == 0.0 {
                continue;
            }
            d[jj] = 0.0;
            ss /= h;
            cc /= h;
            if cc < 0.0 {
                cc = -cc;
                ss = -ss;
                d[jj - 1] = -h;
            } else {
                d[jj - 1] = h;
            }
            let xny = ss / (1.0 + cc);
            let (left, right) = self.j.split_at_mut(jj);
            let (a, b) = (&mut left[jj - 1], &mut right[0]);
            for k in 0..n {
                let t1 = a[k];
                let t2 = b[k];
                a[k] = t1 * cc + t2 * ss;
                b[k] = xny * (t1 + a[k]) - t2;
            }
        }
        *iq += 1;
        for i in 0..*iq {
            self.r[i][*iq - 1] = d[i];
        }
        let diag = d[*iq - 1].abs();
        if diag <= f64::EPSILON * self.r_norm {
            return false;
        }
        self.r_norm = self.r_norm.max(diag);
        true
    }

    /// Removes the active entry at position `qq`, shifting later ones down.
    fn delete(&mut self, active: &mut Vec<usize>, u: &mut Vec<f64>, iq: &mut usize, qq: usize) {
        let n = self.n;
        for i in qq..*iq - 1 {
            active[i] = active[i + 1];
            u[i] = u[i + 1];
            for row in 0..n {
                self.r[row][i] = self.r[row][i + 1];
            }
        }
        active[*iq - 1] = active[*iq];
        u[*iq - 1] = u[*iq];
        active[*iq] = 0;
        u[*iq] = 0.0;
        for row in 0..*iq {
            self.r[row][*iq - 1] = 0.0;
        }
        *iq -= 1;
        if *iq == 0 {
            return;
        }
        for jj in qq..*iq {
            let mut cc = self.r[jj][jj];
            let mut ss = self.r[jj + 1][jj];
            let h = cc.hypot(ss);
            if h == 0.0 {
                continue;
            }
            cc /= h;
            ss /= h;
            self.r[jj + 1][jj] = 0.0;
            if cc < 0.0 {
                self.r[jj][jj] = -h;
                cc = -cc;
                ss = -ss;
            } else {
                self.r[jj][jj] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in jj + 1..*iq {
                let t1 = self.r[jj][k];
                let t2 = self.r[jj + 1][k];
                self.r[jj][k] = t1 * cc + t2 * ss;
                self.r[jj + 1][k] = xny * (t1 + self.r[jj][k]) - t2;
            }
            let (left, right) = self.j.split_at_mut(jj + 1);
            let (a, b) = (&mut left[jj], &mut right[0]);
            for k in 0..n {
                let t1 = a[k];
                let t2 = b[k];
                a[k] = t1 * cc + t2 * ss;
                b[k] = xny * (a[k] + t1) - t2;
            }
        }
    }
}

/// Violation accepted as zero for one constraint row at `x`.
fn feasibility_tol(c: &LinearConstraint, x: &[f64]) -> f64 {
    let scale = c.rhs.abs() + c.coeffs.iter().map(|&(k, v)| (v * x[k]).abs()).sum::<f64>();
    1e-12 * scale.max(1.0)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves the QP. `max_iter` bounds the number of active-set changes.
pub fn solve_qp(problem: &QpProblem, max_iter: usize) -> Result<QpSolution, QpError> {
    let n = problem.gradient.len();
    if problem.hessian.nrows() != n || problem.hessian.ncols() != n {
        return Err(QpError::DimensionMismatch {
            expected: n,
            found: problem.hessian.nrows(),
        });
    }
    for c in problem.equalities.iter().chain(&problem.inequalities) {
        if let Some(&(k, _)) = c.coeffs.iter().find(|(k, _)| *k >= n) {
            return Err(QpError::DimensionMismatch {
                expected: n,
                found: k + 1,
            });
        }
    }
    let p = problem.equalities.len();
    let m = problem.inequalities.len();
    let g = &problem.gradient;

    let chol = problem
        .hessian
        .clone()
        .cholesky()
        .ok_or(QpError::NotConvex)?;
    let l_inv_t = {
        let l = chol.l();
        let linv = l.clone().try_inverse().ok_or(QpError::NotConvex)?;
        linv.transpose()
    };
    let mut fac = Factor {
        n,
        j: (0..n)
            .map(|c| l_inv_t.column(c).iter().copied().collect())
            .collect(),
        r: vec![vec![0.0; n]; n],
        r_norm: 1.0,
    };

    // unconstrained minimum
    let mut x: Vec<f64> = chol.solve(&(-g)).iter().copied().collect();

    let slots = n + 1;
    let mut active: Vec<usize> = vec![0; slots]; // constraint ids; equalities are 0..p, inequalities p+i
    let mut u = vec![0.0; slots];
    let mut d = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut r = vec![0.0; slots];
    let mut iq = 0usize;

    // equality constraints
    for (i, c) in problem.equalities.iter().enumerate() {
        fac.compute_d(c, &mut d);
        fac.update_z(&d, iq, &mut z);
        fac.update_r(&d, iq, &mut r);
        let znp = c.dot(&z);
        let residual = c.rhs - c.dot(&x);
        let t2 = if dot(&z, &z).sqrt() > f64::EPSILON {
            residual / znp
        } else {
            0.0
        };
        for (xk, zk) in x.iter_mut().zip(&z) {
            *xk += t2 * zk;
        }
        u[iq] = t2;
        for k in 0..iq {
            u[k] -= t2 * r[k];
        }
        active[iq] = i;
        if !fac.add(&mut d, &mut iq) {
            if residual.abs() <= 1e-9 * (1.0 + c.rhs.abs()) {
                // redundant but consistent: undo the bookkeeping
                iq -= 1;
                for row in 0..n {
                    fac.r[row][iq] = 0.0;
                }
                continue;
            }
            return Err(QpError::DependentEqualities);
        }
    }

    // inequality constraints: s_i = b_i − a_iᵀx ≥ 0
    let mut ok_to_add = vec![true; m];
    let mut excluded = vec![false; m];
    let mut iterations = 0usize;
    let mut s = vec![0.0; m];
    let ineq_slack =
        |x: &[f64], i: usize| problem.inequalities[i].rhs - problem.inequalities[i].dot(x);

    'outer: loop {
        iterations += 1;
        if iterations > max_iter {
            return Err(QpError::MaxIterations);
        }
        for flag in ok_to_add.iter_mut() {
            *flag = true;
        }
        for k in p..iq {
            ok_to_add[active[k] - p] = false;
        }
        for i in 0..m {
            s[i] = ineq_slack(&x, i);
        }
        {
            // most violated candidate beyond a relative feasibility tolerance
            let mut ip = None;
            let mut smin = 0.0;
            for i in 0..m {
                if ok_to_add[i]
                    && !excluded[i]
                    && s[i] < smin
                    && s[i] < -feasibility_tol(&problem.inequalities[i], &x)
                {
                    smin = s[i];
                    ip = Some(i);
                }
            }
            let Some(ip) = ip else {
                break 'outer;
            };
            let np = &problem.inequalities[ip];
            // normal in ≥ form is −a
            let neg = LinearConstraint {
                coeffs: np.coeffs.iter().map(|&(k, v)| (k, -v)).collect(),
                rhs: -np.rhs,
            };
            u[iq] = 0.0;
            active[iq] = p + ip;

            loop {
                iterations += 1;
                if iterations > max_iter {
                    return Err(QpError::MaxIterations);
                }
                fac.compute_d(&neg, &mut d);
                fac.update_z(&d, iq, &mut z);
                fac.update_r(&d, iq, &mut r);

                // dual step length: first active inequality whose multiplier hits zero
                let mut t1 = f64::INFINITY;
                let mut drop_pos = None;
                for k in p..iq {
                    if r[k] > 0.0 {
                        let ratio = u[k] / r[k];
                        if ratio < t1 {
                            t1 = ratio;
                            drop_pos = Some(k);
                        }
                    }
                }
                let znp = neg.dot(&z);
                let t2 = if dot(&z, &z).sqrt() > f64::EPSILON {
                    -s[ip] / znp
                } else {
                    f64::INFINITY
                };
                let t = t1.min(t2);
                if !t.is_finite() {
                    return Err(QpError::Infeasible);
                }
                if !t2.is_finite() {
                    // dual-only step
                    for k in 0..iq {
                        u[k] -= t * r[k];
                    }
                    u[iq] += t;
                    let qq = drop_pos.expect("finite t1 has a blocking constraint");
                    let dropped = active[qq];
                    fac.delete(&mut active, &mut u, &mut iq, qq);
                    ok_to_add[dropped - p] = true;
                    continue;
                }
                for (xk, zk) in x.iter_mut().zip(&z) {
                    *xk += t * zk;
                }
                for k in 0..iq {
                    u[k] -= t * r[k];
                }
                u[iq] += t;

                if t2 <= t1 {
                    // full step: add the constraint
                    if !fac.add(&mut d, &mut iq) {
                        // numerically dependent on the active set: leave it out
                        excluded[ip] = true;
                        let pos = iq - 1;
                        fac.delete(&mut active, &mut u, &mut iq, pos);
                    }
                    continue 'outer;
                }
                // partial step: drop the blocking constraint and retry
                let qq = drop_pos.expect("partial step has a blocking constraint");
                let dropped = active[qq];
                fac.delete(&mut active, &mut u, &mut iq, qq);
                ok_to_add[dropped - p] = true;
                s[ip] = ineq_slack(&x, ip);
            }
        }
    }

    if excluded.iter().any(|e| *e) {
        let worst = (0..m).map(|i| -ineq_slack(&x, i)).fold(0.0, f64::max);
        if worst > 1e-7 {
            return Err(QpError::Infeasible);
        }
    }

    let mut eq_multipliers = vec![0.0; p];
    let mut ineq_multipliers = vec![0.0; m];
    for k in 0..iq {
        let id = active[k];
        if id < p {
            eq_multipliers[id] = -u[k];
        } else {
            ineq_multipliers[id - p] = u[k];
        }
    }
    let xv = DVector::from_vec(x);
    let objective = 0.5 * xv.dot(&(&problem.hessian * &xv)) + g.dot(&xv);
    Ok(QpSolution {
        x: xv,
        eq_multipliers,
        ineq_multipliers,
        objective,
        iterations,
    })
}

/// Largest violation of stationarity, primal feasibility, dual feasibility
/// and complementarity at `sol`.
pub fn kkt_residual(problem: &QpProblem, sol: &QpSolution) -> f64 {
    let x = sol.x.as_slice();
    let mut grad = &problem.hessian * &sol.x + &problem.gradient;
    for (c, l) in problem.equalities.iter().zip(&sol.eq_multipliers) {
        for &(k, v) in &c.coeffs {
            grad[k] += l * v;
        }
    }
    for (c, l) in problem.inequalities.iter().zip(&sol.ineq_multipliers) {
        for &(k, v) in &c.coeffs {
            grad[k] += l * v;
        }
    }
    let mut res = grad.amax();
    for c in &problem.equalities {
        res = res.max((c.dot(x) - c.rhs).abs());
    }
    for (c, l) in problem.inequalities.iter().zip(&sol.ineq_multipliers) {
        let slack = c.rhs - c.dot(x);
        res = res
            .max((-slack).max(0.0))
            .max((-l).max(0.0))
            .max((l * slack).abs());
    }
    res
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(rows: &[&[f64]], rhs: &[f64]) -> Vec<LinearConstraint> {
        rows.iter()
            .zip(rhs)
            .map(|(r, b)| LinearConstraint::new(r.iter().copied().enumerate().collect(), *b))
            .collect()
    }

    #[test]
    fn unconstrained_minimum() {
        let qp = QpProblem {
            hessian: DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]),
            gradient: DVector::from_vec(vec![-2.0, -4.0]),
            equalities: vec![],
            inequalities: vec![],
        };
        let s = solve_qp(&qp, 100).unwrap();
        assert!((s.x[0] - 1.0).abs() < 1e-12 && (s.x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn classic_example() {
        // min ½‖x‖² − x₀ − x₁ s.t. x₀ + x₁ ≤ 1, x₀ ≥ 0 → x = (½, ½)
        let qp = QpProblem {
            hessian: DMatrix::identity(2, 2),
            gradient: DVector::from_vec(vec![-1.0, -1.0]),
            equalities: vec![],
            inequalities: dense(&[&[1.0, 1.0], &[-1.0, 0.0]], &[1.0, 0.0]),
        };
        let s = solve_qp(&qp, 100).unwrap();
        assert!((s.x[0] - 0.5).abs() < 1e-12 && (s.x[1] - 0.5).abs() < 1e-12);
        assert!((s.ineq_multipliers[0] - 0.5).abs() < 1e-12);
        assert!(kkt_residual(&qp, &s) < 1e-12);
    }

    #[test]
    fn equality_and_inequality() {
        // min ½‖x‖² s.t. x₀ + x₁ + x₂ = 3, x₂ ≤ 0.5
        let qp = QpProblem {
            hessian: DMatrix::identity(3, 3),
            gradient: DVector::zeros(3),
            equalities: dense(&[&[1.0, 1.0, 1.0]], &[3.0]),
            inequalities: dense(&[&[0.0, 0.0, 1.0]], &[0.5]),
        };
        let s = solve_qp(&qp, 100).unwrap();
        assert!((s.x[2] - 0.5).abs() < 1e-12);
        assert!((s.x[0] - 1.25).abs() < 1e-12);
        assert!(kkt_residual(&qp, &s) < 1e-12);
    }

    #[test]
    fn detects_infeasibility() {
        let qp = QpProblem {
            hessian: DMatrix::identity(1, 1),
            gradient: DVector::zeros(1),
            equalities: vec![],
            inequalities: dense(&[&[1.0], &[-1.0]], &[-1.0, -1.0]),
        };
        assert_eq!(solve_qp(&qp, 100).unwrap_err(), QpError::Infeasible);
    }

    #[test]
    fn rejects_indefinite() {
        let qp = QpProblem {
            hessian: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]),
            gradient: DVector::zeros(2),
            equalities: vec![],
            inequalities: vec![],
        };
        assert_eq!(solve_qp(&qp, 100).unwrap_err(), QpError::NotConvex);
    }
}
