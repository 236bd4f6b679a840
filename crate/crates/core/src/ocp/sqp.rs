//! Sequential quadratic programming on the multiple-shooting transcription.
//!
//! Each iteration linearizes dynamics and constraints at the current
//! iterate, builds a block-diagonal Lagrangian Hessian (convexified stage by
//! stage), solves the QP subproblem and backtracks on an ℓ1 merit function.
//! The best feasible iterate seen so far is kept as a fallback.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{
    set_violation, BundleKind, HessianMode, LocalOcp, Nlp, OcpError, OcpSolution, SolveStatus,
    SolverConfig, TrajectoryBundle, SLACK_REGULARIZATION,
};
use crate::geometry::EPS_SET;
use crate::qp::{solve_qp, LinearConstraint, QpProblem};

/// Smallest eigenvalue kept in each Hessian block.
const MIN_CURVATURE: f64 = 1e-6;

#[derive(Clone)]
struct Candidate {
    w: DVector<f64>,
    objective: f64,
    lambda: DVector<f64>,
    mu: DVector<f64>,
    kkt: f64,
    iterations: usize,
}

/// Solves the local problem from `x0`, warm-started at `warm`.
pub fn solve(
    ocp: &LocalOcp,
    x0: &DVector<f64>,
    warm: &TrajectoryBundle,
    config: &SolverConfig,
) -> Result<OcpSolution, OcpError> {
    if x0.len() != ocp.n() {
        return Err(OcpError::DimensionMismatch(format!(
            "initial state has {} entries, model has {}",
            x0.len(),
            ocp.n()
        )));
    }
    if let Some(c) = &ocp.consistency {
        if c.reference.len() != ocp.horizon + 1 {
            return Err(OcpError::DimensionMismatch("reference horizon".into()));
        }
        let v = set_violation(&c.set, &(x0 - &c.reference[0]))?;
        if v > EPS_SET {
            return Err(OcpError::Infeasible(format!(
                "measured state leaves the consistency tube by {v:e}"
            )));
        }
    }
    let nlp = ocp.nlp(x0);
    let mut w = nlp.pack(warm)?;
    let n_eq = ocp.horizon * ocp.n();
    let mut lambda = DVector::zeros(n_eq);
    let mut mu = DVector::zeros(nlp.inequality_rows(&w)?.len());
    let mut penalty: f64 = 1.0;
    let mut best: Option<Candidate> = None;

    let finish =
        |nlp: &Nlp<'_>, c: Candidate, status: SolveStatus| -> Result<OcpSolution, OcpError> {
            let bundle = nlp.unpack(&c.w, warm.agent, warm.time_step, BundleKind::Optimal);
            Ok(OcpSolution {
                cost: nlp.tracking_cost(&c.w),
                bundle,
                kkt_residual: c.kkt,
                iterations: c.iterations,
                status,
                eq_multipliers: c.lambda,
                ineq_multipliers: c.mu,
                decision: c.w,
            })
        };

    if is_feasible(&nlp, &w)? {
        best = Some(Candidate {
            objective: nlp.objective(&w),
            w: w.clone(),
            lambda: lambda.clone(),
            mu: mu.clone(),
            kkt: f64::INFINITY,
            iterations: 0,
        });
    }
    let warm_feasible = best.clone();

    for iter in 0..config.sqp_max_iter {
        let eq = nlp.equalities(&w)?;
        let rows = nlp.inequality_rows(&w)?;
        let grad = nlp.objective_gradient(&w);
        let jacobians = (0..ocp.horizon)
            .map(|k| ocp.model.linearize(&nlp.state(&w, k), &nlp.input(&w, k)))
            .collect::<Result<Vec<_>, _>>()?;
        let hessian = lagrangian_hessian(&nlp, &w, &lambda, &mu, config.hessian)?;

        let mut equalities = Vec::with_capacity(n_eq);
        let n = ocp.n();
        let m = ocp.m();
        for (k, (a, b)) in jacobians.iter().enumerate() {
            let next = nlp.state_index(k + 1);
            let ui = nlp.input_index(k);
            for i in 0..n {
                let mut coeffs = vec![(next + i, 1.0)];
                if k >= 1 {
                    let xi = nlp.state_index(k);
                    coeffs.extend(
                        (0..n)
                            .filter(|&j| a[(i, j)] != 0.0)
                            .map(|j| (xi + j, -a[(i, j)])),
                    );
                }
                coeffs.extend(
                    (0..m)
                        .filter(|&j| b[(i, j)] != 0.0)
                        .map(|j| (ui + j, -b[(i, j)])),
                );
                equalities.push(LinearConstraint::new(coeffs, -eq[k * n + i]));
            }
        }
        let inequalities: Vec<LinearConstraint> = rows
            .iter()
            .map(|r| LinearConstraint::new(r.gradient.clone(), -r.value))
            .collect();
        let (hessian, gradient) = {
            let active: Vec<&LinearConstraint> = equalities
                .iter()
                .chain(
                    inequalities
                        .iter()
                        .zip(mu.iter())
                        .filter(|(_, m)| **m > 0.0)
                        .map(|(c, _)| c),
                )
                .collect();
            convexify(&nlp, hessian, &grad, &active)
        };
        let problem = QpProblem {
            hessian,
            gradient,
            equalities,
            inequalities,
        };
        let sol = match solve_qp(&problem, config.qp_max_iter) {
            Ok(s) => s,
            Err(e) => {
                log::debug!("QP subproblem failed at SQP iteration {iter}: {e}");
                break;
            }
        };
        let step = sol.x;
        let new_lambda = DVector::from_vec(sol.eq_multipliers);
        let new_mu = DVector::from_vec(sol.ineq_multipliers);

        let kkt = nlp.kkt_report(&w, &new_lambda, &new_mu)?.scaled();
        if kkt <= config.kkt_tol && is_feasible(&nlp, &w)? {
            let c = Candidate {
                objective: nlp.objective(&w),
                w,
                lambda: new_lambda,
                mu: new_mu,
                kkt,
                iterations: iter + 1,
            };
            return finish_optimal(&nlp, c, warm_feasible, &finish);
        }
        if step.amax() <= config.step_tol * w.amax().max(1.0) {
            let w_new = &w + &step;
            if is_feasible(&nlp, &w_new)? {
                let kkt = nlp.kkt_report(&w_new, &new_lambda, &new_mu)?.scaled();
                let c = Candidate {
                    objective: nlp.objective(&w_new),
                    w: w_new,
                    lambda: new_lambda,
                    mu: new_mu,
                    kkt,
                    iterations: iter + 1,
                };
                return finish_optimal(&nlp, c, warm_feasible, &finish);
            }
        }

        let multiplier_max = new_lambda.amax().max(new_mu.amax());
        if penalty < 1.1 * multiplier_max {
            penalty = 2.0 * multiplier_max;
        }
        let infeas = |eq: &DVector<f64>, ineq: &DVector<f64>| -> f64 {
            eq.iter().map(|v| v.abs()).sum::<f64>() + ineq.iter().map(|v| v.max(0.0)).sum::<f64>()
        };
        let ineq_vals = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.value));
        let merit0 = nlp.objective(&w) + penalty * infeas(&eq, &ineq_vals);
        let slope = grad.dot(&step) - penalty * infeas(&eq, &ineq_vals);
        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-10 {
            let trial = &w + &step * t;
            let merit = match (nlp.equalities(&trial), nlp.inequalities(&trial)) {
                (Ok(e), Ok(g)) => nlp.objective(&trial) + penalty * infeas(&e, &g),
                _ => f64::INFINITY,
            };
            if merit.is_finite() && merit <= merit0 + config.armijo * t * slope.min(0.0) {
                accepted = Some(trial);
                break;
            }
            t *= config.ls_beta;
        }
        let Some(trial) = accepted else {
            log::debug!("line search failed at SQP iteration {iter}");
            break;
        };
        w = trial;
        lambda = new_lambda;
        mu = new_mu;

        if is_feasible(&nlp, &w)? {
            let objective = nlp.objective(&w);
            if best.as_ref().is_none_or(|b| objective < b.objective) {
                best = Some(Candidate {
                    objective,
                    w: w.clone(),
                    lambda: lambda.clone(),
                    mu: mu.clone(),
                    kkt: f64::INFINITY,
                    iterations: iter + 1,
                });
            }
        }
    }

    match best {
        Some(mut c) => {
            c.kkt = nlp.kkt_report(&c.w, &c.lambda, &c.mu)?.scaled();
            finish(&nlp, c, SolveStatus::MaxIterFeasible)
        }
        None => Err(OcpError::Infeasible("no feasible iterate found".into())),
    }
}

/// A stationary point the line search reached can still be worse than an
/// earlier feasible iterate (typically the warm start); never hand back the
/// worse one.
fn finish_optimal<F>(
    nlp: &Nlp<'_>,
    c: Candidate,
    warm: Option<Candidate>,
    finish: &F,
) -> Result<OcpSolution, OcpError>
where
    F: Fn(&Nlp<'_>, Candidate, SolveStatus) -> Result<OcpSolution, OcpError>,
{
    // never return something worse than a feasible warm start, so a shifted
    // candidate always bounds the optimum from above
    match warm {
        Some(mut b) if b.objective < c.objective => {
            b.kkt = nlp.kkt_report(&b.w, &b.lambda, &b.mu)?.scaled();
            b.iterations = c.iterations;
            finish(nlp, b, SolveStatus::MaxIterFeasible)
        }
        _ => finish(nlp, c, SolveStatus::Optimal),
    }
}

fn is_feasible(nlp: &Nlp<'_>, w: &DVector<f64>) -> Result<bool, OcpError> {
    let bundle = nlp.unpack(w, 0, 0, BundleKind::Optimal);
    Ok(nlp.ocp.feasibility(&nlp.x0, &bundle)?.is_feasible())
}

/// Block-diagonal Hessian of the Lagrangian.
fn lagrangian_hessian(
    nlp: &Nlp<'_>,
    w: &DVector<f64>,
    lambda: &DVector<f64>,
    mu: &DVector<f64>,
    mode: HessianMode,
) -> Result<DMatrix<f64>, OcpError> {
    let ocp = nlp.ocp;
    let (n, m) = (ocp.n(), ocp.m());
    let nv = nlp.num_vars();
    let mut h = DMatrix::zeros(nv, nv);

    // cost curvature
    for k in 0..ocp.horizon {
        let ui = nlp.input_index(k);
        h.view_mut((ui, ui), (m, m)).copy_from(&(&ocp.r * 2.0));
        if k >= 1 {
            let xi = nlp.state_index(k);
            h.view_mut((xi, xi), (n, n)).copy_from(&(&ocp.q * 2.0));
        }
    }
    let xn = nlp.state_index(ocp.horizon);
    h.view_mut((xn, xn), (n, n))
        .copy_from(&(&ocp.terminal.p * 2.0));

    // dynamics curvature: L contains λᵀ(x_{k+1} − f(x_k, u_k))
    if mode == HessianMode::Exact && !ocp.model.is_linear() {
        for k in 0..ocp.horizon {
            let l = lambda.rows(k * n, n).into_owned();
            if l.amax() == 0.0 {
                continue;
            }
            let x = nlp.state(w, k);
            let u = nlp.input(w, k);
            let hk = dynamics_curvature(ocp, &x, &u, &l)?;
            if k == 0 {
                let ui = nlp.input_index(0);
                let mut block = h.view_mut((ui, ui), (m, m));
                block -= hk.view((n, n), (m, m));
            } else {
                let xi = nlp.state_index(k);
                let mut block = h.view_mut((xi, xi), (n + m, n + m));
                block -= &hk;
            }
        }
    }

    // inequality curvature (terminal ellipsoid, distance constraints)
    for (c, mu_i) in nlp.inequality_curvatures(w).into_iter().zip(mu.iter()) {
        if let Some((offset, hc)) = c {
            if *mu_i > 0.0 {
                let mut block = h.view_mut((offset, offset), (n, n));
                block += hc * *mu_i;
            }
        }
    }

    for &(e, _, s) in &nlp.soft {
        let weight = ocp.extra[e].soft_weight.unwrap_or(0.0);
        h[(s, s)] = (2.0 * SLACK_REGULARIZATION * weight).max(MIN_CURVATURE);
    }
    Ok(h)
}

/// Makes the QP strictly convex. Adding `½ρ‖AΔ − r‖²` over rows that stay
/// active leaves the minimizer and the multipliers untouched and is positive
/// definite for large `ρ` whenever the reduced Hessian is. The rows are the
/// equalities plus the inequalities active in the previous subproblem.
/// Falls back to clipping the eigenvalues of every stage block.
fn convexify(
    nlp: &Nlp<'_>,
    h: DMatrix<f64>,
    grad: &DVector<f64>,
    rows: &[&LinearConstraint],
) -> (DMatrix<f64>, DVector<f64>) {
    let scale = h.diagonal().amax().max(1.0);
    let nv = h.nrows();
    let margin = DMatrix::<f64>::identity(nv, nv) * (1e-9 * scale);
    let is_pd = |m: &DMatrix<f64>| (m - &margin).cholesky().is_some();
    if is_pd(&h) {
        return (h, grad.clone());
    }
    let mut ata = DMatrix::zeros(nv, nv);
    let mut atr = DVector::zeros(nv);
    for c in rows {
        for &(i, a) in &c.coeffs {
            atr[i] += a * c.rhs;
            for &(j, b) in &c.coeffs {
                ata[(i, j)] += a * b;
            }
        }
    }
    let mut rho = 1e-3 * scale;
    while rho <= 1e3 * scale {
        let cand = &h + &ata * rho;
        if is_pd(&cand) {
            return (cand, grad - &atr * rho);
        }
        rho *= 10.0;
    }
    (clip_blocks(nlp, h), grad.clone())
}

fn clip_blocks(nlp: &Nlp<'_>, mut h: DMatrix<f64>) -> DMatrix<f64> {
    let ocp = nlp.ocp;
    let (n, m) = (ocp.n(), ocp.m());
    let mut blocks = vec![(nlp.input_index(0), m)];
    for k in 1..ocp.horizon {
        blocks.push((nlp.state_index(k), n + m));
    }
    blocks.push((nlp.state_index(ocp.horizon), n));
    for (start, size) in blocks {
        let block = h.view((start, start), (size, size)).into_owned();
        let sym = (&block + block.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let clipped = eig.eigenvalues.map(|v| v.max(MIN_CURVATURE));
        let fixed =
            &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        h.view_mut((start, start), (size, size)).copy_from(&fixed);
    }
    h
}

/// `∇²_{(x,u)} λᵀf(x, u)` by central second differences.
fn dynamics_curvature(
    ocp: &LocalOcp,
    x: &DVector<f64>,
    u: &DVector<f64>,
    lambda: &DVector<f64>,
) -> Result<DMatrix<f64>, OcpError> {
    let (n, m) = (ocp.n(), ocp.m());
    let dim = n + m;
    let mut z = DVector::zeros(dim);
    z.rows_mut(0, n).copy_from(x);
    z.rows_mut(n, m).copy_from(u);
    let phi = |z: &DVector<f64>| -> Result<f64, OcpError> {
        let x = z.rows(0, n).into_owned();
        let u = z.rows(n, m).into_owned();
        Ok(lambda.dot(&ocp.model.step(&x, &u)?))
    };
    let steps: Vec<f64> = z.iter().map(|v| 1e-4 * v.abs().max(1.0)).collect();
    let mut h = DMatrix::zeros(dim, dim);
    for a in 0..dim {
        for b in a..dim {
            let mut val = 0.0;
            for (sa, sb, sign) in [
                (1.0, 1.0, 1.0),
                (1.0, -1.0, -1.0),
                (-1.0, 1.0, -1.0),
                (-1.0, -1.0, 1.0),
            ] {
                let mut p = z.clone();
                p[a] += sa * steps[a];
                p[b] += sb * steps[b];
                val += sign * phi(&p)?;
            }
            val /= 4.0 * steps[a] * steps[b];
            h[(a, b)] = val;
            h[(b, a)] = val;
        }
    }
    Ok(h)
}
