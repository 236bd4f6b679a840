//! Dense QP solver against exhaustive active-set enumeration.

use dmpc_core::qp::{kkt_residual, solve_qp, LinearConstraint, QpError, QpProblem};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dense(c: &LinearConstraint, n: usize) -> Vec<f64> {
    let mut row = vec![0.0; n];
    for &(i, v) in &c.coeffs {
        row[i] += v;
    }
    row
}

/// Minimum over all active subsets whose equality-constrained stationary
/// point is primal feasible. For a strictly convex QP this is the optimum.
fn brute_force(p: &QpProblem) -> Option<(DVector<f64>, f64)> {
    let n = p.gradient.len();
    let m = p.inequalities.len();
    let mut best: Option<(DVector<f64>, f64)> = None;
    for mask in 0..1usize << m {
        let mut rows: Vec<(Vec<f64>, f64)> =
            p.equalities.iter().map(|c| (dense(c, n), c.rhs)).collect();
        for (j, c) in p.inequalities.iter().enumerate() {
            if mask >> j & 1 == 1 {
                rows.push((dense(c, n), c.rhs));
            }
        }
        if rows.len() > n {
            continue;
        }
        let k = rows.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        let mut rhs = DVector::zeros(n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&p.hessian);
        for i in 0..n {
            rhs[i] = -p.gradient[i];
        }
        for (r, (a, b)) in rows.iter().enumerate() {
            for c in 0..n {
                kkt[(n + r, c)] = a[c];
                kkt[(c, n + r)] = a[c];
            }
            rhs[n + r] = *b;
        }
        let Some(sol) = kkt.lu().solve(&rhs) else {
            continue;
        };
        let x = sol.rows(0, n).into_owned();
        if !x.iter().all(|v| v.is_finite()) {
            continue;
        }
        let xs: Vec<f64> = x.iter().copied().collect();
        let ok = p.inequalities.iter().all(|c| c.dot(&xs) <= c.rhs + 1e-9)
            && p.equalities
                .iter()
                .all(|c| (c.dot(&xs) - c.rhs).abs() <= 1e-9);
        if !ok {
            continue;
        }
        let f = 0.5 * x.dot(&(&p.hessian * &x)) + p.gradient.dot(&x);
        if best.as_ref().is_none_or(|(_, b)| f < *b) {
            best = Some((x, f));
        }
    }
    best
}

fn random_problem(rng: &mut ChaCha8Rng) -> QpProblem {
    let n = rng.random_range(1..=4);
    let m = rng.random_range(0..=6);
    let meq = rng.random_range(0..n.min(2));
    let f = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let hessian = &f * f.transpose() + DMatrix::identity(n, n) * 0.1;
    let gradient = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
    let row = |rng: &mut ChaCha8Rng| {
        let coeffs: Vec<(usize, f64)> = (0..n).map(|i| (i, rng.random_range(-1.0..1.0))).collect();
        LinearConstraint::new(coeffs, rng.random_range(-1.0..1.0))
    };
    let equalities = (0..meq).map(|_| row(rng)).collect();
    let inequalities = (0..m).map(|_| row(rng)).collect();
    QpProblem {
        hessian,
        gradient,
        equalities,
        inequalities,
    }
}

#[test]
fn matches_active_set_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (mut solved, mut infeasible) = (0, 0);
    for case in 0..800 {
        let p = random_problem(&mut rng);
        let oracle = brute_force(&p);
        match (solve_qp(&p, 500), oracle) {
            (Ok(sol), Some((x, f))) => {
                solved += 1;
                assert!(
                    (sol.objective - f).abs() <= 1e-7 * (1.0 + f.abs()),
                    "case {case}: objective {} vs {f}",
                    sol.objective
                );
                assert!(
                    (&sol.x - &x).amax() <= 1e-6,
                    "case {case}: {} vs {x}",
                    sol.x
                );
                assert!(sol.ineq_multipliers.iter().all(|&l| l >= -1e-10));
                assert!(kkt_residual(&p, &sol) <= 1e-7, "case {case}");
            }
            (Err(QpError::Infeasible), None) => infeasible += 1,
            (got, want) => panic!("case {case}: solver {got:?}, oracle {want:?}"),
        }
    }
    assert!(
        solved > 400 && infeasible > 10,
        "{solved} solved, {infeasible} infeasible"
    );
}
