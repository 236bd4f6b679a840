//! Terminal ingredients: Riccati terminal cost and auxiliary feedback,
//! sublevel-set terminal regions sized against the nonlinear model, and the
//! check that a consistency set fits into the enlarged terminal region.

use nalgebra::{DMatrix, DVector, RealField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::constraints::{
    check_robust_coupled, check_robust_state, ConstraintError, CoupledConstraint, InputSet, Region,
    StateConstraint,
};
use crate::geometry::{ConsistencySet, Ellipsoid, GeometryError};
use crate::model::{ModelError, SubsystemModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TerminalError {
    #[error("Riccati iteration did not converge within {0} iterations")]
    NoConvergence(usize),
    #[error("Riccati iteration diverged; (A, B) is not stabilizable")]
    NotStabilizable,
    #[error("no terminal level in [{lo:e}, {hi:e}] satisfies the terminal conditions")]
    NoValidLevel { lo: f64, hi: f64 },
    #[error("consistency set is unbounded in every weighted coordinate")]
    UnboundedOffset,
    #[error("terminal ingredients failed validation: {0}")]
    Validation(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Solves the discrete algebraic Riccati equation by fixed-point iteration
/// `P ← Q + Aᵀ(P − PB(R + BᵀPB)⁻¹BᵀP)A` from `P = Q`. Returns `(P, K)` with
/// `K = −(R + BᵀPB)⁻¹BᵀPA`.
pub fn solve_dare<T: RealField + Copy>(
    a: &DMatrix<T>,
    b: &DMatrix<T>,
    q: &DMatrix<T>,
    r: &DMatrix<T>,
) -> Result<(DMatrix<T>, DMatrix<T>), TerminalError> {
    const MAX_ITER: usize = 100_000;
    let n = a.nrows();
    if a.ncols() != n
        || b.nrows() != n
        || q.shape() != (n, n)
        || r.shape() != (b.ncols(), b.ncols())
    {
        return Err(TerminalError::DimensionMismatch("DARE operands".into()));
    }
    let tol_abs = nalgebra::convert::<f64, T>(1e-10);
    let eps100 = T::default_epsilon() * nalgebra::convert::<f64, T>(100.0);
    let blowup = nalgebra::convert::<f64, T>(1e15);
    let at = a.transpose();
    let bt = b.transpose();
    let mut p = q.clone();
    for _ in 0..MAX_ITER {
        let pb = &p * b;
        let s = r + &bt * &pb;
        let s_inv = s.try_inverse().ok_or(TerminalError::NotStabilizable)?;
        let inner = &p - &pb * s_inv * pb.transpose();
        let mut next = q + &at * inner * a;
        next = (&next + next.transpose()) * nalgebra::convert::<f64, T>(0.5);
        let delta = (&next - &p).abs().max();
        let scale = next.abs().max();
        if !scale.is_finite() || scale > blowup {
            return Err(TerminalError::NotStabilizable);
        }
        p = next;
        if delta <= tol_abs.max(eps100 * scale) {
            let s = r + &bt * &p * b;
            let s_inv = s.try_inverse().ok_or(TerminalError::NotStabilizable)?;
            let k = -(s_inv * &bt * &p * a);
            return Ok((p, k));
        }
    }
    Err(TerminalError::NoConvergence(MAX_ITER))
}

/// `‖P − (Q + AᵀPA − AᵀPB(R + BᵀPB)⁻¹BᵀPA)‖∞`.
pub fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> f64 {
    let bt = b.transpose();
    let s = r + &bt * p * b;
    let s_inv = s
        .try_inverse()
        .unwrap_or_else(|| DMatrix::from_element(b.ncols(), b.ncols(), f64::NAN));
    let rhs = q + a.transpose() * p * a - a.transpose() * p * b * s_inv * &bt * p * a;
    (p - rhs).amax()
}

/// Spectral radius of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalConfig {
    /// Margin factor of the enlarged terminal set (must exceed 1).
    pub alpha: f64,
    /// Boundary samples per state dimension during the level search.
    pub boundary_samples_per_dim: usize,
    pub gamma_hi: f64,
    /// Input weight inflation in the Riccati design.
    pub kappa_f: f64,
    pub seed: u64,
}

impl Default for TerminalConfig {
    fn default() -> Self {
        Self {
            alpha: 1.1,
            boundary_samples_per_dim: 64,
            gamma_hi: 1e3,
            kappa_f: 1.0,
            seed: 7,
        }
    }
}

/// Neighbor data the own terminal design has to respect: the coupled
/// constraint and the neighbor's target.
#[derive(Debug, Clone)]
pub struct CoupledContext {
    pub constraint: CoupledConstraint,
    pub neighbor_target: DVector<f64>,
}

/// Terminal cost `(x − ξ)ᵀP(x − ξ)`, region `{(x − ξ)ᵀP(x − ξ) ≤ level}` and
/// auxiliary feedback `u_ξ + K (x − ξ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalIngredients {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub level: f64,
    pub alpha: f64,
    pub target: DVector<f64>,
    pub target_input: DVector<f64>,
}

impl TerminalIngredients {
    pub fn cost(&self, x: &DVector<f64>) -> f64 {
        let e = x - &self.target;
        e.dot(&(&self.p * &e))
    }

    pub fn aux_input(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.target_input + &self.k * (x - &self.target)
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.cost(x) <= self.level + tol
    }

    pub fn region(&self) -> Ellipsoid {
        Ellipsoid::new(self.target.clone(), self.p.clone(), self.level)
            .expect("terminal weight is positive definite")
    }

    /// `α · X^f` about the target.
    pub fn enlarged_region(&self) -> Ellipsoid {
        self.region().scaled(self.alpha)
    }
}

fn stage_cost(
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    model: &SubsystemModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> f64 {
    let ex = x - model.target();
    let eu = u - model.target_input();
    ex.dot(&(q * &ex)) + eu.dot(&(r * &eu))
}

fn unit_directions(n: usize, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count + 2 * n);
    for i in 0..n {
        for s in [1.0, -1.0] {
            let mut e = DVector::zeros(n);
            e[i] = s;
            out.push(e);
        }
    }
    while out.len() < count + 2 * n {
        let v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let norm = v.norm();
        if norm > 1e-3 && norm <= 1.0 {
            out.push(v / norm);
        }
    }
    out
}

/// Sampled invariance, decrease and input admissibility on the given points.
struct SampleReport {
    worst_invariance: f64,
    worst_decrease: f64,
    worst_input: f64,
}

fn evaluate_samples(
    ing: &TerminalIngredients,
    model: &SubsystemModel,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    input_set: &InputSet,
    points: &[DVector<f64>],
) -> Result<SampleReport, TerminalError> {
    let mut rep = SampleReport {
        worst_invariance: f64::NEG_INFINITY,
        worst_decrease: f64::NEG_INFINITY,
        worst_input: f64::NEG_INFINITY,
    };
    for x in points {
        let u = ing.aux_input(x);
        let next = model.step(x, &u)?;
        rep.worst_invariance = rep.worst_invariance.max(ing.cost(&next) - ing.level);
        let decrease = ing.cost(&next) + stage_cost(q, r, model, x, &u) - ing.cost(x);
        rep.worst_decrease = rep.worst_decrease.max(decrease);
        rep.worst_input = rep.worst_input.max(input_set.violation(&u));
    }
    Ok(rep)
}

/// Exact input check over the ellipsoid for linear feedback:
/// `aᵀu_ξ + sqrt(level · aK P⁻¹ Kᵀaᵀ) ≤ b` for every input half-space.
fn inputs_admissible(
    ing: &TerminalIngredients,
    input_set: &InputSet,
    p_inv: &DMatrix<f64>,
) -> bool {
    let (rows, rhs) = input_set.halfspaces();
    rows.iter().zip(&rhs).all(|(row, b)| {
        let a = DVector::from_column_slice(row);
        let ak = ing.k.transpose() * &a;
        let spread = (ing.level * ak.dot(&(p_inv * &ak))).max(0.0).sqrt();
        a.dot(&ing.target_input) + spread <= *b + 1e-12
    })
}

/// Robust state and coupled constraints over `α · X^f`. The neighbor's
/// enlarged terminal set is assumed to have the same shape around its own
/// target, which splits the coupled margin evenly between both sides.
fn constraints_hold_on_enlarged(
    ing: &TerminalIngredients,
    state_constraints: &[StateConstraint],
    coupled: &[CoupledContext],
) -> Result<bool, TerminalError> {
    let own = ing.enlarged_region();
    for h in state_constraints {
        if !check_robust_state(h, Region::Ellipsoid(&own))? {
            return Ok(false);
        }
    }
    for ctx in coupled {
        let other = Ellipsoid::new(ctx.neighbor_target.clone(), ing.p.clone(), own.level())?;
        if !check_robust_coupled(
            &ctx.constraint,
            Region::Ellipsoid(&own),
            Region::Ellipsoid(&other),
        )? {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Riccati design at the target plus the largest sampled-valid terminal
/// level in `[1e−6, gamma_hi]`.
pub fn design_terminal(
    model: &SubsystemModel,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    input_set: &InputSet,
    state_constraints: &[StateConstraint],
    coupled: &[CoupledContext],
    config: &TerminalConfig,
) -> Result<TerminalIngredients, TerminalError> {
    const GAMMA_LO: f64 = 1e-6;
    if !(config.alpha > 1.0) {
        return Err(TerminalError::Validation(format!(
            "alpha must exceed 1, got {}",
            config.alpha
        )));
    }
    let n = model.n();
    let (a, b) = model.linearize(model.target(), model.target_input())?;
    let (p, k) = solve_dare(&a, &b, q, &(r * config.kappa_f.max(1.0)))?;
    let rho = spectral_radius(&(&a + &b * &k));
    if rho >= 1.0 {
        return Err(TerminalError::Validation(format!(
            "closed-loop spectral radius {rho} ≥ 1"
        )));
    }
    let p_inv = p
        .clone()
        .try_inverse()
        .ok_or(TerminalError::NotStabilizable)?;
    let template = TerminalIngredients {
        p,
        k,
        level: GAMMA_LO,
        alpha: config.alpha,
        target: model.target().clone(),
        target_input: model.target_input().clone(),
    };
    let dirs = unit_directions(n, config.boundary_samples_per_dim * n, config.seed);
    let valid = |level: f64| -> Result<bool, TerminalError> {
        let ing = TerminalIngredients {
            level,
            ..template.clone()
        };
        if !inputs_admissible(&ing, input_set, &p_inv) {
            return Ok(false);
        }
        if !constraints_hold_on_enlarged(&ing, state_constraints, coupled)? {
            return Ok(false);
        }
        let region = ing.region();
        let pts: Vec<DVector<f64>> = dirs.iter().map(|d| region.boundary_point(d)).collect();
        let rep = evaluate_samples(&ing, model, q, r, input_set, &pts)?;
        Ok(rep.worst_invariance <= 0.0 && rep.worst_decrease <= 1e-8 && rep.worst_input <= 1e-9)
    };

    let level = if valid(config.gamma_hi)? {
        config.gamma_hi
    } else if !valid(GAMMA_LO)? {
        return Err(TerminalError::NoValidLevel {
            lo: GAMMA_LO,
            hi: config.gamma_hi,
        });
    } else {
        let (mut lo, mut hi) = (GAMMA_LO.ln(), config.gamma_hi.ln());
        while hi - lo > 1e-7 {
            let mid = 0.5 * (lo + hi);
            if valid(mid.exp())? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo.exp()
    };
    let ing = TerminalIngredients { level, ..template };
    validate_terminal(&ing, model, q, r, input_set, config.seed.wrapping_add(1))?;
    Ok(ing)
}

/// Independent sampled validation on 100 boundary and interior points.
pub fn validate_terminal(
    ing: &TerminalIngredients,
    model: &SubsystemModel,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    input_set: &InputSet,
    seed: u64,
) -> Result<(), TerminalError> {
    let n = model.n();
    let region = ing.region();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs = unit_directions(n, 100, seed);
    let pts: Vec<DVector<f64>> = dirs
        .iter()
        .take(100)
        .enumerate()
        .map(|(i, d)| {
            let shrink = if i % 2 == 0 {
                1.0
            } else {
                rng.random_range(0.0..1.0f64).sqrt()
            };
            let bp = region.boundary_point(d);
            &ing.target + (bp - &ing.target) * shrink
        })
        .collect();
    let rep = evaluate_samples(ing, model, q, r, input_set, &pts)?;
    if rep.worst_invariance > 0.0 {
        return Err(TerminalError::Validation(format!(
            "terminal set not invariant: worst excess {:e}",
            rep.worst_invariance
        )));
    }
    if rep.worst_decrease > 1e-8 {
        return Err(TerminalError::Validation(format!(
            "terminal cost does not decrease: worst excess {:e}",
            rep.worst_decrease
        )));
    }
    if rep.worst_input > 1e-9 {
        return Err(TerminalError::Validation(format!(
            "auxiliary input leaves the input set by {:e}",
            rep.worst_input
        )));
    }
    Ok(())
}

/// Checks `X^f ⊕ C ⊆ α X^f`, which for a centered ellipsoid is equivalent to
/// `C ⊆ (α − 1) X^f`. Coordinates along which `C` is unbounded are projected
/// out (the check then applies to the marginal on the bounded coordinates,
/// and a warning is logged).
pub fn check_enlarged_terminal(
    ing: &TerminalIngredients,
    c: &ConsistencySet<f64>,
) -> Result<bool, TerminalError> {
    let n = ing.target.len();
    let bounded = c.bounded_coords()?;
    if bounded.is_empty() {
        return Err(TerminalError::UnboundedOffset);
    }
    let shape = if bounded.len() == n {
        ing.p.clone()
    } else {
        log::info!(
            "consistency set unbounded in {} of {} coordinates; checking the enlarged terminal set on the projection onto {:?}",
            n - bounded.len(),
            n,
            bounded
        );
        ing.region().projected_shape(&bounded)
    };
    let limit = (ing.alpha - 1.0).powi(2) * ing.level;
    for v in c.extreme_offsets(&bounded)? {
        let vb = DVector::from_iterator(bounded.len(), bounded.iter().map(|&d| v[d]));
        if vb.dot(&(&shape * &vb)) > limit * (1.0 + 1e-12) {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoxSet;
    use crate::model::Dynamics;

    fn m1(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn dare_golden_ratio() {
        let (p, k) = solve_dare(&m1(1.0), &m1(1.0), &m1(1.0), &m1(1.0)).unwrap();
        let golden = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((p[(0, 0)] - golden).abs() < 1e-9);
        assert!((k[(0, 0)] + golden / (1.0 + golden)).abs() < 1e-9);
    }

    #[test]
    fn dare_lyapunov_limit_and_deadbeat() {
        let (p, _) = solve_dare(&m1(0.5), &m1(1.0), &m1(1.0), &m1(1e8)).unwrap();
        assert!((p[(0, 0)] - 4.0 / 3.0).abs() < 1e-6);
        let (p, k) = solve_dare(&m1(0.0), &m1(1.0), &m1(2.0), &m1(1.0)).unwrap();
        assert_eq!(p[(0, 0)], 2.0);
        assert_eq!(k[(0, 0)], 0.0);
    }

    #[test]
    fn dare_in_f32() {
        let one = DMatrix::from_element(1, 1, 1.0f32);
        let (p, _) = solve_dare(&one, &one, &one, &one).unwrap();
        assert!((p[(0, 0)] - 1.618_034f32).abs() < 1e-5);
    }

    #[test]
    fn dare_detects_unstabilizable() {
        let err = solve_dare(&m1(2.0), &m1(0.0), &m1(1.0), &m1(1.0)).unwrap_err();
        assert_eq!(err, TerminalError::NotStabilizable);
    }

    #[test]
    fn enlarged_terminal_examples() {
        let ing = TerminalIngredients {
            p: m1(1.0),
            k: m1(-0.5),
            level: 1.0,
            alpha: 1.2,
            target: DVector::zeros(1),
            target_input: DVector::zeros(1),
        };
        let zero = ConsistencySet::Box(BoxSet::point(&[0.0]));
        assert!(check_enlarged_terminal(&ing, &zero).unwrap());
        let c = ConsistencySet::Box(BoxSet::symmetric(&[0.1]).unwrap());
        assert!(check_enlarged_terminal(&ing, &c).unwrap());
        let c = ConsistencySet::Box(BoxSet::symmetric(&[0.3]).unwrap());
        assert!(!check_enlarged_terminal(&ing, &c).unwrap());
        let c = ConsistencySet::Box(BoxSet::symmetric(&[f64::INFINITY]).unwrap());
        assert_eq!(
            check_enlarged_terminal(&ing, &c),
            Err(TerminalError::UnboundedOffset)
        );
    }

    #[test]
    fn scalar_integrator_design() {
        let model = SubsystemModel::new(
            Dynamics::scalar_integrator(),
            1.0,
            DVector::zeros(1),
            DVector::zeros(1),
        )
        .unwrap();
        let u = InputSet::Box(BoxSet::symmetric(&[1.0]).unwrap());
        let h = StateConstraint::linear(
            DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            DVector::from_vec(vec![1.0, 1.0]),
        )
        .unwrap();
        let ing = design_terminal(
            &model,
            &m1(1.0),
            &m1(1.0),
            &u,
            std::slice::from_ref(&h),
            &[],
            &TerminalConfig::default(),
        )
        .unwrap();
        let golden = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((ing.p[(0, 0)] - golden).abs() < 1e-9);
        // |K x| ≤ 1 and 1.1·|x| ≤ 1 on the boundary
        let edge = (ing.level / golden).sqrt();
        assert!(ing.k[(0, 0)].abs() * edge <= 1.0 + 1e-9);
        assert!(1.1 * edge <= 1.0 + 1e-6);
        // maximal: the α-inflated state bound is the active limit
        assert!(1.1 * edge > 0.999);

        // target on the constraint boundary leaves no room
        let model = model
            .with_target(DVector::from_element(1, 1.0), DVector::zeros(1))
            .unwrap();
        let err = design_terminal(
            &model,
            &m1(1.0),
            &m1(1.0),
            &u,
            &[h],
            &[],
            &TerminalConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, TerminalError::NoValidLevel { .. }));
    }
}
