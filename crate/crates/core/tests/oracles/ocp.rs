//! Local optimal control problems against independent references: grid
//! search on a scalar integrator, the scalar Riccati fixed point, and
//! finite-difference first-order conditions on the robot model.

use dmpc_core::constraints::InputSet;
use dmpc_core::geometry::BoxSet;
use dmpc_core::model::{Dynamics, OmniRobot, OmniRobotParams, SubsystemModel};
use dmpc_core::ocp::{
    solve, LocalOcp, SolveStatus, SolverConfig, StageConstraint, StageConstraintKind,
    TrajectoryBundle,
};
use dmpc_core::terminal::{solve_dare, TerminalIngredients};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn v1(x: f64) -> DVector<f64> {
    DVector::from_element(1, x)
}

#[derive(Debug, Clone, Copy)]
pub struct ScalarCase {
    pub x0: f64,
    pub p: f64,
    pub level: f64,
    pub umax: f64,
    /// `x_1 ≤ cap`
    pub cap: Option<f64>,
}

fn scalar_problem(c: &ScalarCase) -> LocalOcp {
    let model = SubsystemModel::new(Dynamics::scalar_integrator(), 1.0, v1(0.0), v1(0.0)).unwrap();
    LocalOcp {
        model,
        q: DMatrix::identity(1, 1),
        r: DMatrix::identity(1, 1),
        horizon: 2,
        consistency: None,
        input_set: InputSet::Box(BoxSet::symmetric(&[c.umax]).unwrap()),
        terminal: TerminalIngredients {
            p: DMatrix::from_element(1, 1, c.p),
            k: DMatrix::from_element(1, 1, -0.5),
            level: c.level,
            alpha: 1.1,
            target: v1(0.0),
            target_input: v1(0.0),
        },
        extra: c
            .cap
            .map(|cap| StageConstraint {
                stage: 1,
                kind: StageConstraintKind::Linear {
                    normal: v1(1.0),
                    rhs: cap,
                },
                soft_weight: None,
            })
            .into_iter()
            .collect(),
    }
}

/// Grid over `(u0, u1)`, refined four times around the best point.
pub fn grid_oracle(c: &ScalarCase) -> Option<f64> {
    let cost = |u0: f64, u1: f64| {
        if u0.abs() > c.umax || u1.abs() > c.umax {
            return None;
        }
        let x1 = c.x0 + u0;
        let x2 = x1 + u1;
        if c.cap.is_some_and(|cap| x1 > cap) || c.p * x2 * x2 > c.level {
            return None;
        }
        Some(c.x0 * c.x0 + u0 * u0 + x1 * x1 + u1 * u1 + c.p * x2 * x2)
    };
    let steps = 400;
    let mut center = (0.0, 0.0);
    let mut half = c.umax;
    let mut best: Option<(f64, f64, f64)> = None;
    for _ in 0..5 {
        for i in 0..=steps {
            for j in 0..=steps {
                let u0 = center.0 - half + 2.0 * half * i as f64 / steps as f64;
                let u1 = center.1 - half + 2.0 * half * j as f64 / steps as f64;
                if let Some(f) = cost(u0, u1) {
                    if best.is_none_or(|b| f < b.0) {
                        best = Some((f, u0, u1));
                    }
                }
            }
        }
        let b = best?;
        center = (b.1, b.2);
        half *= 8.0 / steps as f64;
    }
    best.map(|b| b.0)
}

#[derive(Debug, Clone, Default)]
pub struct GridReport {
    pub instances: usize,
    /// Largest `|J_solver − J_grid| / (1 + J_grid)`.
    pub max_gap: f64,
    /// Largest amount by which the solver undercuts the grid, relative.
    pub max_undercut: f64,
    /// Instances with a nonzero inequality multiplier.
    pub active: usize,
    pub failures: Vec<String>,
}

pub fn scalar_grid(seed: u64, instances: usize) -> GridReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = GridReport::default();
    while rep.instances < instances {
        let c = ScalarCase {
            x0: rng.random_range(-2.0..2.0),
            p: rng.random_range(1.0..3.0),
            level: rng.random_range(0.01..2.0),
            umax: rng.random_range(0.5..2.0),
            cap: rng.random_bool(0.5).then(|| rng.random_range(-0.5..1.0)),
        };
        let Some(oracle) = grid_oracle(&c) else {
            continue;
        };
        rep.instances += 1;
        let ocp = scalar_problem(&c);
        let x0 = v1(c.x0);
        let warm = TrajectoryBundle::stationary(1, 0, &x0, &v1(0.0), 2);
        match solve(&ocp, &x0, &warm, &SolverConfig::default()) {
            Ok(sol) => {
                rep.max_gap = rep.max_gap.max((sol.cost - oracle).abs() / (1.0 + oracle));
                rep.max_undercut = rep.max_undercut.max((oracle - sol.cost) / (1.0 + oracle));
                if sol.ineq_multipliers.iter().any(|m| *m > 1e-6) {
                    rep.active += 1;
                }
            }
            Err(e) => rep.failures.push(format!("{c:?}: {e}")),
        }
    }
    rep
}

/// Errors of the DARE solution for `a = b = q = r = 1` against
/// `(1 + √5)/2`, in f64 and in f32.
pub fn golden_ratio_errors() -> (f64, f64) {
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    let one = DMatrix::from_element(1, 1, 1.0f64);
    let (p, _) = solve_dare(&one, &one, &one, &one).unwrap();
    let one32 = DMatrix::from_element(1, 1, 1.0f32);
    let (p32, _) = solve_dare(&one32, &one32, &one32, &one32).unwrap();
    (
        (p[(0, 0)] - golden).abs(),
        (p32[(0, 0)] as f64 - golden).abs(),
    )
}

fn robot_problem(rng: &mut ChaCha8Rng) -> (LocalOcp, DVector<f64>) {
    let robot = OmniRobot::new(OmniRobotParams {
        body_radius: rng.random_range(0.1..0.3),
        wheel_radius: rng.random_range(0.03..0.1),
    })
    .unwrap();
    let target = DVector::from_vec(vec![
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        0.0,
    ]);
    let dt = rng.random_range(0.1..0.4);
    let model = SubsystemModel::new(
        Dynamics::OmniRobot(robot),
        dt,
        target.clone(),
        DVector::zeros(3),
    )
    .unwrap();
    let q = DMatrix::from_diagonal(&DVector::from_fn(3, |_, _| rng.random_range(0.5..5.0)));
    let r = DMatrix::identity(3, 3) * rng.random_range(0.01..0.5);
    let (a, b) = model.linearize(&target, &DVector::zeros(3)).unwrap();
    let (p, k) = solve_dare(&a, &b, &q, &r).unwrap();
    let umax = rng.random_range(8.0..30.0);
    let mut extra = Vec::new();
    if rng.random_bool(0.5) {
        // stage 2 must already be within some radius of the target
        extra.push(StageConstraint {
            stage: 2,
            kind: StageConstraintKind::MaxDistance {
                slice: vec![0, 1],
                other: target.clone(),
                max: rng.random_range(0.6..2.0),
            },
            soft_weight: None,
        });
    }
    let ocp = LocalOcp {
        model,
        q,
        r,
        horizon: rng.random_range(3..8),
        consistency: None,
        input_set: InputSet::Box(BoxSet::symmetric(&[umax; 3]).unwrap()),
        terminal: TerminalIngredients {
            p,
            k,
            level: rng.random_range(0.05..50.0),
            alpha: 1.1,
            target,
            target_input: DVector::zeros(3),
        },
        extra,
    };
    let x0 = DVector::from_vec(vec![
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-0.5..0.5),
    ]);
    (ocp, x0)
}

#[derive(Debug, Clone, Default)]
pub struct FdKktReport {
    pub instances: usize,
    pub skipped: usize,
    /// Largest finite-difference Lagrangian gradient entry divided by
    /// `max(1, largest objective gradient or multiplier entry)`.
    pub max_stationarity: f64,
    pub max_primal: f64,
    pub min_multiplier: f64,
    pub max_complementarity: f64,
}

impl FdKktReport {
    pub fn worst(&self) -> f64 {
        self.max_stationarity
            .max(self.max_primal)
            .max(-self.min_multiplier)
            .max(self.max_complementarity)
    }
}

/// Solves random robot problems and checks the first-order conditions with
/// central differences of `J + λᵀc + μᵀg`, independent of the solver's own
/// derivatives. Instances the solver cannot solve to optimality are skipped
/// and counted.
pub fn finite_difference_kkt(seed: u64, instances: usize) -> FdKktReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = FdKktReport::default();
    while rep.instances < instances && rep.skipped < 10 * instances {
        let (ocp, x0) = robot_problem(&mut rng);
        let warm = TrajectoryBundle::stationary(1, 0, &x0, &DVector::zeros(3), ocp.horizon);
        let sol = match solve(&ocp, &x0, &warm, &SolverConfig::default()) {
            Ok(sol) if sol.status == SolveStatus::Optimal => sol,
            _ => {
                rep.skipped += 1;
                continue;
            }
        };
        let nlp = ocp.nlp(&x0);
        let w = &sol.decision;
        let lambda = &sol.eq_multipliers;
        let mu = &sol.ineq_multipliers;
        let lagrangian = |w: &DVector<f64>| {
            nlp.objective(w)
                + lambda.dot(&nlp.equalities(w).unwrap())
                + mu.dot(&nlp.inequalities(w).unwrap())
        };
        let mut grad: f64 = 0.0;
        for i in 0..w.len() {
            let h = 1e-6 * (1.0 + w[i].abs());
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[i] += h;
            wm[i] -= h;
            grad = grad.max(((lagrangian(&wp) - lagrangian(&wm)) / (2.0 * h)).abs());
        }
        let scale = nlp
            .objective_gradient(w)
            .amax()
            .max(lambda.amax())
            .max(mu.amax())
            .max(1.0);
        let g = nlp.inequalities(w).unwrap();
        let comp = g
            .iter()
            .zip(mu.iter())
            .map(|(a, b)| (a * b).abs())
            .fold(0.0, f64::max);
        rep.max_stationarity = rep.max_stationarity.max(grad / scale);
        rep.max_primal = rep
            .max_primal
            .max(nlp.equalities(w).unwrap().amax())
            .max(g.max());
        rep.min_multiplier = rep.min_multiplier.min(mu.min());
        rep.max_complementarity = rep.max_complementarity.max(comp / scale);
        rep.instances += 1;
    }
    rep
}
