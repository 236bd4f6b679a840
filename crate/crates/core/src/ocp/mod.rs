//! Local optimal control problem: tracking cost, multiple-shooting dynamics,
//! consistency, input and terminal constraints, plus the shifted candidate
//! trajectory used for warm starts.

mod sqp;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{ConstraintError, InputSet, StateConstraint};
use crate::geometry::{ConsistencySet, ConvexSet, GeometryError, EPS_SET};
use crate::model::{ModelError, SubsystemModel};
use crate::qp::QpError;
use crate::terminal::TerminalIngredients;

pub use sqp::solve;

/// Dynamics tolerance on returned and candidate trajectories.
pub const EPS_DYN: f64 = 1e-7;
/// Input-set tolerance on returned trajectories.
pub const EPS_INPUT: f64 = 1e-8;
/// Tolerance on the terminal sublevel value.
pub const EPS_TERMINAL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OcpError {
    #[error("local problem infeasible: {0}")]
    Infeasible(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("previous terminal state is outside the terminal set (excess {0:e})")]
    TerminalViolation(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Qp(#[from] QpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BundleKind {
    Initial,
    Reference,
    Optimal,
    Candidate,
}

/// States `x[k|k] … x[k+N|k]` and inputs `u[k|k] … u[k+N−1|k]` of one agent.
/// Reference bundles carry no inputs and need not satisfy the dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBundle {
    pub agent: usize,
    pub time_step: u64,
    pub kind: BundleKind,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

impl TrajectoryBundle {
    pub fn horizon(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    /// `max_κ ‖x[κ+1] − f(x[κ], u[κ])‖∞`.
    pub fn dynamics_residual(&self, model: &SubsystemModel) -> Result<f64, OcpError> {
        if self.inputs.len() + 1 != self.states.len() {
            return Err(OcpError::DimensionMismatch(format!(
                "{} states but {} inputs",
                self.states.len(),
                self.inputs.len()
            )));
        }
        let mut worst: f64 = 0.0;
        for k in 0..self.inputs.len() {
            let next = model.step(&self.states[k], &self.inputs[k])?;
            worst = worst.max((next - &self.states[k + 1]).amax());
        }
        Ok(worst)
    }

    /// Reference bundle built from the given states.
    pub fn reference(agent: usize, time_step: u64, states: Vec<DVector<f64>>) -> Self {
        Self {
            agent,
            time_step,
            kind: BundleKind::Reference,
            states,
            inputs: Vec::new(),
        }
    }

    /// Bundle holding the model at rest in `x` for `horizon` steps.
    pub fn stationary(
        agent: usize,
        time_step: u64,
        x: &DVector<f64>,
        u: &DVector<f64>,
        horizon: usize,
    ) -> Self {
        Self {
            agent,
            time_step,
            kind: BundleKind::Initial,
            states: vec![x.clone(); horizon + 1],
            inputs: vec![u.clone(); horizon],
        }
    }
}

/// Which curvature the SQP uses for the dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    /// Exact Lagrangian Hessian (finite-differenced), convexified per stage.
    Exact,
    /// Cost and constraint curvature only.
    GaussNewton,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub sqp_max_iter: usize,
    pub kkt_tol: f64,
    pub step_tol: f64,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
    /// Backtracking factor of the line search.
    pub ls_beta: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    pub hessian: HessianMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            sqp_max_iter: 50,
            kkt_tol: 1e-6,
            step_tol: 1e-8,
            qp_tol: 1e-8,
            qp_max_iter: 5000,
            ls_beta: 0.5,
            armijo: 1e-4,
            hessian: HessianMode::Exact,
        }
    }
}

/// Extra pointwise constraint on the state at one stage, used by the
/// initialization problem and by the sequential baseline.
#[derive(Debug, Clone)]
pub struct StageConstraint {
    /// Stage index relative to the current time, `1..=N`.
    pub stage: usize,
    pub kind: StageConstraintKind,
    /// `Some(w)` turns the constraint into an ℓ1 penalty with weight `w`.
    pub soft_weight: Option<f64>,
}

#[derive(Debug, Clone)]
pub enum StageConstraintKind {
    /// `normalᵀx ≤ rhs`.
    Linear { normal: DVector<f64>, rhs: f64 },
    /// `‖x_S − other_S‖₂ ≤ max`.
    MaxDistance {
        slice: Vec<usize>,
        other: DVector<f64>,
        max: f64,
    },
    /// `h(x) + margin ≤ 0` componentwise.
    State {
        constraint: Arc<StateConstraint>,
        margin: f64,
    },
}

impl StageConstraintKind {
    fn len(&self) -> usize {
        match self {
            Self::Linear { .. } | Self::MaxDistance { .. } => 1,
            Self::State { constraint, .. } => match constraint.as_ref() {
                StateConstraint::Linear { h, .. } => h.nrows(),
                StateConstraint::Nonlinear {
                    state_dim, eval, ..
                } => eval(&DVector::zeros(*state_dim)).len(),
            },
        }
    }

    /// Values and state gradients of every component.
    fn eval(&self, x: &DVector<f64>) -> Result<Vec<(f64, DVector<f64>)>, OcpError> {
        Ok(match self {
            Self::Linear { normal, rhs } => vec![(normal.dot(x) - rhs, normal.clone())],
            Self::MaxDistance { slice, other, max } => {
                let mut grad = DVector::zeros(x.len());
                let d = slice
                    .iter()
                    .map(|&k| (x[k] - other[k]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if d > 1e-12 {
                    for &k in slice {
                        grad[k] = (x[k] - other[k]) / d;
                    }
                }
                vec![(d - max, grad)]
            }
            Self::State { constraint, margin } => {
                let v = constraint.eval(x)?;
                let jac = constraint.jacobian(x)?;
                (0..v.len())
                    .map(|i| (v[i] + margin, jac.row(i).transpose()))
                    .collect()
            }
        })
    }

    /// Curvature `∇²g` of a single-component constraint, if it has any.
    fn curvature(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        match self {
            Self::MaxDistance { slice, other, .. } => {
                let n = x.len();
                let d = slice
                    .iter()
                    .map(|&k| (x[k] - other[k]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if d <= 1e-9 {
                    return None;
                }
                let mut h = DMatrix::zeros(n, n);
                for &a in slice {
                    for &b in slice {
                        let na = (x[a] - other[a]) / d;
                        let nb = (x[b] - other[b]) / d;
                        h[(a, b)] = (if a == b { 1.0 } else { 0.0 } - na * nb) / d;
                    }
                }
                Some(h)
            }
            _ => None,
        }
    }
}

/// Consistency constraint `x[κ] ∈ reference[κ] ⊕ set` for `κ = 0..N−1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Consistency {
    pub reference: Vec<DVector<f64>>,
    pub set: ConsistencySet<f64>,
}

#[derive(Debug, Clone)]
pub struct LocalOcp {
    pub model: SubsystemModel,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub horizon: usize,
    pub consistency: Option<Consistency>,
    pub input_set: InputSet,
    pub terminal: TerminalIngredients,
    pub extra: Vec<StageConstraint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    MaxIterFeasible,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub bundle: TrajectoryBundle,
    pub cost: f64,
    /// Scaled first-order residual, see [`KktReport::scaled`].
    pub kkt_residual: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    /// Multipliers in the layout of [`Nlp::equalities`] / [`Nlp::inequalities`].
    pub eq_multipliers: DVector<f64>,
    pub ineq_multipliers: DVector<f64>,
    /// Decision vector the multipliers belong to.
    pub decision: DVector<f64>,
}

impl OcpSolution {
    /// Applied input `μ(x) = u*[k|k]`.
    pub fn first_input(&self) -> &DVector<f64> {
        &self.bundle.inputs[0]
    }
}

/// `Σ_{κ<N} ‖x−ξ‖_Q + ‖u−u_ξ‖_R + ‖x_N−ξ‖_P` with `‖v‖_M = vᵀMv`.
pub fn evaluate_cost(ocp: &LocalOcp, bundle: &TrajectoryBundle) -> Result<f64, OcpError> {
    let n = ocp.model.n();
    let m = ocp.model.m();
    if bundle.states.len() != bundle.inputs.len() + 1
        || bundle.states.iter().any(|x| x.len() != n)
        || bundle.inputs.iter().any(|u| u.len() != m)
    {
        return Err(OcpError::DimensionMismatch(
            "bundle does not match the problem".into(),
        ));
    }
    let target = ocp.model.target();
    let ui = ocp.model.target_input();
    let mut cost = 0.0;
    for (x, u) in bundle.states.iter().zip(&bundle.inputs) {
        let ex = x - target;
        let eu = u - ui;
        cost += ex.dot(&(&ocp.q * &ex)) + eu.dot(&(&ocp.r * &eu));
    }
    cost += ocp
        .terminal
        .cost(bundle.states.last().expect("nonempty bundle"));
    Ok(cost)
}

/// Shifted continuation of a feasible trajectory closed by the auxiliary
/// feedback: `x[κ] = prev.x[κ+1]`, `x[N] = f(prev.x[N], k_aux(prev.x[N]))`.
pub fn build_candidate(
    prev: &TrajectoryBundle,
    terminal: &TerminalIngredients,
    model: &SubsystemModel,
) -> Result<TrajectoryBundle, OcpError> {
    let n_h = prev.horizon();
    if n_h == 0 || prev.inputs.len() != n_h {
        return Err(OcpError::DimensionMismatch(
            "candidate needs a full previous trajectory".into(),
        ));
    }
    let last = &prev.states[n_h];
    let excess = terminal.cost(last) - terminal.level;
    if excess > EPS_TERMINAL {
        return Err(OcpError::TerminalViolation(excess));
    }
    let u_aux = terminal.aux_input(last);
    let x_new = model.step(last, &u_aux)?;
    let mut states: Vec<DVector<f64>> = prev.states[1..].to_vec();
    states.push(x_new);
    let mut inputs: Vec<DVector<f64>> = prev.inputs[1..].to_vec();
    inputs.push(u_aux);
    Ok(TrajectoryBundle {
        agent: prev.agent,
        time_step: prev.time_step + 1,
        kind: BundleKind::Candidate,
        states,
        inputs,
    })
}

/// Largest violation of the local constraints by a bundle starting at
/// `x0`; nonpositive (within tolerances) means feasible.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FeasibilityReport {
    pub initial_state: f64,
    pub dynamics: f64,
    pub consistency: f64,
    pub inputs: f64,
    pub terminal: f64,
    pub extra: f64,
}

impl FeasibilityReport {
    pub fn is_feasible(&self) -> bool {
        self.initial_state <= EPS_DYN
            && self.dynamics <= EPS_DYN
            && self.consistency <= EPS_SET
            && self.inputs <= EPS_INPUT
            && self.terminal <= EPS_TERMINAL
            && self.extra <= crate::constraints::EPS_CON
    }
}

impl LocalOcp {
    pub fn n(&self) -> usize {
        self.model.n()
    }

    pub fn m(&self) -> usize {
        self.model.m()
    }

    /// Violations of (initial state, dynamics, consistency, inputs, terminal,
    /// hard extra constraints). Soft constraints are not counted.
    pub fn feasibility(
        &self,
        x0: &DVector<f64>,
        bundle: &TrajectoryBundle,
    ) -> Result<FeasibilityReport, OcpError> {
        if bundle.states.len() != self.horizon + 1 || bundle.inputs.len() != self.horizon {
            return Err(OcpError::DimensionMismatch(format!(
                "bundle horizon {} but problem horizon {}",
                bundle.horizon(),
                self.horizon
            )));
        }
        let mut rep = FeasibilityReport {
            initial_state: (&bundle.states[0] - x0).amax(),
            dynamics: bundle.dynamics_residual(&self.model)?,
            ..Default::default()
        };
        let mut worst_c = f64::NEG_INFINITY;
        if let Some(c) = &self.consistency {
            for k in 0..self.horizon {
                let off = &bundle.states[k] - &c.reference[k];
                worst_c = worst_c.max(set_violation(&c.set, &off)?);
            }
        }
        rep.consistency = worst_c.max(0.0);
        rep.inputs = bundle
            .inputs
            .iter()
            .map(|u| self.input_set.violation(u))
            .fold(0.0, f64::max);
        rep.terminal =
            (self.terminal.cost(&bundle.states[self.horizon]) - self.terminal.level).max(0.0);
        let mut worst_e: f64 = 0.0;
        for e in self.extra.iter().filter(|e| e.soft_weight.is_none()) {
            for (v, _) in e.kind.eval(&bundle.states[e.stage])? {
                worst_e = worst_e.max(v);
            }
        }
        rep.extra = worst_e;
        Ok(rep)
    }

    pub fn nlp(&self, x0: &DVector<f64>) -> Nlp<'_> {
        Nlp::new(self, x0.clone())
    }
}

/// Largest constraint excess of `offset` with respect to a consistency set.
pub fn set_violation(set: &ConsistencySet<f64>, offset: &DVector<f64>) -> Result<f64, OcpError> {
    Ok(match set {
        ConsistencySet::Box(b) => (0..b.dim())
            .map(|d| (offset[d] - b.upper()[d]).max(b.lower()[d] - offset[d]))
            .fold(f64::NEG_INFINITY, f64::max),
        ConsistencySet::Poly(p) => {
            if p.dim() != offset.len() {
                return Err(OcpError::DimensionMismatch("consistency set".into()));
            }
            p.rows()
                .iter()
                .zip(p.rhs())
                .map(|(row, b)| {
                    row.iter()
                        .zip(offset.iter())
                        .map(|(a, x)| a * x)
                        .sum::<f64>()
                        - b
                })
                .fold(f64::NEG_INFINITY, f64::max)
        }
    })
}

/// One inequality `g(w) ≤ 0` linearized at `w`: value and sparse gradient.
#[derive(Debug, Clone)]
pub struct InequalityRow {
    pub value: f64,
    pub gradient: Vec<(usize, f64)>,
}

/// Multiple-shooting transcription of a [`LocalOcp`] for a fixed initial
/// state. Decision vector: `[u0, x1, u1, x2, …, u_{N−1}, x_N, slacks]`.
pub struct Nlp<'a> {
    pub ocp: &'a LocalOcp,
    pub x0: DVector<f64>,
    /// Soft extra constraints: (index into `ocp.extra`, component, slack index).
    soft: Vec<(usize, usize, usize)>,
}

impl<'a> Nlp<'a> {
    fn new(ocp: &'a LocalOcp, x0: DVector<f64>) -> Self {
        let mut soft = Vec::new();
        let base = ocp.horizon * (ocp.n() + ocp.m());
        for (i, e) in ocp.extra.iter().enumerate() {
            if e.soft_weight.is_some() {
                for c in 0..e.kind.len() {
                    soft.push((i, c, base + soft.len()));
                }
            }
        }
        Self { ocp, x0, soft }
    }

    pub fn num_vars(&self) -> usize {
        self.ocp.horizon * (self.ocp.n() + self.ocp.m()) + self.soft.len()
    }

    pub fn num_slacks(&self) -> usize {
        self.soft.len()
    }

    pub fn input_index(&self, k: usize) -> usize {
        k * (self.ocp.n() + self.ocp.m())
    }

    /// Offset of `x_k`, `k ≥ 1`.
    pub fn state_index(&self, k: usize) -> usize {
        debug_assert!(k >= 1);
        k * (self.ocp.n() + self.ocp.m()) - self.ocp.n()
    }

    pub fn state(&self, w: &DVector<f64>, k: usize) -> DVector<f64> {
        if k == 0 {
            self.x0.clone()
        } else {
            w.rows(self.state_index(k), self.ocp.n()).into_owned()
        }
    }

    pub fn input(&self, w: &DVector<f64>, k: usize) -> DVector<f64> {
        w.rows(self.input_index(k), self.ocp.m()).into_owned()
    }

    /// Decision vector of a bundle; slacks are set to the smallest
    /// admissible values.
    pub fn pack(&self, bundle: &TrajectoryBundle) -> Result<DVector<f64>, OcpError> {
        let (n, m) = (self.ocp.n(), self.ocp.m());
        if bundle.states.len() != self.ocp.horizon + 1 || bundle.inputs.len() != self.ocp.horizon {
            return Err(OcpError::DimensionMismatch("warm start horizon".into()));
        }
        let mut w = DVector::zeros(self.num_vars());
        for k in 0..self.ocp.horizon {
            if bundle.inputs[k].len() != m || bundle.states[k + 1].len() != n {
                return Err(OcpError::DimensionMismatch(
                    "warm start vector sizes".into(),
                ));
            }
            w.rows_mut(self.input_index(k), m)
                .copy_from(&bundle.inputs[k]);
            w.rows_mut(self.state_index(k + 1), n)
                .copy_from(&bundle.states[k + 1]);
        }
        for &(e, c, s) in &self.soft {
            let extra = &self.ocp.extra[e];
            let v = extra.kind.eval(&bundle.states[extra.stage])?[c].0;
            w[s] = v.max(0.0);
        }
        Ok(w)
    }

    pub fn unpack(
        &self,
        w: &DVector<f64>,
        agent: usize,
        time_step: u64,
        kind: BundleKind,
    ) -> TrajectoryBundle {
        TrajectoryBundle {
            agent,
            time_step,
            kind,
            states: (0..=self.ocp.horizon).map(|k| self.state(w, k)).collect(),
            inputs: (0..self.ocp.horizon).map(|k| self.input(w, k)).collect(),
        }
    }

    /// Tracking cost plus slack penalties.
    pub fn objective(&self, w: &DVector<f64>) -> f64 {
        let ocp = self.ocp;
        let target = ocp.model.target();
        let ui = ocp.model.target_input();
        let mut cost = 0.0;
        for k in 0..ocp.horizon {
            let ex = self.state(w, k) - target;
            let eu = self.input(w, k) - ui;
            cost += ex.dot(&(&ocp.q * &ex)) + eu.dot(&(&ocp.r * &eu));
        }
        cost += ocp.terminal.cost(&self.state(w, ocp.horizon));
        for &(e, _, s) in &self.soft {
            let weight = ocp.extra[e].soft_weight.unwrap_or(0.0);
            cost += weight * w[s] + SLACK_REGULARIZATION * weight * w[s] * w[s];
        }
        cost
    }

    /// Tracking cost without slack penalties.
    pub fn tracking_cost(&self, w: &DVector<f64>) -> f64 {
        let ocp = self.ocp;
        let target = ocp.model.target();
        let ui = ocp.model.target_input();
        let mut cost = 0.0;
        for k in 0..ocp.horizon {
            let ex = self.state(w, k) - target;
            let eu = self.input(w, k) - ui;
            cost += ex.dot(&(&ocp.q * &ex)) + eu.dot(&(&ocp.r * &eu));
        }
        cost + ocp.terminal.cost(&self.state(w, ocp.horizon))
    }

    pub fn objective_gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        let ocp = self.ocp;
        let mut g = DVector::zeros(self.num_vars());
        let target = ocp.model.target();
        let ui = ocp.model.target_input();
        for k in 0..ocp.horizon {
            let eu = self.input(w, k) - ui;
            g.rows_mut(self.input_index(k), ocp.m())
                .copy_from(&(&ocp.r * eu * 2.0));
            if k >= 1 {
                let ex = self.state(w, k) - target;
                g.rows_mut(self.state_index(k), ocp.n())
                    .copy_from(&(&ocp.q * ex * 2.0));
            }
        }
        let ex = self.state(w, ocp.horizon) - target;
        g.rows_mut(self.state_index(ocp.horizon), ocp.n())
            .copy_from(&(&ocp.terminal.p * ex * 2.0));
        for &(e, _, s) in &self.soft {
            let weight = ocp.extra[e].soft_weight.unwrap_or(0.0);
            g[s] = weight + 2.0 * SLACK_REGULARIZATION * weight * w[s];
        }
        g
    }

    /// Dynamics defects `x_{k+1} − f(x_k, u_k)`, stacked.
    pub fn equalities(&self, w: &DVector<f64>) -> Result<DVector<f64>, OcpError> {
        let n = self.ocp.n();
        let mut out = DVector::zeros(self.ocp.horizon * n);
        for k in 0..self.ocp.horizon {
            let next = self.ocp.model.step(&self.state(w, k), &self.input(w, k))?;
            out.rows_mut(k * n, n)
                .copy_from(&(self.state(w, k + 1) - next));
        }
        Ok(out)
    }

    /// Inequalities `g(w) ≤ 0` with gradients, in a fixed order: input rows
    /// per stage, consistency rows per stage, terminal set, extra
    /// constraints (minus their slacks), slack nonnegativity.
    pub fn inequality_rows(&self, w: &DVector<f64>) -> Result<Vec<InequalityRow>, OcpError> {
        let ocp = self.ocp;
        let n = ocp.n();
        let mut rows = Vec::new();
        let (ua, ub) = ocp.input_set.halfspaces();
        for k in 0..ocp.horizon {
            let u = self.input(w, k);
            let base = self.input_index(k);
            for (a, b) in ua.iter().zip(&ub) {
                let value = a.iter().zip(u.iter()).map(|(p, q)| p * q).sum::<f64>() - b;
                let gradient = a
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(j, v)| (base + j, *v))
                    .collect();
                rows.push(InequalityRow { value, gradient });
            }
        }
        if let Some(c) = &ocp.consistency {
            let (ca, cb) = consistency_halfspaces(&c.set);
            for k in 1..ocp.horizon {
                let off = self.state(w, k) - &c.reference[k];
                let base = self.state_index(k);
                for (a, b) in ca.iter().zip(&cb) {
                    let value = a.iter().zip(off.iter()).map(|(p, q)| p * q).sum::<f64>() - b;
                    let gradient = a
                        .iter()
                        .enumerate()
                        .filter(|(_, v)| **v != 0.0)
                        .map(|(j, v)| (base + j, *v))
                        .collect();
                    rows.push(InequalityRow { value, gradient });
                }
            }
        }
        {
            let x_n = self.state(w, ocp.horizon);
            let g = &ocp.terminal.p * (&x_n - &ocp.terminal.target) * 2.0;
            let base = self.state_index(ocp.horizon);
            rows.push(InequalityRow {
                value: ocp.terminal.cost(&x_n) - ocp.terminal.level * (1.0 - TERMINAL_BACKOFF),
                gradient: (0..n).map(|j| (base + j, g[j])).collect(),
            });
        }
        let mut soft_iter = self.soft.iter().peekable();
        for (i, e) in ocp.extra.iter().enumerate() {
            let x = self.state(w, e.stage);
            let base = self.state_index(e.stage);
            for (c, (value, grad)) in e.kind.eval(&x)?.into_iter().enumerate() {
                let mut gradient: Vec<(usize, f64)> = (0..n)
                    .filter(|&j| grad[j] != 0.0)
                    .map(|j| (base + j, grad[j]))
                    .collect();
                let mut value = value;
                if let Some(&&(se, sc, s)) = soft_iter.peek() {
                    if se == i && sc == c {
                        gradient.push((s, -1.0));
                        value -= w[s];
                        soft_iter.next();
                    }
                }
                rows.push(InequalityRow { value, gradient });
            }
        }
        for &(_, _, s) in &self.soft {
            rows.push(InequalityRow {
                value: -w[s],
                gradient: vec![(s, -1.0)],
            });
        }
        Ok(rows)
    }

    pub fn inequalities(&self, w: &DVector<f64>) -> Result<DVector<f64>, OcpError> {
        let rows = self.inequality_rows(w)?;
        Ok(DVector::from_iterator(
            rows.len(),
            rows.iter().map(|r| r.value),
        ))
    }

    /// Curvature of the inequality `row_index` (terminal and distance
    /// constraints), as (offset, matrix) on the state block it touches.
    pub(crate) fn inequality_curvatures(
        &self,
        w: &DVector<f64>,
    ) -> Vec<Option<(usize, DMatrix<f64>)>> {
        let ocp = self.ocp;
        let (_, ub) = ocp.input_set.halfspaces();
        let mut out: Vec<Option<(usize, DMatrix<f64>)>> = Vec::new();
        out.extend(std::iter::repeat_n(None, ub.len() * ocp.horizon));
        if let Some(c) = &ocp.consistency {
            let (_, cb) = consistency_halfspaces(&c.set);
            out.extend(std::iter::repeat_n(None, cb.len() * (ocp.horizon - 1)));
        }
        out.push(Some((self.state_index(ocp.horizon), &ocp.terminal.p * 2.0)));
        for e in &ocp.extra {
            let x = self.state(w, e.stage);
            let len = e.kind.len();
            match e.kind.curvature(&x) {
                Some(h) if len == 1 => out.push(Some((self.state_index(e.stage), h))),
                _ => out.extend(std::iter::repeat_n(None, len)),
            }
        }
        out.extend(std::iter::repeat_n(None, self.soft.len()));
        out
    }

    /// Largest absolute stationarity, feasibility and complementarity
    /// residual for the multipliers `(lambda, mu)` in the convention
    /// `∇J + Jcᵀλ + Jgᵀμ = 0`.
    pub fn kkt_residual(
        &self,
        w: &DVector<f64>,
        lambda: &DVector<f64>,
        mu: &DVector<f64>,
    ) -> Result<f64, OcpError> {
        Ok(self.kkt_report(w, lambda, mu)?.absolute())
    }

    pub fn kkt_report(
        &self,
        w: &DVector<f64>,
        lambda: &DVector<f64>,
        mu: &DVector<f64>,
    ) -> Result<KktReport, OcpError> {
        let objective_gradient = self.objective_gradient(w);
        let mut grad = objective_gradient.clone();
        let ocp = self.ocp;
        let n = ocp.n();
        for k in 0..ocp.horizon {
            let (a, b) = ocp.model.linearize(&self.state(w, k), &self.input(w, k))?;
            let l = lambda.rows(k * n, n);
            // ∂/∂x_{k+1} of λᵀ(x_{k+1} − f) = λ
            let xi = self.state_index(k + 1);
            for j in 0..n {
                grad[xi + j] += l[j];
            }
            let bt_l = b.transpose() * l;
            let ui = self.input_index(k);
            for j in 0..ocp.m() {
                grad[ui + j] -= bt_l[j];
            }
            if k >= 1 {
                let at_l = a.transpose() * l;
                let si = self.state_index(k);
                for j in 0..n {
                    grad[si + j] -= at_l[j];
                }
            }
        }
        let rows = self.inequality_rows(w)?;
        let mut report = KktReport {
            gradient_scale: objective_gradient.amax().max(lambda.amax()).max(mu.amax()),
            primal: self.equalities(w)?.amax(),
            ..Default::default()
        };
        for (row, mu_i) in rows.iter().zip(mu.iter()) {
            for &(j, v) in &row.gradient {
                grad[j] += mu_i * v;
            }
            report.primal = report.primal.max(row.value);
            report.dual = report.dual.max(-mu_i);
            report.complementarity = report.complementarity.max((mu_i * row.value).abs());
        }
        report.stationarity = grad.amax();
        Ok(report)
    }
}

/// Components of the first-order optimality residual.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
    /// Largest entry of the objective gradient and of the multipliers.
    pub gradient_scale: f64,
}

impl KktReport {
    pub fn absolute(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }

    /// Stationarity and complementarity divided by `max(1, gradient_scale)`;
    /// the finite-difference Jacobians limit absolute accuracy on problems
    /// with large weights.
    pub fn scaled(&self) -> f64 {
        let s = self.gradient_scale.max(1.0);
        (self.stationarity / s)
            .max(self.primal)
            .max(self.dual / s)
            .max(self.complementarity / s)
    }
}

/// Relative back-off of the terminal level inside the solver so that the
/// curvature error of the last step cannot push `x_N` out of the set.
const TERMINAL_BACKOFF: f64 = 1e-6;

/// Quadratic regularization (relative to the weight) on slack variables.
const SLACK_REGULARIZATION: f64 = 1e-3;

/// Half-spaces `A δ ≤ b` of a consistency set; unbounded box coordinates
/// produce no rows.
pub fn consistency_halfspaces(set: &ConsistencySet<f64>) -> (Vec<Vec<f64>>, Vec<f64>) {
    match set {
        ConsistencySet::Box(b) => {
            let p = b.to_hpolytope();
            (p.rows().to_vec(), p.rhs().to_vec())
        }
        ConsistencySet::Poly(p) => (p.rows().to_vec(), p.rhs().to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoxSet;
    use crate::model::Dynamics;

    pub(crate) fn scalar_ocp(p: f64, level: f64) -> LocalOcp {
        let model = SubsystemModel::new(
            Dynamics::scalar_integrator(),
            1.0,
            DVector::zeros(1),
            DVector::zeros(1),
        )
        .unwrap();
        LocalOcp {
            model,
            q: DMatrix::identity(1, 1),
            r: DMatrix::identity(1, 1),
            horizon: 1,
            consistency: None,
            input_set: InputSet::Box(BoxSet::symmetric(&[10.0]).unwrap()),
            terminal: TerminalIngredients {
                p: DMatrix::from_element(1, 1, p),
                k: DMatrix::from_element(1, 1, -0.5),
                level,
                alpha: 1.1,
                target: DVector::zeros(1),
                target_input: DVector::zeros(1),
            },
            extra: Vec::new(),
        }
    }

    fn v(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn cost_hand_example() {
        let ocp = scalar_ocp(1.0, 100.0);
        let b = TrajectoryBundle {
            agent: 1,
            time_step: 0,
            kind: BundleKind::Optimal,
            states: vec![v(2.0), v(2.0)],
            inputs: vec![v(0.0)],
        };
        assert_eq!(evaluate_cost(&ocp, &b).unwrap(), 8.0);
        let at_rest = TrajectoryBundle::stationary(1, 0, &v(0.0), &v(0.0), 1);
        assert_eq!(evaluate_cost(&ocp, &at_rest).unwrap(), 0.0);
    }

    #[test]
    fn candidate_shifts_and_closes() {
        let ocp = scalar_ocp(1.0, 1.0);
        let prev = TrajectoryBundle {
            agent: 1,
            time_step: 3,
            kind: BundleKind::Optimal,
            states: vec![v(1.0), v(0.5)],
            inputs: vec![v(-0.5)],
        };
        let c = build_candidate(&prev, &ocp.terminal, &ocp.model).unwrap();
        assert_eq!(c.states, vec![v(0.5), v(0.25)]);
        assert_eq!(c.inputs, vec![v(-0.25)]);
        assert_eq!(c.time_step, 4);
        assert!(c.dynamics_residual(&ocp.model).unwrap() < 1e-15);

        let far = TrajectoryBundle {
            states: vec![v(1.0), v(3.0)],
            inputs: vec![v(2.0)],
            ..prev
        };
        assert!(matches!(
            build_candidate(&far, &ocp.terminal, &ocp.model),
            Err(OcpError::TerminalViolation(_))
        ));
    }

    #[test]
    fn layout_indices() {
        let mut ocp = scalar_ocp(1.0, 1.0);
        ocp.horizon = 3;
        let nlp = ocp.nlp(&v(0.0));
        assert_eq!(nlp.num_vars(), 6);
        assert_eq!(nlp.input_index(0), 0);
        assert_eq!(nlp.state_index(1), 1);
        assert_eq!(nlp.input_index(1), 2);
        assert_eq!(nlp.state_index(3), 5);
    }
}
