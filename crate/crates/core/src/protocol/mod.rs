//! Coordination layer: messages, initialization (initially feasible
//! trajectories and consistency-set sizing), the reference update and the
//! checks that references and consistency sets stay admissible.

pub mod transport;
pub mod wire;

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{
    check_robust_coupled, check_robust_state, ConstraintError, CoupledConstraint, InputSet, Region,
    StateConstraint, EPS_CON,
};
use crate::geometry::{sizing_search, ConsistencySet, GeometryError, EPS_SET};
use crate::model::SubsystemModel;
use crate::ocp::{
    self, set_violation, BundleKind, Consistency, LocalOcp, OcpError, OcpSolution, SolverConfig,
    StageConstraint, StageConstraintKind, TrajectoryBundle, EPS_DYN, EPS_INPUT, EPS_TERMINAL,
};
use crate::terminal::{check_enlarged_terminal, TerminalError, TerminalIngredients};

pub use transport::{inproc_mesh, tcp_mesh, Endpoint, InProcEndpoint, TcpEndpoint, TransportError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MessageKind {
    InitTraj,
    RefTraj,
    OptTraj,
    /// Shifted previous optimum, used by the sequential baseline only.
    CandTraj,
    ConsistencySet,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Trajectory(TrajectoryBundle),
    Set(ConsistencySet<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolMessage {
    pub kind: MessageKind,
    pub sender: usize,
    pub time_step: u64,
    pub payload: Payload,
}

impl ProtocolMessage {
    pub fn new(
        kind: MessageKind,
        sender: usize,
        time_step: u64,
        payload: Payload,
    ) -> Result<Self, ProtocolError> {
        let ok = matches!(
            (kind, &payload),
            (MessageKind::ConsistencySet, Payload::Set(_))
                | (
                    MessageKind::InitTraj
                        | MessageKind::RefTraj
                        | MessageKind::OptTraj
                        | MessageKind::CandTraj,
                    Payload::Trajectory(_)
                )
        );
        if !ok {
            return Err(ProtocolError::PayloadMismatch(kind));
        }
        Ok(Self {
            kind,
            sender,
            time_step,
            payload,
        })
    }

    pub fn trajectory(
        kind: MessageKind,
        bundle: TrajectoryBundle,
        time_step: u64,
    ) -> Result<Self, ProtocolError> {
        Self::new(kind, bundle.agent, time_step, Payload::Trajectory(bundle))
    }

    pub fn bundle(&self) -> Option<&TrajectoryBundle> {
        match &self.payload {
            Payload::Trajectory(b) => Some(b),
            Payload::Set(_) => None,
        }
    }

    pub fn into_bundle(self) -> Option<TrajectoryBundle> {
        match self.payload {
            Payload::Trajectory(b) => Some(b),
            Payload::Set(_) => None,
        }
    }

    pub fn set(&self) -> Option<&ConsistencySet<f64>> {
        match &self.payload {
            Payload::Set(s) => Some(s),
            Payload::Trajectory(_) => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("no initially feasible trajectories: {0}")]
    InitInfeasible(String),
    #[error("no admissible consistency-set scale for agent {agent}")]
    NoFeasibleScale { agent: usize },
    #[error("payload does not match message kind {0:?}")]
    PayloadMismatch(MessageKind),
    #[error("agent {agent} at step {time_step}: {what}")]
    AssumptionViolated {
        agent: usize,
        time_step: u64,
        what: String,
    },
    #[error("invalid setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Terminal(#[from] TerminalError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Coupled constraint as seen by its owner: `constraint(x_own, x_id) ≤ 0`.
#[derive(Debug, Clone)]
pub struct Neighbor {
    pub id: usize,
    pub constraint: CoupledConstraint,
}

/// Everything one agent knows about its own subproblem.
#[derive(Debug, Clone)]
pub struct AgentSetup {
    pub id: usize,
    pub model: SubsystemModel,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub input_set: InputSet,
    pub state_constraints: Vec<StateConstraint>,
    pub neighbors: Vec<Neighbor>,
    pub x0: DVector<f64>,
    pub terminal: TerminalIngredients,
    pub horizon: usize,
}

impl AgentSetup {
    pub fn local_ocp(
        &self,
        consistency: Option<Consistency>,
        extra: Vec<StageConstraint>,
    ) -> LocalOcp {
        LocalOcp {
            model: self.model.clone(),
            q: self.q.clone(),
            r: self.r.clone(),
            horizon: self.horizon,
            consistency,
            input_set: self.input_set.clone(),
            terminal: self.terminal.clone(),
            extra,
        }
    }

    pub fn neighbor_ids(&self) -> Vec<usize> {
        self.neighbors.iter().map(|n| n.id).collect()
    }

    /// Open-loop rollout under the target input, used as a cold start.
    pub fn rollout_at_rest(&self, time_step: u64) -> Result<TrajectoryBundle, ProtocolError> {
        let u = self.model.target_input().clone();
        let mut states = vec![self.x0.clone()];
        for k in 0..self.horizon {
            let next = self.model.step(&states[k], &u).map_err(OcpError::from)?;
            states.push(next);
        }
        Ok(TrajectoryBundle {
            agent: self.id,
            time_step,
            kind: BundleKind::Initial,
            states,
            inputs: vec![u; self.horizon],
        })
    }
}

/// Stage constraints `c(x[κ], other[κ]) + margin ≤ 0` for `κ ∈ stages`.
pub fn coupled_stage_constraints(
    constraint: &CoupledConstraint,
    other: &[DVector<f64>],
    stages: std::ops::RangeInclusive<usize>,
    margin: f64,
    soft_weight: Option<f64>,
) -> Vec<StageConstraint> {
    stages
        .map(|stage| {
            let xj = other[stage].clone();
            let kind = match constraint {
                CoupledConstraint::Distance { d_max, slice } => StageConstraintKind::MaxDistance {
                    slice: slice.clone(),
                    other: xj,
                    max: d_max - margin,
                },
                CoupledConstraint::Nonlinear {
                    name, state_dim, ..
                } => {
                    let c = constraint.clone();
                    let eval = Arc::new(move |x: &DVector<f64>| {
                        c.eval(x, &xj)
                            .expect("dimensions checked when the scenario was built")
                    });
                    StageConstraintKind::State {
                        constraint: Arc::new(StateConstraint::Nonlinear {
                            name: format!("{name} vs neighbor"),
                            state_dim: *state_dim,
                            eval,
                        }),
                        margin,
                    }
                }
            };
            StageConstraint {
                stage,
                kind,
                soft_weight,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct BootstrapConfig {
    pub max_sweeps: usize,
    /// ℓ1 weight of the tightened state and coupled constraints.
    pub soft_weight: f64,
    pub solver: SolverConfig,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            max_sweeps: 10,
            soft_weight: 1e5,
            solver: SolverConfig::default(),
        }
    }
}

/// Largest violation of the tightened initialization conditions by one
/// agent's bundle against the given neighbor bundles (nonpositive means
/// certified).
pub fn init_violation(
    agent: &AgentSetup,
    beta: f64,
    bundle: &TrajectoryBundle,
    neighbor_bundles: &BTreeMap<usize, TrajectoryBundle>,
) -> Result<f64, ProtocolError> {
    let n_h = agent.horizon;
    if bundle.states.len() != n_h + 1 || bundle.inputs.len() != n_h {
        return Err(ProtocolError::Setup(format!(
            "agent {} bundle has the wrong horizon",
            agent.id
        )));
    }
    let mut worst = (&bundle.states[0] - &agent.x0).amax() - EPS_DYN;
    worst = worst.max(bundle.dynamics_residual(&agent.model)? - EPS_DYN);
    for u in &bundle.inputs {
        worst = worst.max(agent.input_set.violation(u) - EPS_INPUT);
    }
    worst =
        worst.max(agent.terminal.cost(&bundle.states[n_h]) - agent.terminal.level - EPS_TERMINAL);
    for x in &bundle.states {
        for h in &agent.state_constraints {
            worst = worst.max(h.eval(x)?.max() + beta - EPS_CON);
        }
    }
    for nb in &agent.neighbors {
        let Some(other) = neighbor_bundles.get(&nb.id) else {
            return Err(ProtocolError::Setup(format!(
                "missing bundle of neighbor {}",
                nb.id
            )));
        };
        for (xi, xj) in bundle.states.iter().zip(&other.states) {
            worst = worst.max(nb.constraint.eval(xi, xj)?.max() + beta - EPS_CON);
        }
    }
    Ok(worst)
}

/// Initially feasible trajectories by sequential sweeps in ascending id
/// order. Tightened state and coupled constraints enter as ℓ1 penalties
/// (neighbors without a bundle yet are skipped); the terminal constraint is
/// hard. Stops at the first sweep after which every agent is certified.
pub fn bootstrap_init(
    agents: &[AgentSetup],
    betas: &[f64],
    config: &BootstrapConfig,
) -> Result<Vec<TrajectoryBundle>, ProtocolError> {
    if betas.len() != agents.len() || betas.iter().any(|b| !(*b > 0.0)) {
        return Err(ProtocolError::Setup(
            "one positive beta per agent required".into(),
        ));
    }
    let mut order: Vec<usize> = (0..agents.len()).collect();
    order.sort_by_key(|&i| agents[i].id);
    // the start state itself must already satisfy the tightened constraints
    for (agent, beta) in agents.iter().zip(betas) {
        for h in &agent.state_constraints {
            if h.eval(&agent.x0)?.max() + beta > EPS_CON {
                return Err(ProtocolError::InitInfeasible(format!(
                    "start state of agent {} violates a tightened state constraint",
                    agent.id
                )));
            }
        }
        for nb in &agent.neighbors {
            let other = agents
                .iter()
                .find(|a| a.id == nb.id)
                .ok_or_else(|| ProtocolError::Setup(format!("unknown neighbor {}", nb.id)))?;
            if nb.constraint.eval(&agent.x0, &other.x0)?.max() + beta > EPS_CON {
                return Err(ProtocolError::InitInfeasible(format!(
                    "start states of agents {} and {} violate the tightened coupled constraint",
                    agent.id, nb.id
                )));
            }
        }
    }

    let mut bundles: BTreeMap<usize, TrajectoryBundle> = BTreeMap::new();
    for sweep in 0..config.max_sweeps {
        for &i in &order {
            let agent = &agents[i];
            let beta = betas[i];
            let soft = Some(config.soft_weight);
            let mut extra = Vec::new();
            for h in &agent.state_constraints {
                let h = Arc::new(h.clone());
                for stage in 1..=agent.horizon {
                    extra.push(StageConstraint {
                        stage,
                        kind: StageConstraintKind::State {
                            constraint: h.clone(),
                            margin: beta,
                        },
                        soft_weight: soft,
                    });
                }
            }
            for nb in &agent.neighbors {
                if let Some(other) = bundles.get(&nb.id) {
                    extra.extend(coupled_stage_constraints(
                        &nb.constraint,
                        &other.states,
                        1..=agent.horizon,
                        beta,
                        soft,
                    ));
                }
            }
            let ocp = agent.local_ocp(None, extra);
            let warm = match bundles.get(&agent.id) {
                Some(b) => b.clone(),
                None => agent.rollout_at_rest(0)?,
            };
            let sol = ocp::solve(&ocp, &agent.x0, &warm, &config.solver).map_err(|e| {
                ProtocolError::InitInfeasible(format!(
                    "agent {} in sweep {}: {e}",
                    agent.id,
                    sweep + 1
                ))
            })?;
            let mut b = sol.bundle;
            b.kind = BundleKind::Initial;
            b.time_step = 0;
            b.agent = agent.id;
            bundles.insert(agent.id, b);
        }
        let mut worst = f64::NEG_INFINITY;
        for (agent, beta) in agents.iter().zip(betas) {
            worst = worst.max(init_violation(agent, *beta, &bundles[&agent.id], &bundles)?);
        }
        log::debug!("bootstrap sweep {}: worst violation {worst:e}", sweep + 1);
        if worst <= 0.0 {
            return Ok(agents.iter().map(|a| bundles[&a.id].clone()).collect());
        }
    }
    Err(ProtocolError::InitInfeasible(format!(
        "tightened constraints still violated after {} sweeps",
        config.max_sweeps
    )))
}

/// Worst margins of the admissibility conditions on one agent's reference
/// (state constraints, coupled constraints against neighbors, containment
/// of the previous optimum). Nonpositive entries mean the condition holds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmissibilityReport {
    pub state: f64,
    pub coupled: f64,
    pub containment: f64,
}

impl AdmissibilityReport {
    pub fn holds(&self) -> bool {
        self.state <= EPS_CON && self.coupled <= EPS_CON && self.containment <= EPS_SET
    }
}

/// A neighbor's reference and consistency set.
#[derive(Debug, Clone, Copy)]
pub struct NeighborReference<'a> {
    pub constraint: &'a CoupledConstraint,
    pub reference: &'a TrajectoryBundle,
    pub set: &'a ConsistencySet<f64>,
}

fn robust_state_margin(
    constraints: &[StateConstraint],
    center: &DVector<f64>,
    set: &ConsistencySet<f64>,
) -> Result<f64, ProtocolError> {
    let mut worst = f64::NEG_INFINITY;
    for h in constraints {
        worst = worst.max(h.robust_margin(Region::Translated { center, set })?.max());
    }
    Ok(worst)
}

/// Checks the admissibility conditions on `reference[0..N]`. `prev_opt` is
/// the previous optimal bundle (absent at the initial time).
pub fn audit_reference(
    state_constraints: &[StateConstraint],
    set: &ConsistencySet<f64>,
    reference: &TrajectoryBundle,
    prev_opt: Option<&TrajectoryBundle>,
    neighbors: &[NeighborReference<'_>],
) -> Result<AdmissibilityReport, ProtocolError> {
    let n_h = reference.horizon();
    let mut rep = AdmissibilityReport {
        state: f64::NEG_INFINITY,
        coupled: f64::NEG_INFINITY,
        containment: f64::NEG_INFINITY,
    };
    for k in 0..n_h {
        let xr = &reference.states[k];
        rep.state = rep
            .state
            .max(robust_state_margin(state_constraints, xr, set)?);
        for nb in neighbors {
            let m = nb.constraint.robust_margin(
                Region::Translated { center: xr, set },
                Region::Translated {
                    center: &nb.reference.states[k],
                    set: nb.set,
                },
            )?;
            rep.coupled = rep.coupled.max(m.max());
        }
        if let Some(prev) = prev_opt {
            rep.containment = rep
                .containment
                .max(set_violation(set, &(&prev.states[k + 1] - xr))?);
        }
    }
    Ok(rep)
}

/// Predicate of the consistency-set sizing for one agent: admissible
/// reference conditions at every stage and the enlarged terminal inclusion.
fn sizing_predicate(
    agent: &AgentSetup,
    reference: &TrajectoryBundle,
    set: &ConsistencySet<f64>,
    neighbors: &[NeighborReference<'_>],
) -> Result<bool, ProtocolError> {
    if !check_enlarged_terminal(&agent.terminal, set)? {
        return Ok(false);
    }
    for k in 0..reference.horizon() {
        let xr = &reference.states[k];
        for h in &agent.state_constraints {
            if !check_robust_state(h, Region::Translated { center: xr, set })? {
                return Ok(false);
            }
        }
        for nb in neighbors {
            let ok = check_robust_coupled(
                nb.constraint,
                Region::Translated { center: xr, set },
                Region::Translated {
                    center: &nb.reference.states[k],
                    set: nb.set,
                },
            )?;
            if !ok {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Per-agent sizing inputs: initial guess `Ĉ`, growth factor `ρ > 1` and the
/// admissible exponent range.
#[derive(Debug, Clone)]
pub struct SizingSpec {
    pub guess: ConsistencySet<f64>,
    pub rho: f64,
    pub iota_bounds: (i32, i32),
}

pub const MAX_SIZING_ROUNDS: usize = 20;

/// Consistency sets `ρ^ι Ĉ` along the initial references. Agents search in
/// id order against the neighbors' current scales; afterwards every agent
/// whose predicate broke is searched again with its exponent capped at the
/// current value, so scales only shrink and the loop terminates.
pub fn size_consistency_sets(
    agents: &[AgentSetup],
    references: &[TrajectoryBundle],
    specs: &[SizingSpec],
) -> Result<Vec<(ConsistencySet<f64>, i32)>, ProtocolError> {
    if references.len() != agents.len() || specs.len() != agents.len() {
        return Err(ProtocolError::Setup(
            "one reference and sizing spec per agent required".into(),
        ));
    }
    let index: BTreeMap<usize, usize> = agents.iter().enumerate().map(|(i, a)| (a.id, i)).collect();
    let mut order: Vec<usize> = (0..agents.len()).collect();
    order.sort_by_key(|&i| agents[i].id);
    let mut iota: Vec<i32> = specs
        .iter()
        .map(|s| 0.clamp(s.iota_bounds.0, s.iota_bounds.1))
        .collect();
    let mut sets: Vec<ConsistencySet<f64>> = specs
        .iter()
        .zip(&iota)
        .map(|(s, &i)| s.guess.scale(s.rho.powi(i)))
        .collect::<Result<_, _>>()?;
    let mut searched = vec![false; agents.len()];

    for round in 0..MAX_SIZING_ROUNDS {
        let mut changed = false;
        for &i in &order {
            let agent = &agents[i];
            let nbs: Vec<NeighborReference<'_>> = agent
                .neighbors
                .iter()
                .map(|nb| {
                    let j = index[&nb.id];
                    NeighborReference {
                        constraint: &nb.constraint,
                        reference: &references[j],
                        set: &sets[j],
                    }
                })
                .collect();
            if searched[i] && sizing_predicate(agent, &references[i], &sets[i], &nbs)? {
                continue;
            }
            let spec = &specs[i];
            // first search may grow, later ones only shrink
            let hi = if searched[i] {
                iota[i] - 1
            } else {
                spec.iota_bounds.1
            };
            let mut failure = None;
            let found = sizing_search(
                &spec.guess,
                |s| match sizing_predicate(agent, &references[i], s, &nbs) {
                    Ok(v) => v,
                    Err(e) => {
                        failure.get_or_insert(e);
                        false
                    }
                },
                spec.rho,
                (spec.iota_bounds.0, hi),
            );
            if let Some(e) = failure {
                return Err(e);
            }
            let (set, it) =
                found.map_err(|_| ProtocolError::NoFeasibleScale { agent: agent.id })?;
            drop(nbs);
            log::debug!("sizing round {round}: agent {} at exponent {it}", agent.id);
            changed |= !searched[i] || it != iota[i];
            iota[i] = it;
            sets[i] = set;
            searched[i] = true;
        }
        if !changed {
            return Ok(sets.into_iter().zip(iota).collect());
        }
    }
    Err(ProtocolError::NoFeasibleScale {
        agent: agents.first().map_or(0, |a| a.id),
    })
}

/// A neighbor's data from the previous step as used by the reference update.
#[derive(Debug, Clone, Copy)]
pub struct NeighborPrevious<'a> {
    pub constraint: &'a CoupledConstraint,
    pub set: &'a ConsistencySet<f64>,
    pub prev_opt: &'a TrajectoryBundle,
    pub prev_ref: &'a TrajectoryBundle,
}

/// Which shifted optimal points may be adopted: for `κ = 0..N−2` (relative
/// to the new time) the robust state check around `prev_opt[κ+1]` and, for
/// every neighbor, the robust coupled check against both the neighbor's
/// previous optimum and its previous reference. The last index is always
/// adoptable.
pub fn adoption_checks(
    state_constraints: &[StateConstraint],
    set: &ConsistencySet<f64>,
    prev_opt: &TrajectoryBundle,
    neighbors: &[NeighborPrevious<'_>],
) -> Result<Vec<bool>, ProtocolError> {
    let n_h = prev_opt.horizon();
    let mut out = vec![true; n_h];
    for (k, slot) in out.iter_mut().enumerate().take(n_h.saturating_sub(1)) {
        let xi = &prev_opt.states[k + 1];
        let own = Region::Translated { center: xi, set };
        let mut ok = true;
        for h in state_constraints {
            ok &= check_robust_state(h, own)?;
        }
        for nb in neighbors {
            if !ok {
                break;
            }
            for other in [&nb.prev_opt.states[k + 1], &nb.prev_ref.states[k + 1]] {
                ok &= check_robust_coupled(
                    nb.constraint,
                    own,
                    Region::Translated {
                        center: other,
                        set: nb.set,
                    },
                )?;
            }
        }
        *slot = ok;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceUpdate {
    pub bundle: TrajectoryBundle,
    /// One flag per reference index `0..N−1`; the last is always set.
    pub adopted: Vec<bool>,
}

/// Reference for `time_step` from the previous optimum and reference:
/// adopt the shifted optimum where allowed, keep the shifted old reference
/// elsewhere. Index `N` repeats index `N−1` (it is not constrained).
pub fn update_reference(
    agent: usize,
    time_step: u64,
    state_constraints: &[StateConstraint],
    set: &ConsistencySet<f64>,
    prev_opt: &TrajectoryBundle,
    prev_ref: &TrajectoryBundle,
    neighbors: &[NeighborPrevious<'_>],
) -> Result<ReferenceUpdate, ProtocolError> {
    let n_h = prev_opt.horizon();
    if prev_ref.horizon() != n_h
        || neighbors
            .iter()
            .any(|nb| nb.prev_opt.horizon() != n_h || nb.prev_ref.horizon() != n_h)
    {
        return Err(ProtocolError::Setup(
            "horizon mismatch in reference update".into(),
        ));
    }
    let adopted = adoption_checks(state_constraints, set, prev_opt, neighbors)?;
    let mut states: Vec<DVector<f64>> = adopted
        .iter()
        .enumerate()
        .map(|(k, &a)| {
            if a {
                prev_opt.states[k + 1].clone()
            } else {
                prev_ref.states[k + 1].clone()
            }
        })
        .collect();
    states.push(states[n_h - 1].clone());
    Ok(ReferenceUpdate {
        bundle: TrajectoryBundle::reference(agent, time_step, states),
        adopted,
    })
}

/// Fixed-reference policy: shift forward and hold the last value.
pub fn shift_reference(prev_ref: &TrajectoryBundle, time_step: u64) -> TrajectoryBundle {
    let n_h = prev_ref.horizon();
    let states = (0..=n_h)
        .map(|k| prev_ref.states[(k + 1).min(n_h)].clone())
        .collect();
    TrajectoryBundle::reference(prev_ref.agent, time_step, states)
}

/// Latest data received from one neighbor.
#[derive(Debug, Clone, Default)]
pub struct NeighborView {
    pub reference: Option<TrajectoryBundle>,
    pub optimal: Option<TrajectoryBundle>,
    pub candidate: Option<TrajectoryBundle>,
    pub set: Option<ConsistencySet<f64>>,
}

/// State owned by a single agent.
#[derive(Debug, Clone)]
pub struct AgentState {
    pub id: usize,
    pub reference: TrajectoryBundle,
    pub set: ConsistencySet<f64>,
    pub last_solution: Option<OcpSolution>,
    pub neighbors: BTreeMap<usize, NeighborView>,
}

impl AgentState {
    pub fn new(
        id: usize,
        reference: TrajectoryBundle,
        set: ConsistencySet<f64>,
        neighbor_ids: &[usize],
    ) -> Self {
        Self {
            id,
            reference,
            set,
            last_solution: None,
            neighbors: neighbor_ids
                .iter()
                .map(|&j| (j, NeighborView::default()))
                .collect(),
        }
    }

    pub fn absorb(&mut self, msg: ProtocolMessage) -> Result<(), ProtocolError> {
        let view = self.neighbors.get_mut(&msg.sender).ok_or_else(|| {
            ProtocolError::Setup(format!(
                "agent {} got a message from non-neighbor {}",
                self.id, msg.sender
            ))
        })?;
        match (msg.kind, msg.payload) {
            (MessageKind::InitTraj | MessageKind::RefTraj, Payload::Trajectory(b)) => {
                view.reference = Some(b)
            }
            (MessageKind::OptTraj, Payload::Trajectory(b)) => view.optimal = Some(b),
            (MessageKind::CandTraj, Payload::Trajectory(b)) => view.candidate = Some(b),
            (MessageKind::ConsistencySet, Payload::Set(s)) => view.set = Some(s),
            (kind, _) => return Err(ProtocolError::PayloadMismatch(kind)),
        }
        Ok(())
    }

    /// Every neighbor's reference is the one for `time_step`.
    pub fn round_complete(&self, time_step: u64) -> bool {
        self.neighbors.values().all(|v| {
            v.reference
                .as_ref()
                .is_some_and(|r| r.time_step == time_step)
                && v.set.is_some()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::distance_constraint;
    use crate::geometry::BoxSet;

    fn robot_set() -> ConsistencySet<f64> {
        ConsistencySet::Box(BoxSet::symmetric(&[0.125, 0.125, f64::INFINITY]).unwrap())
    }

    fn line(agent: usize, xs: &[f64]) -> TrajectoryBundle {
        TrajectoryBundle::reference(
            agent,
            0,
            xs.iter()
                .map(|&x| DVector::from_vec(vec![x, 0.0, 0.0]))
                .collect(),
        )
    }

    #[test]
    fn message_payload_must_match_kind() {
        let b = line(0, &[0.0, 1.0]);
        assert!(ProtocolMessage::new(
            MessageKind::ConsistencySet,
            0,
            0,
            Payload::Trajectory(b.clone())
        )
        .is_err());
        assert!(
            ProtocolMessage::new(MessageKind::RefTraj, 0, 0, Payload::Set(robot_set())).is_err()
        );
        assert!(ProtocolMessage::new(MessageKind::CandTraj, 0, 0, Payload::Trajectory(b)).is_ok());
    }

    #[test]
    fn distance_threshold_decides_adoption() {
        // the outer ball of a 0.125 box has radius 0.125·√2, so adoption needs
        // a center distance of at most 2.6 − 0.25·√2 ≈ 2.24645
        let c = distance_constraint(2.6, vec![0, 1]).unwrap();
        let set = robot_set();
        let own_opt = line(0, &[0.0, 0.0, 0.0, 0.0, 0.0]);
        let own_ref = line(0, &[0.0; 5]);
        let nb_opt = line(1, &[2.0, 2.30, 2.24, 2.30, 2.0]);
        let nb_ref = line(1, &[2.0, 2.0, 2.0, 2.0, 2.0]);
        let nbs = [NeighborPrevious {
            constraint: &c,
            set: &set,
            prev_opt: &nb_opt,
            prev_ref: &nb_ref,
        }];
        let upd = update_reference(0, 1, &[], &set, &own_opt, &own_ref, &nbs).unwrap();
        // index κ uses prev index κ+1: 2.30 rejects, 2.24 accepts, last is forced
        assert_eq!(upd.adopted, vec![false, true, false, true]);
        assert_eq!(upd.bundle.states.len(), 5);
        assert_eq!(upd.bundle.states[4], upd.bundle.states[3]);
        assert!((2.6 - 0.25 * 2f64.sqrt() - 2.246446609).abs() < 1e-9);
    }

    #[test]
    fn kept_points_come_from_old_reference() {
        let c = distance_constraint(1.0, vec![0]).unwrap();
        let set = ConsistencySet::Box(BoxSet::symmetric(&[0.1, 0.1, 0.1]).unwrap());
        let own_opt = line(0, &[0.0, 5.0, 0.2, 0.3]);
        let own_ref = line(0, &[0.0, 0.1, 0.25, 0.35]);
        let nb = line(1, &[0.0; 4]);
        let nbs = [NeighborPrevious {
            constraint: &c,
            set: &set,
            prev_opt: &nb,
            prev_ref: &nb,
        }];
        let upd = update_reference(0, 1, &[], &set, &own_opt, &own_ref, &nbs).unwrap();
        assert_eq!(upd.adopted, vec![false, true, true]);
        assert_eq!(upd.bundle.states[0][0], 0.1);
        assert_eq!(upd.bundle.states[1][0], 0.2);
        assert_eq!(upd.bundle.states[2][0], 0.3);
    }

    #[test]
    fn shifted_reference_holds_tail() {
        let r = line(2, &[1.0, 2.0, 3.0]);
        let s = shift_reference(&r, 4);
        let xs: Vec<f64> = s.states.iter().map(|x| x[0]).collect();
        assert_eq!(xs, vec![2.0, 3.0, 3.0]);
        assert_eq!(s.time_step, 4);
    }

    #[test]
    fn agent_state_tracks_latest_messages() {
        let mut st = AgentState::new(0, line(0, &[0.0; 3]), robot_set(), &[1]);
        assert!(!st.round_complete(0));
        st.absorb(
            ProtocolMessage::trajectory(MessageKind::InitTraj, line(1, &[1.0; 3]), 0).unwrap(),
        )
        .unwrap();
        st.absorb(
            ProtocolMessage::new(MessageKind::ConsistencySet, 1, 0, Payload::Set(robot_set()))
                .unwrap(),
        )
        .unwrap();
        assert!(st.round_complete(0));
        assert!(st
            .absorb(
                ProtocolMessage::trajectory(MessageKind::OptTraj, line(2, &[1.0; 3]), 0).unwrap()
            )
            .is_err());
    }
}
