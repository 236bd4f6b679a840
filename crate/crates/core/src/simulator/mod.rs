//! Closed-loop simulation: one thread per agent talking over a transport,
//! and a coordinator that owns the plant.

pub mod record;
pub mod scenario;

use std::collections::BTreeMap;
use std::net::IpAddr;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::thread;
use std::time::{Duration, Instant};

use nalgebra::DVector;
use thiserror::Error;

use crate::constraints::EPS_CON;
use crate::geometry::ConsistencySet;
use crate::ocp::{
    self, build_candidate, evaluate_cost, BundleKind, Consistency, OcpError, SolveStatus,
    TrajectoryBundle,
};
use crate::protocol::{
    audit_reference, bootstrap_init, coupled_stage_constraints, inproc_mesh, shift_reference,
    size_consistency_sets, tcp_mesh, update_reference, AgentSetup, AgentState, Endpoint,
    MessageKind, Neighbor, NeighborPrevious, NeighborReference, ProtocolError, ProtocolMessage,
    ReferenceUpdate, TransportError,
};
use crate::terminal::{design_terminal, CoupledContext, TerminalError, TerminalIngredients};

pub use record::{
    compute_actual_cost, cost_ratio, AgentStep, CostWeights, Metrics, RunRecord, RunSummary, Timing,
};
pub use scenario::{Controller, Scenario, ScenarioError};

/// Allowed step-to-step increase of `Σ_i J_i*` before it counts as a failure.
pub const LYAPUNOV_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Terminal(#[from] TerminalError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("agent {agent} at step {time_step}: local problem infeasible ({reason})")]
    Infeasible {
        agent: usize,
        time_step: usize,
        reason: String,
    },
    #[error("agent {agent} at step {time_step}: {source}")]
    Ocp {
        agent: usize,
        time_step: usize,
        #[source]
        source: OcpError,
    },
    #[error("agent thread {0} stopped unexpectedly")]
    AgentLost(usize),
}

impl SimError {
    /// Whether the run stopped because some local problem had no solution.
    pub fn is_infeasibility(&self) -> bool {
        matches!(
            self,
            SimError::Infeasible { .. } | SimError::Protocol(ProtocolError::InitInfeasible(_))
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransportKind {
    InProc,
    /// Loopback TCP; `base_port: None` picks free ports.
    Tcp {
        host: IpAddr,
        base_port: Option<u16>,
    },
}

impl TransportKind {
    pub fn name(&self) -> &'static str {
        match self {
            TransportKind::InProc => "inproc",
            TransportKind::Tcp { .. } => "tcp",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub transport: TransportKind,
    pub round_timeout: Duration,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            transport: TransportKind::InProc,
            round_timeout: crate::protocol::transport::DEFAULT_ROUND_TIMEOUT,
        }
    }
}

/// Everything computed before the first closed-loop step.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub agents: Vec<AgentSetup>,
    /// Initially feasible trajectories, also the first references.
    pub init: Vec<TrajectoryBundle>,
    pub sets: Vec<ConsistencySet<f64>>,
    pub exponents: Vec<i32>,
}

/// Terminal ingredients for every agent, accounting for the coupled
/// constraints at the neighbors' targets.
pub fn design_terminals(s: &Scenario) -> Result<Vec<TerminalIngredients>, SimError> {
    s.agents
        .iter()
        .map(|a| {
            let ctx: Vec<CoupledContext> = s
                .topology
                .neighbors(a.id)
                .into_iter()
                .filter_map(|j| {
                    let c = s.coupling_for(a.id, j)?;
                    let other = &s.agents[s.agent_index(j)?];
                    Some(CoupledContext {
                        constraint: c.clone(),
                        neighbor_target: other.model.target().clone(),
                    })
                })
                .collect();
            Ok(design_terminal(
                &a.model,
                &a.q,
                &a.r,
                &a.input_set,
                &a.state_constraints,
                &ctx,
                &s.terminal,
            )?)
        })
        .collect()
}

pub fn agent_setups(s: &Scenario, terminals: &[TerminalIngredients]) -> Vec<AgentSetup> {
    s.agents
        .iter()
        .zip(terminals)
        .map(|(a, t)| AgentSetup {
            id: a.id,
            model: a.model.clone(),
            q: a.q.clone(),
            r: a.r.clone(),
            input_set: a.input_set.clone(),
            state_constraints: a.state_constraints.clone(),
            // only distance couplings are loaded, which read the same from both ends
            neighbors: s
                .topology
                .neighbors(a.id)
                .into_iter()
                .filter_map(|j| {
                    s.coupling_for(a.id, j).map(|c| Neighbor {
                        id: j,
                        constraint: c.clone(),
                    })
                })
                .collect(),
            x0: a.x0.clone(),
            terminal: t.clone(),
            horizon: s.horizon,
        })
        .collect()
}

/// Terminal design, initially feasible trajectories, then set sizing. Runs
/// once on the coordinator; the results are handed to the agents through the
/// regular init messages.
pub fn prepare(s: &Scenario) -> Result<Prepared, SimError> {
    let terminals = design_terminals(s)?;
    let agents = agent_setups(s, &terminals);
    let betas: Vec<f64> = s.agents.iter().map(|a| a.beta).collect();
    let init = bootstrap_init(&agents, &betas, &s.bootstrap)?;
    let specs: Vec<_> = s.agents.iter().map(|a| a.sizing.clone()).collect();
    let sized = size_consistency_sets(&agents, &init, &specs)?;
    let (sets, exponents) = sized.into_iter().unzip();
    Ok(Prepared {
        agents,
        init,
        sets,
        exponents,
    })
}

pub fn run(s: &Scenario, controller: Controller, opts: &RunOptions) -> Result<RunRecord, SimError> {
    let prepared = prepare(s)?;
    run_prepared(s, &prepared, controller, opts)
}

pub fn run_proposed(s: &Scenario, opts: &RunOptions) -> Result<RunRecord, SimError> {
    run(s, Controller::Proposed, opts)
}

pub fn run_fixed_reference(s: &Scenario, opts: &RunOptions) -> Result<RunRecord, SimError> {
    run(s, Controller::FixedReference, opts)
}

pub fn run_sequential(s: &Scenario, opts: &RunOptions) -> Result<RunRecord, SimError> {
    run(s, Controller::Sequential, opts)
}

/// Closed loop from an existing preparation, so several controllers can share
/// one initialization.
pub fn run_prepared(
    s: &Scenario,
    prepared: &Prepared,
    controller: Controller,
    opts: &RunOptions,
) -> Result<RunRecord, SimError> {
    let ids: Vec<usize> = prepared.agents.iter().map(|a| a.id).collect();
    match &opts.transport {
        TransportKind::InProc => {
            let eps = inproc_mesh(&ids, opts.round_timeout);
            drive(s, prepared, controller, opts, eps)
        }
        TransportKind::Tcp { host, base_port } => {
            let neighbors: BTreeMap<usize, Vec<usize>> = prepared
                .agents
                .iter()
                .map(|a| (a.id, a.neighbor_ids()))
                .collect();
            let eps = tcp_mesh(&ids, &neighbors, *host, *base_port, opts.round_timeout)?;
            drive(s, prepared, controller, opts, eps)
        }
    }
}

/// Per-thread CPU clock; wall clock where that is unavailable.
fn thread_cpu_time() -> Option<Duration> {
    #[cfg(unix)]
    {
        let mut ts = libc::timespec {
            tv_sec: 0,
            tv_nsec: 0,
        };
        // SAFETY: ts is a valid, writable timespec for the duration of the call.
        let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
        if rc == 0 {
            return Some(Duration::new(ts.tv_sec as u64, ts.tv_nsec as u32));
        }
    }
    None
}

/// Runs `f`, returning its result with (cpu seconds, wall seconds).
fn timed<R>(f: impl FnOnce() -> R) -> (R, f64, f64) {
    let cpu0 = thread_cpu_time();
    let wall0 = Instant::now();
    let out = f();
    let wall = wall0.elapsed().as_secs_f64();
    let cpu = match (cpu0, thread_cpu_time()) {
        (Some(a), Some(b)) => b.saturating_sub(a).as_secs_f64(),
        _ => wall,
    };
    (out, cpu, wall)
}

/// What an agent reports to the coordinator after one step.
struct StepOutcome {
    row: AgentStep,
    input: DVector<f64>,
    failures: Vec<String>,
    infeasible: Option<String>,
}

struct AgentJob {
    setup: AgentSetup,
    init: TrajectoryBundle,
    set: ConsistencySet<f64>,
    controller: Controller,
    solver: ocp::SolverConfig,
    steps: usize,
}

fn drive<E: Endpoint + 'static>(
    s: &Scenario,
    prepared: &Prepared,
    controller: Controller,
    opts: &RunOptions,
    endpoints: Vec<E>,
) -> Result<RunRecord, SimError> {
    let ids: Vec<usize> = prepared.agents.iter().map(|a| a.id).collect();
    let mut state_txs: Vec<Sender<DVector<f64>>> = Vec::new();
    let mut outcome_rxs: Vec<Receiver<Result<StepOutcome, SimError>>> = Vec::new();
    let mut handles = Vec::new();
    for (((setup, init), set), ep) in prepared
        .agents
        .iter()
        .zip(&prepared.init)
        .zip(&prepared.sets)
        .zip(endpoints)
    {
        let (stx, srx) = channel();
        let (otx, orx) = channel();
        let job = AgentJob {
            setup: setup.clone(),
            init: init.clone(),
            set: set.clone(),
            controller,
            solver: s.solver.clone(),
            steps: s.steps,
        };
        let id = setup.id;
        let h = thread::Builder::new()
            .name(format!("agent-{id}"))
            .spawn(move || {
                let report = otx.clone();
                if let Err(e) = agent_main(job, ep, srx, otx) {
                    let _ = report.send(Err(e));
                }
            })
            .map_err(|e| SimError::Transport(TransportError::Io(e)))?;
        state_txs.push(stx);
        outcome_rxs.push(orx);
        handles.push(h);
    }

    let result = coordinate(
        s,
        prepared,
        controller,
        opts,
        &ids,
        &state_txs,
        &outcome_rxs,
    );
    // closing the state channels lets every agent thread return
    drop(state_txs);
    for h in handles {
        let _ = h.join();
    }
    result
}

fn coordinate(
    s: &Scenario,
    prepared: &Prepared,
    controller: Controller,
    opts: &RunOptions,
    ids: &[usize],
    state_txs: &[Sender<DVector<f64>>],
    outcome_rxs: &[Receiver<Result<StepOutcome, SimError>>],
) -> Result<RunRecord, SimError> {
    let mut record = RunRecord {
        scenario: s.name.clone(),
        controller,
        transport: opts.transport.name().to_string(),
        agent_ids: ids.to_vec(),
        dt: s.dt,
        states: vec![prepared.agents.iter().map(|a| a.x0.clone()).collect()],
        inputs: Vec::new(),
        steps: Vec::new(),
        lyapunov: Vec::new(),
        step_time: Vec::new(),
        timing_convention: match controller {
            Controller::Sequential => "sum of agent solve times (thread CPU)",
            _ => "max of agent solve times (thread CPU)",
        },
        infeasible_events: Vec::new(),
        invariant_failures: Vec::new(),
        consistency_sets: prepared.sets.clone(),
        set_exponents: prepared.exponents.clone(),
    };

    for k in 0..s.steps {
        let x = record.states[k].clone();
        for (a, tx) in state_txs.iter().enumerate() {
            tx.send(x[a].clone())
                .map_err(|_| SimError::AgentLost(ids[a]))?;
        }
        let mut rows = Vec::with_capacity(ids.len());
        let mut inputs = Vec::with_capacity(ids.len());
        for (a, rx) in outcome_rxs.iter().enumerate() {
            let out = rx.recv().map_err(|_| SimError::AgentLost(ids[a]))??;
            record.invariant_failures.extend(out.failures);
            if let Some(why) = out.infeasible {
                record.infeasible_events.push(why);
            }
            inputs.push(out.input);
            rows.push(out.row);
        }

        let mut next = Vec::with_capacity(ids.len());
        for (a, setup) in prepared.agents.iter().enumerate() {
            let xn = setup
                .model
                .step(&x[a], &inputs[a])
                .map_err(|e| SimError::Ocp {
                    agent: setup.id,
                    time_step: k,
                    source: e.into(),
                })?;
            next.push(xn);
        }
        check_closed_loop(prepared, k + 1, &next, &mut record.invariant_failures);

        let v: f64 = rows.iter().map(|r| r.predicted_cost).sum();
        if controller == Controller::Proposed {
            if let Some(prev) = record.lyapunov.last() {
                if v > prev + LYAPUNOV_TOL {
                    record.invariant_failures.push(format!(
                        "step {k}: sum of optimal costs rose from {prev} to {v}"
                    ));
                }
            }
        }
        record.lyapunov.push(v);
        let times = rows.iter().map(|r| r.solve_cpu_s);
        record.step_time.push(match controller {
            Controller::Sequential => times.sum(),
            _ => times.fold(0.0, f64::max),
        });
        record.inputs.push(inputs);
        record.states.push(next);
        record.steps.push(rows);
    }
    Ok(record)
}

/// Local and coupled constraints on the actual closed-loop states.
fn check_closed_loop(
    prepared: &Prepared,
    k: usize,
    xs: &[DVector<f64>],
    failures: &mut Vec<String>,
) {
    let index: BTreeMap<usize, usize> = prepared
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| (a.id, i))
        .collect();
    for (a, setup) in prepared.agents.iter().enumerate() {
        for h in &setup.state_constraints {
            match h.eval(&xs[a]) {
                Ok(v) if v.max() <= EPS_CON => {}
                Ok(v) => failures.push(format!(
                    "step {k}: agent {} violates a state constraint by {}",
                    setup.id,
                    v.max()
                )),
                Err(e) => failures.push(format!("step {k}: agent {}: {e}", setup.id)),
            }
        }
        for nb in &setup.neighbors {
            // each pair once
            if nb.id < setup.id {
                continue;
            }
            let j = index[&nb.id];
            match nb.constraint.eval(&xs[a], &xs[j]) {
                Ok(v) if v.max() <= EPS_CON => {}
                Ok(v) => failures.push(format!(
                    "step {k}: agents {} and {} violate their coupled constraint by {}",
                    setup.id,
                    nb.id,
                    v.max()
                )),
                Err(e) => {
                    failures.push(format!("step {k}: agents {} and {}: {e}", setup.id, nb.id))
                }
            }
        }
    }
}

fn agent_main<E: Endpoint>(
    job: AgentJob,
    mut ep: E,
    states: Receiver<DVector<f64>>,
    out: Sender<Result<StepOutcome, SimError>>,
) -> Result<(), SimError> {
    match job.controller {
        Controller::Proposed | Controller::FixedReference => {
            consistency_loop(&job, &mut ep, &states, &out)
        }
        Controller::Sequential => sequential_loop(&job, &mut ep, &states, &out),
    }
}

fn status_name(s: SolveStatus) -> &'static str {
    match s {
        SolveStatus::Optimal => "optimal",
        SolveStatus::MaxIterFeasible => "max_iter_feasible",
        SolveStatus::Infeasible => "infeasible",
    }
}

fn absorb_round<E: Endpoint>(
    ep: &mut E,
    st: &mut AgentState,
    kind: MessageKind,
    k: u64,
    from: &[usize],
) -> Result<(), SimError> {
    for m in ep.recv_round(kind, k, from)? {
        st.absorb(m)?;
    }
    Ok(())
}

/// Proposed controller (and the fixed-reference variant): solve against the
/// own consistency set, exchange optima, update and exchange references.
fn consistency_loop<E: Endpoint>(
    job: &AgentJob,
    ep: &mut E,
    states: &Receiver<DVector<f64>>,
    out: &Sender<Result<StepOutcome, SimError>>,
) -> Result<(), SimError> {
    let setup = &job.setup;
    let id = setup.id;
    let nbs = setup.neighbor_ids();
    let ocp_err = |k: usize| {
        move |source: OcpError| SimError::Ocp {
            agent: id,
            time_step: k,
            source,
        }
    };

    let first_ref = TrajectoryBundle::reference(id, 0, job.init.states.clone());
    let mut st = AgentState::new(id, first_ref, job.set.clone(), &nbs);
    ep.broadcast(
        &nbs,
        &ProtocolMessage::trajectory(MessageKind::InitTraj, job.init.clone(), 0)?,
    )?;
    ep.broadcast(
        &nbs,
        &ProtocolMessage::new(
            MessageKind::ConsistencySet,
            id,
            0,
            crate::protocol::Payload::Set(job.set.clone()),
        )?,
    )?;
    absorb_round(ep, &mut st, MessageKind::InitTraj, 0, &nbs)?;
    absorb_round(ep, &mut st, MessageKind::ConsistencySet, 0, &nbs)?;

    let mut prev: Option<TrajectoryBundle> = None;
    for k in 0..job.steps {
        let Ok(x) = states.recv() else {
            return Ok(());
        };
        let mut failures = Vec::new();
        if !st.round_complete(k as u64) {
            failures.push(format!(
                "step {k}: agent {id} is missing a neighbor reference"
            ));
        }
        let ocp = setup.local_ocp(
            Some(Consistency {
                reference: st.reference.states.clone(),
                set: st.set.clone(),
            }),
            Vec::new(),
        );

        let (warm, candidate_cost, candidate_feasible) = match &prev {
            None => {
                let mut w = job.init.clone();
                w.time_step = 0;
                (w, None, None)
            }
            Some(p) => {
                let cand = build_candidate(p, &setup.terminal, &setup.model).map_err(ocp_err(k))?;
                let rep = ocp.feasibility(&x, &cand).map_err(ocp_err(k))?;
                if !rep.is_feasible() {
                    failures.push(format!(
                        "step {k}: agent {id} shifted candidate is infeasible: {rep:?}"
                    ));
                }
                let c = evaluate_cost(&ocp, &cand).map_err(ocp_err(k))?;
                (cand, Some(c), Some(rep.is_feasible()))
            }
        };

        let (sol, cpu, wall) = timed(|| ocp::solve(&ocp, &x, &warm, &job.solver));
        let sol = sol.map_err(|e| SimError::Infeasible {
            agent: id,
            time_step: k,
            reason: e.to_string(),
        })?;
        let mut opt = sol.bundle.clone();
        opt.agent = id;
        opt.time_step = k as u64;
        opt.kind = BundleKind::Optimal;
        if let Some(c) = candidate_cost {
            if sol.cost > c + LYAPUNOV_TOL * c.abs().max(1.0) {
                failures.push(format!(
                    "step {k}: agent {id} optimum {} above candidate cost {c}",
                    sol.cost
                ));
            }
        }

        ep.broadcast(
            &nbs,
            &ProtocolMessage::trajectory(MessageKind::OptTraj, opt.clone(), k as u64)?,
        )?;
        absorb_round(ep, &mut st, MessageKind::OptTraj, k as u64, &nbs)?;

        let next_k = k as u64 + 1;
        let update = match job.controller {
            Controller::Proposed => {
                let mut prevs = Vec::with_capacity(nbs.len());
                for nb in &setup.neighbors {
                    let view = &st.neighbors[&nb.id];
                    let (Some(set), Some(prev_opt), Some(prev_ref)) =
                        (&view.set, &view.optimal, &view.reference)
                    else {
                        return Err(ProtocolError::AssumptionViolated {
                            agent: id,
                            time_step: next_k,
                            what: format!("incomplete data from neighbor {}", nb.id),
                        }
                        .into());
                    };
                    prevs.push(NeighborPrevious {
                        constraint: &nb.constraint,
                        set,
                        prev_opt,
                        prev_ref,
                    });
                }
                update_reference(
                    id,
                    next_k,
                    &setup.state_constraints,
                    &st.set,
                    &opt,
                    &st.reference,
                    &prevs,
                )?
            }
            // nothing is ever adopted, the bitmap stays all zero
            _ => ReferenceUpdate {
                bundle: shift_reference(&st.reference, next_k),
                adopted: vec![false; st.reference.horizon()],
            },
        };

        ep.broadcast(
            &nbs,
            &ProtocolMessage::trajectory(MessageKind::RefTraj, update.bundle.clone(), next_k)?,
        )?;
        absorb_round(ep, &mut st, MessageKind::RefTraj, next_k, &nbs)?;

        let mut refs = Vec::with_capacity(nbs.len());
        for nb in &setup.neighbors {
            let view = &st.neighbors[&nb.id];
            if let (Some(reference), Some(set)) = (&view.reference, &view.set) {
                refs.push(NeighborReference {
                    constraint: &nb.constraint,
                    reference,
                    set,
                });
            }
        }
        let audit = audit_reference(
            &setup.state_constraints,
            &st.set,
            &update.bundle,
            Some(&opt),
            &refs,
        )?;
        if !audit.holds() {
            failures.push(format!(
                "step {k}: agent {id} new reference is not admissible: {audit:?}"
            ));
        }

        let row = AgentStep {
            k,
            agent: id,
            state: x.iter().copied().collect(),
            input: sol.first_input().iter().copied().collect(),
            predicted_cost: sol.cost,
            candidate_cost,
            candidate_feasible,
            sqp_iterations: sol.iterations,
            status: status_name(sol.status).to_string(),
            kkt: sol.kkt_residual,
            adopted: update
                .adopted
                .iter()
                .map(|&a| if a { '1' } else { '0' })
                .collect(),
            solve_cpu_s: cpu,
            solve_wall_s: wall,
        };
        let input = sol.first_input().clone();
        st.reference = update.bundle;
        st.last_solution = Some(sol);
        prev = Some(opt);
        if out
            .send(Ok(StepOutcome {
                row,
                input,
                failures,
                infeasible: None,
            }))
            .is_err()
        {
            return Ok(());
        }
    }
    Ok(())
}

/// Sequential baseline: agents solve in ascending id order, lower ids pass
/// down their fresh optimum, higher ids their shifted candidate. Coupled
/// constraints are hard and there is no consistency set.
fn sequential_loop<E: Endpoint>(
    job: &AgentJob,
    ep: &mut E,
    states: &Receiver<DVector<f64>>,
    out: &Sender<Result<StepOutcome, SimError>>,
) -> Result<(), SimError> {
    let setup = &job.setup;
    let id = setup.id;
    let ocp_err = |k: usize| {
        move |source: OcpError| SimError::Ocp {
            agent: id,
            time_step: k,
            source,
        }
    };
    let lower: Vec<usize> = setup
        .neighbors
        .iter()
        .map(|n| n.id)
        .filter(|&j| j < id)
        .collect();
    let higher: Vec<usize> = setup
        .neighbors
        .iter()
        .map(|n| n.id)
        .filter(|&j| j > id)
        .collect();

    let mut prev: Option<TrajectoryBundle> = None;
    for k in 0..job.steps {
        let Ok(x) = states.recv() else {
            return Ok(());
        };
        let own = match &prev {
            None => {
                let mut c = job.init.clone();
                c.kind = BundleKind::Candidate;
                c
            }
            Some(p) => build_candidate(p, &setup.terminal, &setup.model).map_err(ocp_err(k))?,
        };
        ep.broadcast(
            &lower,
            &ProtocolMessage::trajectory(MessageKind::CandTraj, own.clone(), k as u64)?,
        )?;
        let fresh = ep.recv_round(MessageKind::OptTraj, k as u64, &lower)?;
        let cands = ep.recv_round(MessageKind::CandTraj, k as u64, &higher)?;

        let mut extra = Vec::new();
        for msg in fresh.iter().chain(&cands) {
            let nb = setup
                .neighbors
                .iter()
                .find(|n| n.id == msg.sender)
                .expect("rounds only ask neighbors");
            let other = msg.bundle().expect("trajectory kinds carry bundles");
            extra.extend(coupled_stage_constraints(
                &nb.constraint,
                &other.states,
                1..=setup.horizon,
                0.0,
                None,
            ));
        }
        let ocp = setup.local_ocp(None, extra);
        let rep = ocp.feasibility(&x, &own).map_err(ocp_err(k))?;
        let candidate_cost = evaluate_cost(&ocp, &own).map_err(ocp_err(k))?;

        let (sol, cpu, wall) = timed(|| ocp::solve(&ocp, &x, &own, &job.solver));
        let (bundle, row_cost, iters, status, kkt, infeasible) = match sol {
            Ok(sol) => (
                sol.bundle,
                sol.cost,
                sol.iterations,
                status_name(sol.status),
                sol.kkt_residual,
                None,
            ),
            // keep going on the candidate and count the event
            Err(e) => (
                own.clone(),
                candidate_cost,
                0,
                "infeasible",
                f64::NAN,
                Some(format!("step {k}: agent {id}: {e}")),
            ),
        };
        let mut opt = bundle;
        opt.agent = id;
        opt.time_step = k as u64;
        opt.kind = BundleKind::Optimal;
        ep.broadcast(
            &higher,
            &ProtocolMessage::trajectory(MessageKind::OptTraj, opt.clone(), k as u64)?,
        )?;

        let input = opt.inputs[0].clone();
        let row = AgentStep {
            k,
            agent: id,
            state: x.iter().copied().collect(),
            input: input.iter().copied().collect(),
            predicted_cost: row_cost,
            candidate_cost: Some(candidate_cost),
            candidate_feasible: Some(rep.is_feasible()),
            sqp_iterations: iters,
            status: status.to_string(),
            kkt,
            adopted: String::new(),
            solve_cpu_s: cpu,
            solve_wall_s: wall,
        };
        prev = Some(opt);
        if out
            .send(Ok(StepOutcome {
                row,
                input,
                failures: Vec::new(),
                infeasible,
            }))
            .is_err()
        {
            return Ok(());
        }
    }
    Ok(())
}
