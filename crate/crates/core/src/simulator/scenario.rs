//! Scenario files: a JSON document with a `schema_version`, validated into a
//! [`Scenario`] before anything runs. Unknown keys are rejected. Reals may
//! be written as `"inf"` / `"-inf"` where an unbounded value makes sense.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::constraints::{
    distance_constraint, CoupledConstraint, InputSet, StateConstraint, Topology, EPS_CON,
};
use crate::geometry::{BoxSet, ConsistencySet};
use crate::model::{Dynamics, OmniRobot, OmniRobotParams, SubsystemModel};
use crate::ocp::{HessianMode, SolverConfig};
use crate::protocol::{BootstrapConfig, SizingSpec};
use crate::terminal::TerminalConfig;

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid `{path}`: {msg}")]
    Validation { path: String, msg: String },
}

fn invalid(path: impl Into<String>, msg: impl fmt::Display) -> ScenarioError {
    ScenarioError::Validation {
        path: path.into(),
        msg: msg.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Controller {
    Proposed,
    FixedReference,
    Sequential,
}

impl Controller {
    pub fn name(self) -> &'static str {
        match self {
            Self::Proposed => "proposed",
            Self::FixedReference => "fixed_reference",
            Self::Sequential => "sequential",
        }
    }
}

/// Real number that also accepts `"inf"`, `"+inf"` and `"-inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Real(pub f64);

impl<'de> Deserialize<'de> for Real {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(Real(v)),
            Repr::Text(s) => match s.trim().to_ascii_lowercase().as_str() {
                "inf" | "+inf" | "infinity" => Ok(Real(f64::INFINITY)),
                "-inf" | "-infinity" => Ok(Real(f64::NEG_INFINITY)),
                other => Err(serde::de::Error::custom(format!(
                    "expected a number or \"inf\", got \"{other}\""
                ))),
            },
        }
    }
}

fn reals(v: &[Real]) -> Vec<f64> {
    v.iter().map(|r| r.0).collect()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    schema_version: u32,
    name: String,
    #[serde(default)]
    #[allow(dead_code)]
    description: String,
    horizon: usize,
    dt: f64,
    #[serde(default)]
    sim: SimSection,
    #[serde(default)]
    solver: SolverSection,
    #[serde(default)]
    terminal: TerminalSection,
    #[serde(default)]
    bootstrap: BootstrapSection,
    #[serde(default)]
    sizing: SizingSection,
    agents: Vec<AgentFile>,
    #[serde(default)]
    couplings: Vec<CouplingFile>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SimSection {
    steps: usize,
    controller: Controller,
    seed: u64,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            steps: 60,
            controller: Controller::Proposed,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SolverSection {
    sqp_max_iter: Option<usize>,
    kkt_tol: Option<f64>,
    qp_tol: Option<f64>,
    ls_beta: Option<f64>,
    hessian: Option<HessianMode>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TerminalSection {
    alpha: Option<f64>,
    kappa_f: Option<f64>,
    boundary_samples_per_dim: Option<usize>,
    gamma_hi: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct BootstrapSection {
    max_sweeps: Option<usize>,
    soft_weight: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SizingSection {
    rho: f64,
    iota_bounds: (i32, i32),
}

impl Default for SizingSection {
    fn default() -> Self {
        Self {
            rho: 1.25,
            iota_bounds: (-40, 0),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
enum ModelFile {
    OmniRobot { body_radius: f64, wheel_radius: f64 },
    ScalarIntegrator,
    Integrator2d,
    DoubleIntegrator,
    ContinuousLinear { a: Vec<Vec<f64>>, b: Vec<Vec<f64>> },
    DiscreteLinear { a: Vec<Vec<f64>>, b: Vec<Vec<f64>> },
}

/// A flat list is a diagonal, a list of rows a full matrix.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum WeightFile {
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxFile {
    lower: Vec<Real>,
    upper: Vec<Real>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinearFile {
    h: Vec<Vec<f64>>,
    g: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentFile {
    id: usize,
    model: ModelFile,
    x0: Vec<f64>,
    target: Vec<f64>,
    #[serde(default)]
    target_input: Option<Vec<f64>>,
    q: WeightFile,
    r: WeightFile,
    input_box: BoxFile,
    #[serde(default)]
    state_constraints: Vec<LinearFile>,
    /// Half-widths of the initial consistency-set guess (a centered box).
    consistency_half_widths: Vec<Real>,
    beta: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
enum CouplingFile {
    Distance {
        agents: (usize, usize),
        d_max: f64,
        coords: Vec<usize>,
    },
}

/// Validated per-agent data.
#[derive(Debug, Clone)]
pub struct AgentSpec {
    pub id: usize,
    pub model: SubsystemModel,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub input_set: InputSet,
    pub state_constraints: Vec<StateConstraint>,
    pub x0: DVector<f64>,
    pub beta: f64,
    pub sizing: SizingSpec,
}

#[derive(Debug, Clone)]
pub struct Coupling {
    pub agents: (usize, usize),
    pub constraint: CoupledConstraint,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub horizon: usize,
    pub dt: f64,
    pub steps: usize,
    pub controller: Controller,
    pub seed: u64,
    pub solver: SolverConfig,
    pub terminal: TerminalConfig,
    pub bootstrap: BootstrapConfig,
    pub agents: Vec<AgentSpec>,
    pub couplings: Vec<Coupling>,
    pub topology: Topology,
}

impl Scenario {
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text, overrides)
    }

    pub fn from_json_str(
        text: &str,
        overrides: &[(String, String)],
    ) -> Result<Self, ScenarioError> {
        let mut value: Value =
            serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        for (k, v) in overrides {
            apply_override(&mut value, k, v)?;
        }
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self, ScenarioError> {
        let file: ScenarioFile =
            serde_json::from_value(value).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        build(file)
    }

    pub fn agent_index(&self, id: usize) -> Option<usize> {
        self.agents.iter().position(|a| a.id == id)
    }

    /// Coupled constraint from the point of view of `owner`.
    pub fn coupling_for(&self, owner: usize, other: usize) -> Option<&CoupledConstraint> {
        self.couplings
            .iter()
            .find(|c| c.agents == (owner, other) || c.agents == (other, owner))
            .map(|c| &c.constraint)
    }
}

/// Sets `key` (dotted path, array elements by index) to `raw`, parsed as JSON
/// when possible and as a string otherwise. Intermediate objects are created
/// on demand; the final document is still validated as a whole.
pub fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<(), ScenarioError> {
    let parsed: Value =
        serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(invalid(key, "empty path segment"));
    }
    let mut cur = root;
    for (depth, part) in parts.iter().enumerate() {
        let last = depth + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert((*part).to_string(), parsed);
                    return Ok(());
                }
                map.entry((*part).to_string())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| invalid(key, format!("`{part}` is not an array index")))?;
                let len = items.len();
                let slot = items.get_mut(idx).ok_or_else(|| {
                    invalid(key, format!("index {idx} out of range ({len} entries)"))
                })?;
                if last {
                    *slot = parsed;
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(invalid(
                    key,
                    format!("`{part}` does not lead into an object or array"),
                ))
            }
        };
    }
    Ok(())
}

fn matrix(path: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, ScenarioError> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(invalid(
            path,
            "matrix rows must be nonempty and of equal length",
        ));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn weight(path: &str, w: &WeightFile, dim: usize) -> Result<DMatrix<f64>, ScenarioError> {
    let m = match w {
        WeightFile::Diagonal(d) => DMatrix::from_diagonal(&DVector::from_column_slice(d)),
        WeightFile::Full(rows) => matrix(path, rows)?,
    };
    if m.nrows() != dim || m.ncols() != dim {
        return Err(invalid(
            path,
            format!(
                "expected a {dim}×{dim} weight, got {}×{}",
                m.nrows(),
                m.ncols()
            ),
        ));
    }
    if (&m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(invalid(path, "weight must be symmetric"));
    }
    if m.clone().cholesky().is_none() {
        return Err(invalid(path, "weight must be positive definite"));
    }
    Ok(m)
}

fn positive(path: &str, v: f64) -> Result<f64, ScenarioError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(
            path,
            format!("must be positive and finite, got {v}"),
        ))
    }
}

fn build(file: ScenarioFile) -> Result<Scenario, ScenarioError> {
    if file.schema_version != SCENARIO_SCHEMA_VERSION {
        return Err(invalid(
            "schema_version",
            format!(
                "unsupported version {} (expected {SCENARIO_SCHEMA_VERSION})",
                file.schema_version
            ),
        ));
    }
    if file.horizon == 0 {
        return Err(invalid("horizon", "must be at least 1"));
    }
    let dt = positive("dt", file.dt)?;
    if file.agents.is_empty() {
        return Err(invalid("agents", "at least one agent required"));
    }

    let mut solver = SolverConfig::default();
    if let Some(v) = file.solver.sqp_max_iter {
        if v == 0 {
            return Err(invalid("solver.sqp_max_iter", "must be at least 1"));
        }
        solver.sqp_max_iter = v;
    }
    if let Some(v) = file.solver.kkt_tol {
        solver.kkt_tol = positive("solver.kkt_tol", v)?;
    }
    if let Some(v) = file.solver.qp_tol {
        solver.qp_tol = positive("solver.qp_tol", v)?;
    }
    if let Some(v) = file.solver.ls_beta {
        if !(v > 0.0 && v < 1.0) {
            return Err(invalid("solver.ls_beta", "must lie in (0, 1)"));
        }
        solver.ls_beta = v;
    }
    if let Some(h) = file.solver.hessian {
        solver.hessian = h;
    }

    let mut terminal = TerminalConfig {
        seed: file.sim.seed,
        ..TerminalConfig::default()
    };
    if let Some(v) = file.terminal.alpha {
        if !(v > 1.0 && v.is_finite()) {
            return Err(invalid("terminal.alpha", "must exceed 1"));
        }
        terminal.alpha = v;
    }
    if let Some(v) = file.terminal.kappa_f {
        if !(v >= 1.0 && v.is_finite()) {
            return Err(invalid("terminal.kappa_f", "must be at least 1"));
        }
        terminal.kappa_f = v;
    }
    if let Some(v) = file.terminal.boundary_samples_per_dim {
        if v == 0 {
            return Err(invalid(
                "terminal.boundary_samples_per_dim",
                "must be at least 1",
            ));
        }
        terminal.boundary_samples_per_dim = v;
    }
    if let Some(v) = file.terminal.gamma_hi {
        terminal.gamma_hi = positive("terminal.gamma_hi", v)?;
    }

    let mut bootstrap = BootstrapConfig {
        solver: solver.clone(),
        ..BootstrapConfig::default()
    };
    if let Some(v) = file.bootstrap.max_sweeps {
        if v == 0 {
            return Err(invalid("bootstrap.max_sweeps", "must be at least 1"));
        }
        bootstrap.max_sweeps = v;
    }
    if let Some(v) = file.bootstrap.soft_weight {
        bootstrap.soft_weight = positive("bootstrap.soft_weight", v)?;
    }
    let rho = file.sizing.rho;
    if !(rho > 1.0 && rho.is_finite()) {
        return Err(invalid("sizing.rho", "must exceed 1"));
    }
    let iota_bounds = file.sizing.iota_bounds;
    if iota_bounds.0 > iota_bounds.1 {
        return Err(invalid(
            "sizing.iota_bounds",
            "lower bound exceeds upper bound",
        ));
    }

    let mut agents = Vec::with_capacity(file.agents.len());
    for (idx, a) in file.agents.iter().enumerate() {
        let p = |field: &str| format!("agents.{idx}.{field}");
        let dynamics = match &a.model {
            ModelFile::OmniRobot {
                body_radius,
                wheel_radius,
            } => {
                let robot = OmniRobot::new(OmniRobotParams {
                    body_radius: positive(&p("model.body_radius"), *body_radius)?,
                    wheel_radius: positive(&p("model.wheel_radius"), *wheel_radius)?,
                })
                .map_err(|e| invalid(p("model"), e))?;
                Dynamics::OmniRobot(robot)
            }
            ModelFile::ScalarIntegrator => Dynamics::scalar_integrator(),
            ModelFile::Integrator2d => Dynamics::integrator2d(),
            ModelFile::DoubleIntegrator => Dynamics::double_integrator(),
            ModelFile::ContinuousLinear { a, b } => Dynamics::ContinuousLinear {
                ac: matrix(&p("model.a"), a)?,
                bc: matrix(&p("model.b"), b)?,
            },
            ModelFile::DiscreteLinear { a, b } => Dynamics::DiscreteLinear {
                a: matrix(&p("model.a"), a)?,
                b: matrix(&p("model.b"), b)?,
            },
        };
        let (n, m) = (dynamics.state_dim(), dynamics.input_dim());
        for (field, len, want) in [
            ("x0", a.x0.len(), n),
            ("target", a.target.len(), n),
            ("input_box.lower", a.input_box.lower.len(), m),
            ("input_box.upper", a.input_box.upper.len(), m),
            (
                "consistency_half_widths",
                a.consistency_half_widths.len(),
                n,
            ),
        ] {
            if len != want {
                return Err(invalid(
                    p(field),
                    format!("expected {want} entries, got {len}"),
                ));
            }
        }
        if a.x0.iter().chain(&a.target).any(|v| !v.is_finite()) {
            return Err(invalid(p("x0"), "start and target must be finite"));
        }
        let target_input = match &a.target_input {
            Some(u) if u.len() != m => {
                return Err(invalid(
                    p("target_input"),
                    format!("expected {m} entries, got {}", u.len()),
                ))
            }
            Some(u) => DVector::from_column_slice(u),
            None => DVector::zeros(m),
        };
        let model = SubsystemModel::new(
            dynamics,
            dt,
            DVector::from_column_slice(&a.target),
            target_input,
        )
        .map_err(|e| invalid(p("target"), e))?;
        let q = weight(&p("q"), &a.q, n)?;
        let r = weight(&p("r"), &a.r, m)?;
        let input_box = BoxSet::new(reals(&a.input_box.lower), reals(&a.input_box.upper))
            .map_err(|e| invalid(p("input_box"), e))?;
        let input_set = InputSet::Box(input_box);
        let mut state_constraints = Vec::new();
        for (ci, c) in a.state_constraints.iter().enumerate() {
            let path = p(&format!("state_constraints.{ci}"));
            let h = matrix(&path, &c.h)?;
            if h.ncols() != n {
                return Err(invalid(path, format!("expected {n} columns")));
            }
            state_constraints.push(
                StateConstraint::linear(h, DVector::from_column_slice(&c.g))
                    .map_err(|e| invalid(&path, e))?,
            );
        }
        let half = reals(&a.consistency_half_widths);
        if half.iter().any(|v| !(*v > 0.0)) {
            return Err(invalid(
                p("consistency_half_widths"),
                "half-widths must be positive",
            ));
        }
        let guess = ConsistencySet::Box(
            BoxSet::symmetric(&half).map_err(|e| invalid(p("consistency_half_widths"), e))?,
        );
        let beta = positive(&p("beta"), a.beta)?;
        let x0 = DVector::from_column_slice(&a.x0);

        // target feasibility: u_ξ ∈ U and h(ξ) ≤ 0
        if !input_set
            .contains(model.target_input(), EPS_CON)
            .map_err(|e| invalid(p("target_input"), e))?
        {
            return Err(invalid(
                p("target_input"),
                "target input violates the input bounds",
            ));
        }
        for h in &state_constraints {
            if !h
                .is_satisfied(model.target())
                .map_err(|e| invalid(p("target"), e))?
            {
                return Err(invalid(p("target"), "target violates a state constraint"));
            }
        }
        agents.push(AgentSpec {
            id: a.id,
            model,
            q,
            r,
            input_set,
            state_constraints,
            x0,
            beta,
            sizing: SizingSpec {
                guess,
                rho,
                iota_bounds,
            },
        });
    }

    let ids: Vec<usize> = agents.iter().map(|a| a.id).collect();
    let mut edges = Vec::new();
    let mut couplings = Vec::new();
    for (ci, c) in file.couplings.iter().enumerate() {
        let path = format!("couplings.{ci}");
        match c {
            CouplingFile::Distance {
                agents: (i, j),
                d_max,
                coords,
            } => {
                for id in [i, j] {
                    let Some(a) = agents.iter().find(|a| a.id == *id) else {
                        return Err(invalid(&path, format!("unknown agent {id}")));
                    };
                    if coords.iter().any(|&d| d >= a.model.n()) {
                        return Err(invalid(
                            format!("{path}.coords"),
                            "coordinate outside the state",
                        ));
                    }
                }
                if couplings
                    .iter()
                    .any(|c: &Coupling| c.agents == (*i, *j) || c.agents == (*j, *i))
                {
                    return Err(invalid(&path, "duplicate coupling"));
                }
                let constraint =
                    distance_constraint(*d_max, coords.clone()).map_err(|e| invalid(&path, e))?;
                edges.push((*i, *j));
                couplings.push(Coupling {
                    agents: (*i, *j),
                    constraint,
                });
            }
        }
    }
    let topology = Topology::new(ids, &edges).map_err(|e| invalid("couplings", e))?;
    for c in &couplings {
        let ti = agents
            .iter()
            .find(|a| a.id == c.agents.0)
            .expect("checked")
            .model
            .target();
        let tj = agents
            .iter()
            .find(|a| a.id == c.agents.1)
            .expect("checked")
            .model
            .target();
        if !c
            .constraint
            .is_satisfied(ti, tj)
            .map_err(|e| invalid("couplings", e))?
        {
            return Err(invalid(
                "couplings",
                format!(
                    "targets of agents {} and {} violate their coupled constraint",
                    c.agents.0, c.agents.1
                ),
            ));
        }
    }

    Ok(Scenario {
        name: file.name,
        horizon: file.horizon,
        dt,
        steps: file.sim.steps,
        controller: file.sim.controller,
        seed: file.sim.seed,
        solver,
        terminal,
        bootstrap,
        agents,
        couplings,
        topology,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"{
        "schema_version": 1,
        "name": "toy",
        "horizon": 5,
        "dt": 1.0,
        "sim": {"steps": 4},
        "agents": [
            {"id": 0, "model": {"kind": "scalar_integrator"}, "x0": [1.0], "target": [0.0],
             "q": [1.0], "r": [1.0], "input_box": {"lower": [-1], "upper": [1]},
             "consistency_half_widths": [0.5], "beta": 0.1},
            {"id": 1, "model": {"kind": "scalar_integrator"}, "x0": [-1.0], "target": [0.0],
             "q": [1.0], "r": [1.0], "input_box": {"lower": [-1], "upper": [1]},
             "consistency_half_widths": ["inf"], "beta": 0.1}
        ],
        "couplings": [{"kind": "distance", "agents": [0, 1], "d_max": 3.0, "coords": [0]}]
    }"#;

    #[test]
    fn parses_and_applies_overrides() {
        let s = Scenario::from_json_str(TOY, &[]).unwrap();
        assert_eq!(s.steps, 4);
        assert_eq!(s.topology.neighbors(0), vec![1]);
        let s = Scenario::from_json_str(TOY, &[("sim.steps".into(), "10".into())]).unwrap();
        assert_eq!(s.steps, 10);
        let s = Scenario::from_json_str(TOY, &[("agents.1.beta".into(), "0.25".into())]).unwrap();
        assert_eq!(s.agents[1].beta, 0.25);
        let s = Scenario::from_json_str(TOY, &[("sim.controller".into(), "sequential".into())])
            .unwrap();
        assert_eq!(s.controller, Controller::Sequential);
    }

    #[test]
    fn inverted_box_is_a_validation_error() {
        let bad = TOY.replacen(
            r#""lower": [-1], "upper": [1]"#,
            r#""lower": [1], "upper": [-1]"#,
            1,
        );
        match Scenario::from_json_str(&bad, &[]) {
            Err(ScenarioError::Validation { path, .. }) => assert_eq!(path, "agents.0.input_box"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = TOY.replacen(r#""horizon": 5"#, r#""horizon": 5, "horizn": 3"#, 1);
        assert!(matches!(
            Scenario::from_json_str(&bad, &[]),
            Err(ScenarioError::Parse(_))
        ));
        assert!(matches!(
            Scenario::from_json_str(TOY, &[("sim.stepz".into(), "3".into())]),
            Err(ScenarioError::Parse(_))
        ));
    }

    #[test]
    fn infeasible_targets_are_rejected() {
        let bad = TOY.replacen(
            r#""x0": [-1.0], "target": [0.0]"#,
            r#""x0": [-1.0], "target": [4.0]"#,
            1,
        );
        assert!(matches!(
            Scenario::from_json_str(&bad, &[]),
            Err(ScenarioError::Validation { .. })
        ));
    }

    #[test]
    fn bad_override_paths_fail() {
        let mut v: Value = serde_json::from_str(TOY).unwrap();
        assert!(apply_override(&mut v, "agents.7.beta", "1").is_err());
        assert!(apply_override(&mut v, "horizon.x", "1").is_err());
        assert!(apply_override(&mut v, "a..b", "1").is_err());
    }
}
