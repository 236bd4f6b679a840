//! Closed-loop run records, the actual-cost metric and their file formats.

use std::io;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::scenario::{Controller, Scenario};
use crate::constraints::CoupledConstraint;
use crate::geometry::ConsistencySet;

/// One agent's data at one closed-loop step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentStep {
    pub k: usize,
    pub agent: usize,
    pub state: Vec<f64>,
    pub input: Vec<f64>,
    /// Optimal value of the local problem.
    pub predicted_cost: f64,
    /// Cost of the shifted candidate it was warm-started from, when there was one.
    pub candidate_cost: Option<f64>,
    pub candidate_feasible: Option<bool>,
    pub sqp_iterations: usize,
    pub status: String,
    pub kkt: f64,
    /// Reference indices that took the shifted optimum ("1") or kept the old
    /// reference ("0"); empty when the controller has no reference update.
    pub adopted: String,
    pub solve_cpu_s: f64,
    pub solve_wall_s: f64,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub scenario: String,
    pub controller: Controller,
    pub transport: String,
    pub agent_ids: Vec<usize>,
    pub dt: f64,
    /// `states[k][a]` for `k = 0..=steps`.
    pub states: Vec<Vec<DVector<f64>>>,
    /// `inputs[k][a]` for `k = 0..steps`.
    pub inputs: Vec<Vec<DVector<f64>>>,
    /// Row-major by step, then by agent.
    pub steps: Vec<Vec<AgentStep>>,
    /// `Σ_i J_i*` per step.
    pub lyapunov: Vec<f64>,
    /// Per-step wall time under the controller's convention.
    pub step_time: Vec<f64>,
    pub timing_convention: &'static str,
    pub infeasible_events: Vec<String>,
    pub invariant_failures: Vec<String>,
    pub consistency_sets: Vec<ConsistencySet<f64>>,
    pub set_exponents: Vec<i32>,
}

/// Weights and steady state for the actual cost of one agent.
#[derive(Debug, Clone)]
pub struct CostWeights {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub target: DVector<f64>,
    pub target_input: DVector<f64>,
}

impl CostWeights {
    pub fn from_scenario(s: &Scenario) -> Vec<Self> {
        s.agents
            .iter()
            .map(|a| Self {
                q: a.q.clone(),
                r: a.r.clone(),
                target: a.model.target().clone(),
                target_input: a.model.target_input().clone(),
            })
            .collect()
    }
}

/// `J^a_i = Σ_{κ=0}^{K} ‖x_i[κ] − ξ_i‖²_Q + ‖u_i[κ] − u_ξ‖²_R` over the
/// recorded run; the input at `κ = K` does not exist and counts as `u_ξ`.
pub fn compute_actual_cost(
    states: &[Vec<DVector<f64>>],
    inputs: &[Vec<DVector<f64>>],
    weights: &[CostWeights],
) -> Vec<f64> {
    weights
        .iter()
        .enumerate()
        .map(|(a, w)| {
            let mut total = 0.0;
            for (k, xs) in states.iter().enumerate() {
                let ex = &xs[a] - &w.target;
                total += ex.dot(&(&w.q * &ex));
                if let Some(us) = inputs.get(k) {
                    let eu = &us[a] - &w.target_input;
                    total += eu.dot(&(&w.r * &eu));
                }
            }
            total
        })
        .collect()
}

/// Ratio with the `0/0 = 1` convention.
pub fn cost_ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 && den == 0.0 {
        1.0
    } else {
        num / den
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub agents: Vec<usize>,
    pub steps: usize,
    pub actual_cost: Vec<f64>,
    pub total_actual_cost: f64,
    pub infeasible_events: usize,
    pub invariant_failures: usize,
    pub candidate_audit_failures: usize,
    /// Largest coupled-constraint value over all recorded states (≤ 0 is
    /// satisfied).
    pub max_coupled_value: f64,
    pub final_error_inf: Vec<f64>,
    /// Largest step-to-step increase of `Σ_i J_i*` (≤ 0 means monotone).
    pub lyapunov_max_increase: f64,
    pub adoption_rate: Option<f64>,
    pub sqp_iterations: usize,
    pub consistency_set_exponents: Vec<i32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub convention: String,
    pub mean_step_s: f64,
    pub max_step_s: f64,
    pub per_agent_mean_cpu_s: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub controller: Controller,
    pub transport: String,
    pub metrics: Metrics,
    pub timing: Timing,
}

impl RunRecord {
    pub fn num_steps(&self) -> usize {
        self.inputs.len()
    }

    pub fn actual_cost(&self, weights: &[CostWeights]) -> Vec<f64> {
        compute_actual_cost(&self.states, &self.inputs, weights)
    }

    /// Largest value of every coupled constraint over the recorded states.
    pub fn max_coupled_value(&self, scenario: &Scenario) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for c in &scenario.couplings {
            let (Some(i), Some(j)) = (self.index_of(c.agents.0), self.index_of(c.agents.1)) else {
                continue;
            };
            for xs in &self.states {
                if let Ok(v) = c.constraint.eval(&xs[i], &xs[j]) {
                    worst = worst.max(v.max());
                }
            }
        }
        worst
    }

    pub fn index_of(&self, id: usize) -> Option<usize> {
        self.agent_ids.iter().position(|a| *a == id)
    }

    pub fn summary(&self, scenario: &Scenario) -> RunSummary {
        let weights = CostWeights::from_scenario(scenario);
        let actual_cost = self.actual_cost(&weights);
        let last = self.states.last().expect("record holds the initial state");
        let final_error_inf = weights
            .iter()
            .enumerate()
            .map(|(a, w)| (&last[a] - &w.target).amax())
            .collect();
        let lyapunov_max_increase = self
            .lyapunov
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::NEG_INFINITY, f64::max);
        let (mut adopted, mut slots) = (0usize, 0usize);
        let mut cand_fail = 0;
        let mut iters = 0;
        let mut per_agent = vec![0.0; self.agent_ids.len()];
        for row in self.steps.iter().flatten() {
            adopted += row.adopted.bytes().filter(|b| *b == b'1').count();
            slots += row.adopted.len();
            cand_fail += usize::from(row.candidate_feasible == Some(false));
            iters += row.sqp_iterations;
            if let Some(a) = self.index_of(row.agent) {
                per_agent[a] += row.solve_cpu_s;
            }
        }
        let nsteps = self.num_steps().max(1) as f64;
        RunSummary {
            scenario: self.scenario.clone(),
            controller: self.controller,
            transport: self.transport.clone(),
            metrics: Metrics {
                agents: self.agent_ids.clone(),
                steps: self.num_steps(),
                total_actual_cost: actual_cost.iter().sum(),
                actual_cost,
                infeasible_events: self.infeasible_events.len(),
                invariant_failures: self.invariant_failures.len(),
                candidate_audit_failures: cand_fail,
                max_coupled_value: self.max_coupled_value(scenario),
                final_error_inf,
                lyapunov_max_increase: if self.lyapunov.len() < 2 {
                    0.0
                } else {
                    lyapunov_max_increase
                },
                adoption_rate: (slots > 0).then(|| adopted as f64 / slots as f64),
                sqp_iterations: iters,
                consistency_set_exponents: self.set_exponents.clone(),
            },
            timing: Timing {
                convention: self.timing_convention.to_string(),
                mean_step_s: self.step_time.iter().sum::<f64>() / nsteps,
                max_step_s: self.step_time.iter().copied().fold(0.0, f64::max),
                per_agent_mean_cpu_s: per_agent.into_iter().map(|t| t / nsteps).collect(),
            },
        }
    }

    /// One row per `(k, agent)`, `k = 0..=steps`; the final row carries the
    /// state only.
    pub fn write_csv<W: io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let n = self.states[0].iter().map(|x| x.len()).max().unwrap_or(0);
        let m = self
            .inputs
            .first()
            .map_or(0, |us| us.iter().map(|u| u.len()).max().unwrap_or(0));
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = vec!["k".into(), "agent".into()];
        header.extend((0..n).map(|d| format!("x{d}")));
        header.extend((0..m).map(|d| format!("u{d}")));
        header.extend(
            [
                "predicted_cost",
                "candidate_cost",
                "candidate_feasible",
                "sqp_iterations",
                "status",
                "kkt",
                "adopted",
                "solve_cpu_s",
                "solve_wall_s",
            ]
            .map(String::from),
        );
        w.write_record(&header)?;
        let num = |v: f64| format!("{v:e}");
        for (k, xs) in self.states.iter().enumerate() {
            for (a, x) in xs.iter().enumerate() {
                let mut rec = vec![k.to_string(), self.agent_ids[a].to_string()];
                rec.extend((0..n).map(|d| x.get(d).map_or(String::new(), |v| num(*v))));
                let u = self.inputs.get(k).map(|us| &us[a]);
                rec.extend(
                    (0..m).map(|d| u.and_then(|u| u.get(d)).map_or(String::new(), |v| num(*v))),
                );
                match self.steps.get(k).map(|s| &s[a]) {
                    Some(s) => rec.extend([
                        num(s.predicted_cost),
                        s.candidate_cost.map_or(String::new(), num),
                        s.candidate_feasible
                            .map_or(String::new(), |b| b.to_string()),
                        s.sqp_iterations.to_string(),
                        s.status.clone(),
                        num(s.kkt),
                        s.adopted.clone(),
                        num(s.solve_cpu_s),
                        num(s.solve_wall_s),
                    ]),
                    None => rec.extend(std::iter::repeat_n(String::new(), 9)),
                }
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Largest `‖x[k+1] − f(x[k], u[k])‖∞` over the run.
    pub fn replay_residual(&self, scenario: &Scenario) -> f64 {
        let mut worst: f64 = 0.0;
        for (k, us) in self.inputs.iter().enumerate() {
            for (a, u) in us.iter().enumerate() {
                let model = &scenario.agents[a].model;
                match model.step(&self.states[k][a], u) {
                    Ok(next) => worst = worst.max((next - &self.states[k + 1][a]).amax()),
                    Err(_) => return f64::INFINITY,
                }
            }
        }
        worst
    }
}

/// States and inputs read back from [`RunRecord::write_csv`] output:
/// `(states[k][a], inputs[k][a])`.
pub type CsvTrajectories = (Vec<Vec<DVector<f64>>>, Vec<Vec<DVector<f64>>>);

pub fn read_csv_trajectories<R: io::Read>(
    input: R,
    dims: &[(usize, usize)],
) -> Result<CsvTrajectories, csv::Error> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let mut states: Vec<Vec<DVector<f64>>> = Vec::new();
    let mut inputs: Vec<Vec<DVector<f64>>> = Vec::new();
    let parse = |s: &str| -> f64 { s.parse().unwrap_or(f64::NAN) };
    for (row_idx, row) in rdr.records().enumerate() {
        let row = row?;
        let a = row_idx % dims.len();
        let (n, m) = dims[a];
        if a == 0 {
            states.push(Vec::new());
        }
        let x = DVector::from_iterator(
            n,
            (0..n).map(|d| col(&format!("x{d}")).map_or(f64::NAN, |c| parse(&row[c]))),
        );
        states.last_mut().expect("pushed above").push(x);
        let has_input = col("u0").is_some_and(|c| !row[c].is_empty());
        if has_input {
            if a == 0 {
                inputs.push(Vec::new());
            }
            let u = DVector::from_iterator(
                m,
                (0..m).map(|d| col(&format!("u{d}")).map_or(f64::NAN, |c| parse(&row[c]))),
            );
            let last = inputs.len() - 1;
            inputs[last].push(u);
        }
    }
    Ok((states, inputs))
}

/// `distance` coupling data used by the distance report.
pub fn distance_parameters(c: &CoupledConstraint) -> Option<(f64, &[usize])> {
    match c {
        CoupledConstraint::Distance { d_max, slice } => Some((*d_max, slice)),
        CoupledConstraint::Nonlinear { .. } => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn actual_cost_hand_example() {
        // x = 1 then at the target, input at the target, Q = 2
        let w = CostWeights {
            q: DMatrix::from_element(1, 1, 2.0),
            r: DMatrix::from_element(1, 1, 3.0),
            target: DVector::zeros(1),
            target_input: DVector::zeros(1),
        };
        let states = vec![vec![DVector::from_element(1, 1.0)], vec![DVector::zeros(1)]];
        let inputs = vec![vec![DVector::zeros(1)]];
        assert_eq!(
            compute_actual_cost(&states, &inputs, std::slice::from_ref(&w)),
            vec![2.0]
        );
        // scaling Q scales the state term
        let w2 = CostWeights {
            q: &w.q * 5.0,
            ..w.clone()
        };
        assert_eq!(compute_actual_cost(&states, &inputs, &[w2]), vec![10.0]);
        // the missing final input counts as the target input
        let inputs = vec![vec![DVector::from_element(1, 1.0)]];
        assert_eq!(compute_actual_cost(&states, &inputs, &[w]), vec![5.0]);
    }

    #[test]
    fn zero_over_zero_is_one() {
        assert_eq!(cost_ratio(0.0, 0.0), 1.0);
        assert_eq!(cost_ratio(3.0, 2.0), 1.5);
    }
}
