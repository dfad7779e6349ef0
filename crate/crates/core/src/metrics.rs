//! Table-style summary of a run.

use serde::{Deserialize, Serialize};

use crate::codec::nan_null;
use crate::dynamics::StateVector;
use crate::estimator::weighted_norm;
use crate::orchestrator::{RunRecord, Termination};
use crate::scenario::Scenario;
use crate::topology::Source;

/// One row of the comparison table. Runs that end infeasible carry NaN in
/// every numeric column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub controller: String,
    pub status: Termination,
    pub horizon: Option<usize>,
    pub gamma: Option<f64>,
    pub rounds: usize,
    /// Mean and standard deviation of the per-solve wall-clock time, seconds.
    #[serde(with = "nan_null")]
    pub act_mean: f64,
    #[serde(with = "nan_null")]
    pub act_std: f64,
    /// Smallest `‖p_i - c‖ - r` over every visited state.
    #[serde(with = "nan_null")]
    pub min_d: f64,
    /// Largest distance `‖p_i - p_j‖` along a real edge.
    #[serde(with = "nan_null")]
    pub max_r: f64,
    /// Realized stage costs on the true states and applied inputs.
    #[serde(with = "nan_null")]
    pub cost: f64,
    /// `cost` plus the tracking term at the final states.
    #[serde(with = "nan_null")]
    pub cost_with_terminal: f64,
}

impl MetricsRow {
    pub fn solved(&self) -> bool {
        matches!(self.status, Termination::Converged | Termination::TMax)
    }
}

/// Mean and population standard deviation; NaN for an empty sample.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `Σ_j ‖x_i - x_j - d_ij‖_Q` over the links of `agent`, references included.
pub fn tracking_cost(scenario: &Scenario, agent: usize, states: &[StateVector]) -> f64 {
    scenario
        .topology
        .links(agent)
        .expect("validated agent")
        .iter()
        .map(|l| {
            let xj = match l.source {
                Source::Agent(j) => &states[j],
                Source::Reference => &scenario.topology.reference(agent).expect("reference link").state,
            };
            weighted_norm(&(&states[agent] - xj - l.offset), &scenario.q)
        })
        .sum()
}

fn position_distance(a: &StateVector, b: &StateVector) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn compute_metrics(record: &RunRecord, scenario: &Scenario) -> MetricsRow {
    let predictive = record.controller.is_predictive();
    let mut row = MetricsRow {
        controller: record.controller.label().to_string(),
        status: record.termination,
        horizon: predictive.then_some(scenario.params().horizon),
        gamma: (record.controller == crate::orchestrator::ControllerKind::Dsmpc).then_some(scenario.params().gamma),
        rounds: record.rounds.len(),
        act_mean: f64::NAN,
        act_std: f64::NAN,
        min_d: f64::NAN,
        max_r: f64::NAN,
        cost: f64::NAN,
        cost_with_terminal: f64::NAN,
    };
    if !matches!(record.termination, Termination::Converged | Termination::TMax) {
        return row;
    }

    let times: Vec<f64> = record.rounds.iter().flat_map(|r| r.agents.iter().map(|a| a.solve.solve_time)).collect();
    (row.act_mean, row.act_std) = mean_std(&times);

    let mut history: Vec<Vec<StateVector>> = record.state_history();
    history.push(record.final_states.clone());
    row.min_d = history.iter().flatten().map(|x| scenario.clearance(x)).fold(f64::INFINITY, f64::min);
    row.max_r = history
        .iter()
        .flat_map(|states| scenario.topology.edges().iter().map(move |e| position_distance(&states[e.to], &states[e.from])))
        .fold(0.0, f64::max);

    let mut cost = 0.0;
    for round in &record.rounds {
        let states: Vec<StateVector> = round.agents.iter().map(|a| a.state.clone()).collect();
        for a in &round.agents {
            cost += tracking_cost(scenario, a.agent, &states) + weighted_norm(&a.input, &scenario.r);
        }
    }
    row.cost = cost;
    row.cost_with_terminal =
        cost + (0..scenario.num_agents()).map(|i| tracking_cost(scenario, i, &record.final_states)).sum::<f64>();
    row
}

/// Markdown table of rows, one line each.
pub fn markdown_table(rows: &[MetricsRow]) -> String {
    let mut out = String::from(
        "| controller | status | T_p | γ | act (s) | min d | max r | cost | cost + terminal |\n|---|---|---|---|---|---|---|---|---|\n",
    );
    let f = |v: f64, digits: usize| if v.is_finite() { format!("{v:.digits$}") } else { "NaN".into() };
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} ± {} | {} | {} | {} | {} |\n",
            r.controller,
            status_label(r.status),
            r.horizon.map_or("-".into(), |h| h.to_string()),
            r.gamma.map_or("-".into(), |g| g.to_string()),
            f(r.act_mean, 4),
            f(r.act_std, 4),
            f(r.min_d, 3),
            f(r.max_r, 3),
            f(r.cost, 1),
            f(r.cost_with_terminal, 1),
        ));
    }
    out
}

pub const CSV_HEADER: [&str; 12] =
    ["scenario", "controller", "status", "T_p", "gamma", "rounds", "act_mean", "act_std", "min_d", "max_r", "cost", "cost_with_terminal"];

/// Rows labelled by scenario name; non-finite values are written as `NaN`.
pub fn write_csv<W: std::io::Write>(rows: &[(String, MetricsRow)], out: W) -> crate::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    let f = |v: f64| if v.is_finite() { v.to_string() } else { "NaN".into() };
    for (name, r) in rows {
        w.write_record([
            name.clone(),
            r.controller.clone(),
            status_label(r.status).to_string(),
            r.horizon.map_or(String::new(), |h| h.to_string()),
            r.gamma.map_or(String::new(), |g| g.to_string()),
            r.rounds.to_string(),
            f(r.act_mean),
            f(r.act_std),
            f(r.min_d),
            f(r.max_r),
            f(r.cost),
            f(r.cost_with_terminal),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn status_label(t: Termination) -> &'static str {
    match t {
        Termination::Converged => "solved",
        Termination::TMax => "t_max",
        Termination::Infeasible => "infeas.",
        Termination::NumericalFailure => "failed",
    }
}
