//! Synchronous rounds: exchange estimates, solve every agent, apply the first
//! inputs, rebuild estimates from the shifted plans.

use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barrier::{best_appended_input, psi, BarrierSpec, ObstacleBarrier};
use crate::codec;
use crate::dynamics::{step, ControlVector, StateVector};
use crate::error::{Error, Result};
use crate::estimator::{
    build_estimate_buffer, compatibility_eta, shift_append, shift_with, weighted_norm, zeta, EstimateBuffer,
    NeighborState,
};
use crate::lyapunov::{initial_terminal_value, TerminalRule};
use crate::nlp::SolveStatus;
use crate::ocp::{Family, Margin, NeighborPlan, OcpProblem, SafetyConstraint, SolveResult};
use crate::scenario::{Scenario, ScenarioConfig};
use crate::topology::Source;
use crate::FEAS_TOL;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    TMax,
    Infeasible,
    NumericalFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    Dsmpc,
    MpcDc,
    NcCbf,
    ClfCbf,
}

impl ControllerKind {
    pub fn label(self) -> &'static str {
        match self {
            ControllerKind::Dsmpc => "DSMPC",
            ControllerKind::MpcDc => "MPC-DC",
            ControllerKind::NcCbf => "NC-CBF",
            ControllerKind::ClfCbf => "CLF-CBF",
        }
    }

    /// Receding-horizon controllers that publish estimates and use the terminal rule.
    pub fn is_predictive(self) -> bool {
        matches!(self, ControllerKind::Dsmpc | ControllerKind::MpcDc)
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dsmpc" => Ok(ControllerKind::Dsmpc),
            "mpc-dc" => Ok(ControllerKind::MpcDc),
            "nc-cbf" => Ok(ControllerKind::NcCbf),
            "clf-cbf" => Ok(ControllerKind::ClfCbf),
            other => Err(Error::config(format!("unknown controller {other:?}"))),
        }
    }
}

/// What one agent did in one round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentRound {
    pub agent: usize,
    #[serde(with = "codec::dvec")]
    pub state: StateVector,
    /// The applied input; empty when the solve failed.
    #[serde(with = "codec::dvec")]
    pub input: ControlVector,
    pub solve: SolveResult,
    /// Own announced trajectory used by the solve (predictive controllers only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buffer: Option<EstimateBuffer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub zeta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_terminal: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: usize,
    pub max_formation_error: f64,
    pub agents: Vec<AgentRound>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub controller: ControllerKind,
    pub scenario: ScenarioConfig,
    pub rounds: Vec<RoundRecord>,
    /// States after the last applied input.
    #[serde(with = "codec::dvec_list")]
    pub final_states: Vec<StateVector>,
    pub final_formation_error: f64,
    pub termination: Termination,
    /// `(round, agent)` of the failed solve, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<(usize, usize)>,
}

impl RunRecord {
    /// True states `x(0…T)` per round, followed by the final states.
    pub fn state_history(&self) -> Vec<Vec<StateVector>> {
        let mut out: Vec<Vec<StateVector>> =
            self.rounds.iter().map(|r| r.agents.iter().map(|a| a.state.clone()).collect()).collect();
        out.push(self.final_states.clone());
        out
    }

    pub fn all_feasible(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub parallel: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { parallel: true }
    }
}

/// Which safety and compatibility families a receding-horizon variant enforces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Variant {
    pub distance_safety: bool,
    pub compatibility: bool,
    pub rho_enabled: bool,
}

impl Variant {
    pub fn of(kind: ControllerKind, scenario: &Scenario) -> Self {
        match kind {
            ControllerKind::MpcDc => Variant {
                distance_safety: true,
                compatibility: false,
                rho_enabled: scenario.config.baselines.mpc_dc_rho_enabled,
            },
            _ => Variant { distance_safety: false, compatibility: true, rho_enabled: scenario.params().rho_enabled },
        }
    }
}

/// Everything an agent knows when it builds its round-`t` program.
#[derive(Debug, Clone)]
pub struct AgentContext {
    pub agent: usize,
    pub t: usize,
    pub state: StateVector,
    pub own_buffer: EstimateBuffer,
    /// Buffers of incoming links in `Topology::links` order.
    pub neighbor_buffers: Vec<EstimateBuffer>,
    pub terminal: TerminalRule,
}

/// The neighbor plans an agent sees, including its virtual reference.
fn neighbor_plans(scenario: &Scenario, ctx: &AgentContext) -> Result<Vec<NeighborPlan>> {
    let links = scenario.topology.links(ctx.agent)?;
    Ok(links
        .iter()
        .zip(&ctx.neighbor_buffers)
        .map(|(l, b)| NeighborPlan { buffer: b.clone(), weight: l.weight, offset: l.offset.clone() })
        .collect())
}

/// `η_i(t)` and the `ζ_ij(t)` it was computed from.
pub fn agent_eta(scenario: &Scenario, ctx: &AgentContext) -> Result<(f64, Vec<f64>)> {
    let p = scenario.params();
    let plans = neighbor_plans(scenario, ctx)?;
    let mut y_norms = Vec::new();
    let mut zetas = Vec::new();
    for nb in &plans {
        let y = &ctx.state - &nb.buffer.x_est[0] - &nb.offset;
        y_norms.push(weighted_norm(&y, &scenario.q));
        zetas.push(zeta(&ctx.own_buffer, &nb.buffer, &(-&nb.offset))?);
    }
    let eta = compatibility_eta(&y_norms, &zetas, p.gamma, scenario.config.model.dt(), p.horizon, p.eta_cap)?;
    Ok((eta, zetas))
}

pub(crate) fn build_problem(scenario: &Scenario, ctx: &AgentContext, variant: Variant) -> Result<(OcpProblem, Option<f64>, Vec<f64>)> {
    let p = scenario.params();
    let neighbors = neighbor_plans(scenario, ctx)?;
    let (eta, zetas) = if variant.compatibility {
        let (e, z) = agent_eta(scenario, ctx)?;
        (Some(e), z)
    } else {
        (None, Vec::new())
    };
    let safety = if variant.distance_safety {
        scenario.obstacles.iter().cloned().map(SafetyConstraint::Distance).collect()
    } else {
        let mut rows: Vec<SafetyConstraint> = scenario.barriers(ctx.agent).into_iter().map(SafetyConstraint::Barrier).collect();
        if let Some(d) = p.inter_agent_distance {
            rows.extend(separation_rows(scenario, ctx, d)?);
        }
        rows
    };
    let mut terminal = ctx.terminal.clone();
    terminal.rho_enabled = variant.rho_enabled;
    let problem = OcpProblem {
        model: scenario.model.clone(),
        limits: scenario.limits.clone(),
        horizon: p.horizon,
        t: ctx.t,
        x0: ctx.state.clone(),
        neighbors,
        own_buffer: Some(ctx.own_buffer.clone()),
        eta,
        safety,
        terminal,
        q: scenario.q.clone(),
        r: scenario.r.clone(),
        max_iterations: p.max_iterations,
    };
    Ok((problem, eta, zetas))
}

/// Barrier rows keeping `agent` at distance `d` from each real neighbor's
/// announced position, one row per step with the neighbor frozen there.
fn separation_rows(scenario: &Scenario, ctx: &AgentContext, d: f64) -> Result<Vec<SafetyConstraint>> {
    let mut out = Vec::new();
    for (l, buf) in scenario.topology.links(ctx.agent)?.iter().zip(&ctx.neighbor_buffers) {
        if l.source == Source::Reference {
            continue;
        }
        for step in 0..scenario.params().horizon {
            let p = &buf.x_est[step];
            let h = ObstacleBarrier::new([p[0], p[1]], d)?;
            let spec = BarrierSpec::new(Arc::new(h), scenario.phi[ctx.agent].clone())?;
            out.push(SafetyConstraint::StepBarrier { step, spec });
        }
    }
    Ok(out)
}

/// Buffer of a virtual reference: its constant state.
fn reference_buffer(scenario: &Scenario, agent: usize, t: usize) -> EstimateBuffer {
    let r = scenario.topology.reference(agent).expect("link says a reference exists");
    EstimateBuffer::constant(usize::MAX, t, &r.state, scenario.params().horizon, scenario.model.input_dim())
}

fn gather_neighbor_buffers(scenario: &Scenario, agent: usize, t: usize, buffers: &[EstimateBuffer]) -> Result<Vec<EstimateBuffer>> {
    scenario
        .topology
        .links(agent)?
        .iter()
        .map(|l| match l.source {
            Source::Agent(j) => Ok(buffers[j].clone()),
            Source::Reference => Ok(reference_buffer(scenario, agent, t)),
        })
        .collect()
}

/// Initial terminal rule of `agent`: consensus rollout with neighbors frozen at their initial states.
pub(crate) fn initial_terminal_rule(scenario: &Scenario, agent: usize, rho_enabled: bool) -> Result<TerminalRule> {
    let p = scenario.params();
    let frozen: Vec<NeighborState> = scenario
        .topology
        .links(agent)?
        .iter()
        .map(|l| NeighborState {
            state: match l.source {
                Source::Agent(j) => scenario.initial_states[j].clone(),
                Source::Reference => scenario.topology.reference(agent).expect("reference").state.clone(),
            },
            weight: l.weight,
            offset: l.offset.clone(),
        })
        .collect();
    let v_init = initial_terminal_value(
        scenario.model.as_ref(),
        &scenario.initial_states[agent],
        &frozen,
        &scenario.gain,
        &scenario.limits.input,
        p.horizon,
    )?;
    TerminalRule::new(p.lambda, v_init, rho_enabled, p.rho_weight)
}

/// Candidate input sequence for the next round: the plan shifted by one with
/// the input that best preserves every barrier appended.
pub fn shifted_candidate(scenario: &Scenario, agent: usize, solve: &SolveResult) -> Result<Vec<ControlVector>> {
    let horizon = solve.u_star.len();
    let terminal = &solve.x_star[horizon];
    let barriers: Vec<BarrierSpec> = scenario.barriers(agent);
    let (u_m, _) = best_appended_input(&barriers, scenario.model.as_ref(), terminal, &scenario.limits.input)?;
    Ok(shift_with(&solve.u_star, u_m))
}

fn solve_all(problems: &[(OcpProblem, Option<Vec<ControlVector>>)], parallel: bool) -> Vec<Result<SolveResult>> {
    let solve = |(p, ws): &(OcpProblem, Option<Vec<ControlVector>>)| p.solve(ws.as_deref());
    if parallel {
        problems.par_iter().map(solve).collect()
    } else {
        problems.iter().map(solve).collect()
    }
}

/// Runs DSMPC (or the distance-constrained variant) on a scenario.
pub fn run(scenario: &Scenario, kind: ControllerKind, opts: RunOptions) -> Result<RunRecord> {
    if !kind.is_predictive() {
        return Err(Error::config(format!("{} is not a receding-horizon controller", kind.label())));
    }
    let variant = Variant::of(kind, scenario);
    let p = scenario.params();
    let n_agents = scenario.num_agents();
    let q = scenario.model.input_dim();
    let mut states = scenario.initial_states.clone();
    let mut buffers: Vec<EstimateBuffer> =
        (0..n_agents).map(|i| EstimateBuffer::initial(i, &states[i], p.horizon, q)).collect();
    let mut rules = (0..n_agents)
        .map(|i| initial_terminal_rule(scenario, i, variant.rho_enabled))
        .collect::<Result<Vec<_>>>()?;
    let mut warm: Vec<Option<Vec<ControlVector>>> = buffers.iter().map(|b| Some(b.u_est.clone())).collect();
    let mut rounds = Vec::new();
    let mut t = 0;

    let (termination, failure) = loop {
        let err = scenario.topology.max_formation_error(&states)?;
        if err <= p.epsilon {
            break (Termination::Converged, None);
        }
        if t >= p.t_max {
            break (Termination::TMax, None);
        }

        let mut contexts = Vec::with_capacity(n_agents);
        let mut problems = Vec::with_capacity(n_agents);
        let mut meta = Vec::with_capacity(n_agents);
        for i in 0..n_agents {
            let ctx = AgentContext {
                agent: i,
                t,
                state: states[i].clone(),
                own_buffer: buffers[i].clone(),
                neighbor_buffers: gather_neighbor_buffers(scenario, i, t, &buffers)?,
                terminal: rules[i].clone(),
            };
            let (problem, eta, zetas) = build_problem(scenario, &ctx, variant)?;
            let bound = problem.terminal.bound(t, p.horizon)?;
            meta.push((eta, zetas, bound));
            problems.push((problem, warm[i].take()));
            contexts.push(ctx);
        }

        let results = solve_all(&problems, opts.parallel);
        let mut agents = Vec::with_capacity(n_agents);
        let mut failed = None;
        for (i, res) in results.into_iter().enumerate() {
            let solve = res?;
            let (eta, zetas, bound) = meta[i].clone();
            let ok = solve.status.is_feasible();
            if !ok && failed.is_none() {
                failed = Some((i, solve.status));
            }
            let v_terminal = ok.then(|| problems[i].0.terminal_value(&solve.x_star[p.horizon]));
            agents.push(AgentRound {
                agent: i,
                state: states[i].clone(),
                input: if ok { solve.u_star[0].clone() } else { DVector::zeros(0) },
                solve,
                buffer: Some(contexts[i].own_buffer.clone()),
                eta,
                zeta: zetas,
                terminal_bound: Some(bound),
                v_terminal,
            });
        }
        rounds.push(RoundRecord { t, max_formation_error: err, agents });
        if let Some((agent, status)) = failed {
            let term = if status == SolveStatus::Infeasible { Termination::Infeasible } else { Termination::NumericalFailure };
            break (term, Some((t, agent)));
        }

        let round = rounds.last().expect("just pushed");
        let terminals: Vec<StateVector> = round.agents.iter().map(|a| a.solve.x_star[p.horizon].clone()).collect();
        let mut next_buffers = Vec::with_capacity(n_agents);
        for (i, a) in round.agents.iter().enumerate() {
            let next = step(scenario.model.as_ref(), &states[i], &a.input)?;
            let neighbor_terminals: Vec<NeighborState> = scenario
                .topology
                .links(i)?
                .iter()
                .map(|l| NeighborState {
                    state: match l.source {
                        Source::Agent(j) => terminals[j].clone(),
                        Source::Reference => scenario.topology.reference(i).expect("reference").state.clone(),
                    },
                    weight: l.weight,
                    offset: l.offset.clone(),
                })
                .collect();
            let u_est = shift_append(&a.solve.u_star, &terminals[i], &neighbor_terminals, &scenario.gain, &scenario.limits.input)?;
            next_buffers.push(build_estimate_buffer(scenario.model.as_ref(), i, t + 1, &next, u_est)?);
            rules[i].record(a.v_terminal.expect("feasible round"));
            warm[i] = Some(shifted_candidate(scenario, i, &a.solve)?);
            states[i] = next;
        }
        buffers = next_buffers;
        t += 1;
    };

    let final_formation_error = scenario.topology.max_formation_error(&states)?;
    Ok(RunRecord {
        controller: kind,
        scenario: scenario.config.clone(),
        rounds,
        final_states: states,
        final_formation_error,
        termination,
        failure,
    })
}

/// Context of `agent` at round `t` reconstructed from a record.
pub fn context_from_record(scenario: &Scenario, record: &RunRecord, t: usize, agent: usize) -> Result<AgentContext> {
    let round = record.rounds.get(t).ok_or_else(|| Error::state(format!("round {t} not in record")))?;
    let buffers: Vec<EstimateBuffer> = round
        .agents
        .iter()
        .map(|a| a.buffer.clone().ok_or_else(|| Error::state("record carries no estimate buffers")))
        .collect::<Result<_>>()?;
    let mut terminal = initial_terminal_rule(scenario, agent, Variant::of(record.controller, scenario).rho_enabled)?;
    if t > 0 {
        let prev = record.rounds[t - 1].agents[agent]
            .v_terminal
            .ok_or_else(|| Error::state(format!("round {} has no terminal value", t - 1)))?;
        terminal.record(prev);
    }
    Ok(AgentContext {
        agent,
        t,
        state: round.agents[agent].state.clone(),
        own_buffer: buffers[agent].clone(),
        neighbor_buffers: gather_neighbor_buffers(scenario, agent, t, &buffers)?,
        terminal,
    })
}

/// The program `agent` solved at round `t`, rebuilt from the record alone.
pub fn problem_from_record(scenario: &Scenario, record: &RunRecord, t: usize, agent: usize) -> Result<OcpProblem> {
    let ctx = context_from_record(scenario, record, t, agent)?;
    Ok(build_problem(scenario, &ctx, Variant::of(record.controller, scenario))?.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateReport {
    pub t: usize,
    pub agent: usize,
    /// Slack that makes the terminal constraint hold for the candidate.
    pub rho: f64,
    pub margins: Vec<Margin>,
    /// Largest compatibility deviation `‖x(k) - x^a(k)‖_Q` along the candidate.
    pub compatibility_residual: f64,
}

impl CandidateReport {
    pub fn worst(&self) -> Option<&Margin> {
        self.margins.iter().min_by(|a, b| a.margin.total_cmp(&b.margin))
    }

    pub fn passes(&self) -> bool {
        self.margins.iter().all(|m| m.margin >= -FEAS_TOL)
    }
}

/// Evaluates the shifted plan of round `t` against every constraint of round `t + 1`.
pub fn shifted_candidate_oracle(scenario: &Scenario, record: &RunRecord, t: usize) -> Result<Vec<CandidateReport>> {
    if t + 1 >= record.rounds.len() {
        return Err(Error::state(format!("round {} not in record", t + 1)));
    }
    let mut out = Vec::new();
    for agent in 0..scenario.num_agents() {
        let prev = &record.rounds[t].agents[agent].solve;
        if !prev.status.is_feasible() {
            return Err(Error::state(format!("round {t} agent {} was not feasible", agent + 1)));
        }
        let candidate = shifted_candidate(scenario, agent, prev)?;
        let problem = problem_from_record(scenario, record, t + 1, agent)?;
        let rho = if problem.terminal.rho_enabled { problem.required_rho(&candidate)? } else { 0.0 };
        let margins = problem.margins(&candidate, rho)?;
        let xs = problem.rollout(&candidate);
        let own = problem.own_buffer.as_ref().expect("predictive problems carry their buffer");
        let compatibility_residual = (1..problem.horizon)
            .map(|k| weighted_norm(&(&xs[k] - &own.x_est[k]), &problem.q))
            .fold(0.0, f64::max);
        out.push(CandidateReport { t: t + 1, agent, rho, margins, compatibility_residual });
    }
    Ok(out)
}

/// Per-round aggregates used to check convergence and the bounded-η chain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundSummary {
    pub t: usize,
    pub max_formation_error: f64,
    pub v_terminal: Vec<Option<f64>>,
    pub rho: Vec<f64>,
    pub eta: Vec<Option<f64>>,
    /// Smallest `h` over agents and obstacles at the round's true states.
    pub h_min: f64,
    /// Smallest `ψ_l`, `l < m`, over agents and obstacles.
    pub psi_min: f64,
}

pub fn convergence_monitor(scenario: &Scenario, record: &RunRecord) -> Result<Vec<RoundSummary>> {
    let mut out = Vec::new();
    for r in &record.rounds {
        let mut h_min = f64::INFINITY;
        let mut psi_min = f64::INFINITY;
        for a in &r.agents {
            h_min = h_min.min(scenario.h_min(&a.state));
            for b in scenario.barriers(a.agent) {
                for l in 0..b.order() {
                    psi_min = psi_min.min(psi(&b, scenario.model.as_ref(), l, &a.state)?);
                }
            }
        }
        out.push(RoundSummary {
            t: r.t,
            max_formation_error: r.max_formation_error,
            v_terminal: r.agents.iter().map(|a| a.v_terminal).collect(),
            rho: r.agents.iter().map(|a| a.solve.rho_star).collect(),
            eta: r.agents.iter().map(|a| a.eta).collect(),
            h_min,
            psi_min,
        });
    }
    Ok(out)
}

pub fn family_name(f: Family) -> &'static str {
    match f {
        Family::InputBox => "input box",
        Family::StateBox => "state box",
        Family::Safety => "safety",
        Family::Compatibility => "compatibility",
        Family::Terminal => "terminal",
        Family::RhoSign => "slack sign",
    }
}
