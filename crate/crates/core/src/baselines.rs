//! Comparison controllers: the distance-constrained distributed MPC, the
//! consensus law filtered by the high-order barrier (NC-CBF), and a
//! centralized CLF-CBF program.
//!
//! All of them emit the same [`RunRecord`] as DSMPC.

use std::time::Instant;

use nalgebra::DVector;

use crate::barrier::{psi_m, BarrierFunction, BarrierSpec};
use crate::dynamics::{step, BoxSet, ControlVector, DynamicsModel, StateVector};
use crate::error::{Error, Result};
use crate::estimator::{consensus_tau, NeighborState};
use crate::nlp::{minimize, FdProblem, SolveStatus, SqpOptions};
use crate::ocp::{Residuals, SolveResult};
use crate::orchestrator::{self, AgentRound, ControllerKind, RoundRecord, RunOptions, RunRecord, Termination};
use crate::scenario::{ClfCbfBarrier, Scenario};
use crate::topology::Source;

/// Distance-constrained distributed MPC with horizon `horizon`.
pub fn run_mpc_dc(scenario: &Scenario, horizon: usize, opts: RunOptions) -> Result<RunRecord> {
    orchestrator::run(&scenario.with_horizon(horizon)?, ControllerKind::MpcDc, opts)
}

/// Outcome of a one-step program.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSolution {
    pub status: SolveStatus,
    pub u: ControlVector,
    pub objective: f64,
    pub solve_time: f64,
}

/// `argmin ‖u - u_nom‖²` subject to `ψ_m(x, u) ≥ 0` for every barrier and `u ∈ U`.
pub fn nc_cbf_solve(
    model: &dyn DynamicsModel,
    x: &StateVector,
    nominal_u: &ControlVector,
    barriers: &[BarrierSpec],
    inputs: &BoxSet,
) -> Result<StepSolution> {
    let started = Instant::now();
    let nominal = inputs.project(nominal_u);
    let mut active = false;
    for b in barriers {
        if psi_m(b, model, x, &nominal)? < 0.0 {
            active = true;
        }
    }
    if !active {
        return Ok(StepSolution { status: SolveStatus::Optimal, u: nominal, objective: 0.0, solve_time: started.elapsed().as_secs_f64() });
    }
    let problem = FdProblem {
        lower: inputs.lower.clone(),
        upper: inputs.upper.clone(),
        num_constraints: barriers.len(),
        objective: |u: &DVector<f64>| (u - &nominal).norm_squared(),
        constraints: |u: &DVector<f64>| {
            DVector::from_iterator(barriers.len(), barriers.iter().map(|b| -psi_m(b, model, x, u).unwrap_or(f64::NAN)))
        },
    };
    let res = minimize(&problem, &nominal, &SqpOptions::default());
    Ok(StepSolution { status: res.status, u: res.z, objective: res.objective, solve_time: started.elapsed().as_secs_f64() })
}

fn step_result(model: &dyn DynamicsModel, x: &StateVector, sol: &StepSolution, safety: f64) -> SolveResult {
    let next = model.eval(x, &sol.u);
    SolveResult {
        status: sol.status,
        u_star: vec![sol.u.clone()],
        x_star: vec![x.clone(), next],
        rho_star: 0.0,
        cost: sol.objective,
        solve_time: sol.solve_time,
        residuals: Residuals { safety, ..Residuals::default() },
        iterations: 0,
    }
}

/// Incoming links of `agent` evaluated at the current true states.
fn current_neighbors(scenario: &Scenario, agent: usize, states: &[StateVector]) -> Result<Vec<NeighborState>> {
    Ok(scenario
        .topology
        .links(agent)?
        .iter()
        .map(|l| NeighborState {
            state: match l.source {
                Source::Agent(j) => states[j].clone(),
                Source::Reference => scenario.topology.reference(agent).expect("reference").state.clone(),
            },
            weight: l.weight,
            offset: l.offset.clone(),
        })
        .collect())
}

/// Shared round loop of the one-step controllers. `solve_round` maps the
/// current states to one solution per agent.
fn run_one_step<F>(scenario: &Scenario, kind: ControllerKind, mut solve_round: F) -> Result<RunRecord>
where
    F: FnMut(&[StateVector]) -> Result<Vec<SolveResult>>,
{
    let p = scenario.params();
    let mut states = scenario.initial_states.clone();
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
        let results = solve_round(&states)?;
        let mut agents = Vec::with_capacity(states.len());
        let mut failed = None;
        for (i, solve) in results.into_iter().enumerate() {
            let ok = solve.status.is_feasible();
            if !ok && failed.is_none() {
                failed = Some((i, solve.status));
            }
            agents.push(AgentRound {
                agent: i,
                state: states[i].clone(),
                input: if ok { solve.u_star[0].clone() } else { DVector::zeros(0) },
                solve,
                buffer: None,
                eta: None,
                zeta: Vec::new(),
                terminal_bound: None,
                v_terminal: None,
            });
        }
        rounds.push(RoundRecord { t, max_formation_error: err, agents });
        if let Some((agent, status)) = failed {
            let term = if status == SolveStatus::Infeasible { Termination::Infeasible } else { Termination::NumericalFailure };
            break (term, Some((t, agent)));
        }
        let round = rounds.last().expect("just pushed");
        for (i, a) in round.agents.iter().enumerate() {
            states[i] = step(scenario.model.as_ref(), &states[i], &a.input)?;
        }
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

/// Consensus law filtered through the high-order barrier, one agent at a time.
pub fn run_nc_cbf(scenario: &Scenario) -> Result<RunRecord> {
    let model = scenario.model.clone();
    run_one_step(scenario, ControllerKind::NcCbf, |states| {
        let mut out = Vec::with_capacity(states.len());
        for (i, x) in states.iter().enumerate() {
            let nominal = consensus_tau(x, &current_neighbors(scenario, i, states)?, &scenario.gain, &scenario.limits.input)?;
            let barriers = scenario.barriers(i);
            let sol = nc_cbf_solve(model.as_ref(), x, &nominal, &barriers, &scenario.limits.input)?;
            let mut worst: f64 = 0.0;
            for b in &barriers {
                worst = worst.max(-psi_m(b, model.as_ref(), x, &sol.u)?);
            }
            out.push(step_result(model.as_ref(), x, &sol, worst));
        }
        Ok(out)
    })
}

/// Parameters of the centralized program.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClfCbfWeights {
    pub rate: f64,
    pub slack_weight: f64,
    pub barrier: ClfCbfBarrier,
}

impl ClfCbfWeights {
    pub fn from_scenario(scenario: &Scenario) -> Self {
        let b = &scenario.config.baselines;
        Self { rate: b.clf_rate, slack_weight: b.clf_slack_weight, barrier: b.clf_cbf_barrier }
    }
}

/// One joint program over `(u_1, …, u_N, s)`:
///
/// ```text
/// minimize    Σ‖u_i‖² + w·s²
/// subject to  V_ij(x⁺) - V_ij(x) ≤ -c·V_ij(x) + s    for every link,
///             barrier condition per agent and obstacle,  u_i ∈ U,  s ≥ 0
/// ```
///
/// with `V_ij = ‖K (x_i - x_j - d_ij)‖²`, which has relative degree one in the inputs. Returns the joint inputs or the failed status.
pub fn clf_cbf_solve(scenario: &Scenario, states: &[StateVector], weights: ClfCbfWeights) -> Result<(StepSolution, Vec<ControlVector>)> {
    let started = Instant::now();
    let model = scenario.model.as_ref();
    let n_agents = states.len();
    let q = model.input_dim();
    let nv = n_agents * q + 1;

    let mut pairs = Vec::new();
    for i in 0..n_agents {
        for l in scenario.topology.links(i)? {
            pairs.push((i, l.source, l.offset.clone()));
        }
    }
    let barriers: Vec<(usize, BarrierSpec)> =
        (0..n_agents).flat_map(|i| scenario.barriers(i).into_iter().map(move |b| (i, b))).collect();
    let m = pairs.len() + barriers.len();

    let split = |z: &DVector<f64>| -> Vec<ControlVector> { (0..n_agents).map(|i| z.rows(i * q, q).into_owned()).collect() };
    let next_states = |z: &DVector<f64>| -> Vec<StateVector> {
        split(z).iter().zip(states).map(|(u, x)| model.eval(x, u)).collect()
    };
    let reference = |i: usize| scenario.topology.reference(i).expect("reference").state.clone();
    let clf = |xs: &[StateVector], i: usize, src: Source, d: &DVector<f64>| -> f64 {
        let xj = match src {
            Source::Agent(j) => xs[j].clone(),
            Source::Reference => reference(i),
        };
        (&scenario.gain * (&xs[i] - xj - d)).norm_squared()
    };

    let mut lower = DVector::zeros(nv);
    let mut upper = DVector::zeros(nv);
    for i in 0..n_agents {
        lower.rows_mut(i * q, q).copy_from(&scenario.limits.input.lower);
        upper.rows_mut(i * q, q).copy_from(&scenario.limits.input.upper);
    }
    upper[nv - 1] = f64::INFINITY;

    let problem = FdProblem {
        lower,
        upper,
        num_constraints: m,
        objective: |z: &DVector<f64>| z.rows(0, n_agents * q).norm_squared() + weights.slack_weight * z[nv - 1] * z[nv - 1],
        constraints: |z: &DVector<f64>| {
            let next = next_states(z);
            let us = split(z);
            let mut c = DVector::zeros(m);
            for (k, (i, src, d)) in pairs.iter().enumerate() {
                let v_now = clf(states, *i, *src, d);
                c[k] = clf(&next, *i, *src, d) - (1.0 - weights.rate) * v_now - z[nv - 1];
            }
            for (k, (i, b)) in barriers.iter().enumerate() {
                let val = match weights.barrier {
                    ClfCbfBarrier::FirstOrder => b.h.value(&next[*i]) - (1.0 - b.phi[0]) * b.h.value(&states[*i]),
                    ClfCbfBarrier::HighOrder => psi_m(b, model, &states[*i], &us[*i]).unwrap_or(f64::NAN),
                };
                c[pairs.len() + k] = -val;
            }
            c
        },
    };
    let mut z0 = DVector::zeros(nv);
    z0[nv - 1] = pairs
        .iter()
        .map(|(i, src, d)| {
            let next = next_states(&z0);
            clf(&next, *i, *src, d) - (1.0 - weights.rate) * clf(states, *i, *src, d)
        })
        .fold(0.0, f64::max);
    let res = minimize(&problem, &z0, &SqpOptions::default());
    let inputs = split(&res.z);
    Ok((StepSolution { status: res.status, u: res.z.clone(), objective: res.objective, solve_time: started.elapsed().as_secs_f64() }, inputs))
}

/// The centralized baseline: one joint solve per round.
pub fn run_clf_cbf(scenario: &Scenario) -> Result<RunRecord> {
    let weights = ClfCbfWeights::from_scenario(scenario);
    let model = scenario.model.clone();
    run_one_step(scenario, ControllerKind::ClfCbf, |states| {
        let (joint, inputs) = clf_cbf_solve(scenario, states, weights)?;
        Ok(states
            .iter()
            .zip(inputs)
            .map(|(x, u)| {
                let sol = StepSolution { u, ..joint.clone() };
                let worst = scenario
                    .obstacles
                    .iter()
                    .map(|o| -o.value(&model.eval(x, &sol.u)))
                    .fold(0.0, f64::max);
                step_result(model.as_ref(), x, &sol, worst)
            })
            .collect())
    })
}

/// Runs any controller on a scenario.
pub fn run_controller(scenario: &Scenario, kind: ControllerKind, opts: RunOptions) -> Result<RunRecord> {
    match kind {
        ControllerKind::Dsmpc | ControllerKind::MpcDc => orchestrator::run(scenario, kind, opts),
        ControllerKind::NcCbf => run_nc_cbf(scenario),
        ControllerKind::ClfCbf => run_clf_cbf(scenario),
    }
}

/// Checks that a joint input is admissible for the CLF-CBF barrier rows.
pub fn clf_cbf_barrier_margin(scenario: &Scenario, states: &[StateVector], inputs: &[ControlVector], barrier: ClfCbfBarrier) -> Result<f64> {
    if states.len() != inputs.len() {
        return Err(Error::domain("one input per agent expected"));
    }
    let model = scenario.model.as_ref();
    let mut worst = f64::INFINITY;
    for (i, (x, u)) in states.iter().zip(inputs).enumerate() {
        for b in scenario.barriers(i) {
            let val = match barrier {
                ClfCbfBarrier::FirstOrder => b.h.value(&model.eval(x, u)) - (1.0 - b.phi[0]) * b.h.value(x),
                ClfCbfBarrier::HighOrder => psi_m(&b, model, x, u)?,
            };
            worst = worst.min(val);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::barrier::AffineBarrier;
    use crate::dynamics::DoubleIntegrator;
    use crate::scenario::{benchmark_config, AgentConfig, BoundsConfig, EdgeConfig, ModelConfig, ObstacleConfig, PhiConfig, ScenarioConfig};

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    fn di_barrier() -> (DoubleIntegrator, BarrierSpec, StateVector) {
        let spec = BarrierSpec::new(Arc::new(AffineBarrier { weights: v(&[1.0, 0.0]), offset: 0.0 }), vec![0.5, 0.9]).unwrap();
        (DoubleIntegrator { dt: 0.1 }, spec, v(&[1.0, -1.0]))
    }

    #[test]
    fn inactive_filter_returns_nominal() {
        let (m, spec, x) = di_barrier();
        let s = nc_cbf_solve(&m, &x, &v(&[0.2]), &[spec], &BoxSet::symmetric(&[0.5])).unwrap();
        assert_eq!(s.u, v(&[0.2]));
    }

    #[test]
    fn projects_onto_half_line() {
        let (m, spec, x) = di_barrier();
        let s = nc_cbf_solve(&m, &x, &v(&[-40.0]), &[spec], &BoxSet::symmetric(&[50.0])).unwrap();
        assert!(s.status.is_feasible());
        assert!((s.u[0] + 31.0).abs() < 1e-6, "{}", s.u);
    }

    #[test]
    fn box_binds_before_barrier() {
        let (m, spec, x) = di_barrier();
        let s = nc_cbf_solve(&m, &x, &v(&[-40.0]), &[spec.clone()], &BoxSet::symmetric(&[0.5])).unwrap();
        assert_eq!(s.u, v(&[-0.5]));
        assert!((psi_m(&spec, &m, &x, &s.u).unwrap() - 0.305).abs() < 1e-12);
    }

    fn two_single_integrators(p1: [f64; 2], p2: [f64; 2]) -> Scenario {
        let mut c = ScenarioConfig {
            name: "pair".into(),
            model: ModelConfig::SingleIntegrator { dt: 0.1, dim: 2 },
            state_bounds: BoundsConfig { lower: vec![-5.0; 2], upper: vec![5.0; 2] },
            input_bounds: BoundsConfig { lower: vec![-1.0; 2], upper: vec![1.0; 2] },
            agents: vec![
                AgentConfig { initial_state: p1.to_vec(), phi: PhiConfig::Uniform(0.3), reference: None },
                AgentConfig { initial_state: p2.to_vec(), phi: PhiConfig::Uniform(0.3), reference: None },
            ],
            edges: vec![EdgeConfig { from: 1, to: 2, weight: 1.0, offset: vec![0.5, 0.0] }],
            obstacles: vec![ObstacleConfig { center: [0.0, 0.0], radius: 0.5 }],
            controller: Default::default(),
            baselines: Default::default(),
            seed: None,
        };
        c.controller.barrier_order = 1;
        c.controller.q = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        c.controller.r = c.controller.q.clone();
        c.controller.gain = c.controller.q.clone();
        c.build().unwrap()
    }

    #[test]
    fn clf_cbf_at_formation_is_idle() {
        let s = two_single_integrators([3.0, 3.0], [3.5, 3.0]);
        let (sol, inputs) = clf_cbf_solve(&s, &s.initial_states, ClfCbfWeights::from_scenario(&s)).unwrap();
        assert!(sol.status.is_feasible());
        for u in inputs {
            assert!(u.amax() < 1e-6, "{u}");
        }
    }

    #[test]
    fn clf_cbf_pair_near_obstacle_is_solved() {
        let s = two_single_integrators([-0.62, 0.05], [0.9, -0.8]);
        let w = ClfCbfWeights::from_scenario(&s);
        let (sol, inputs) = clf_cbf_solve(&s, &s.initial_states, w).unwrap();
        assert!(sol.status.is_feasible(), "{:?}", sol.status);
        assert!(clf_cbf_barrier_margin(&s, &s.initial_states, &inputs, w.barrier).unwrap() >= -1e-6);

        // a grid over the joint box finds an admissible point too
        let grid: Vec<f64> = (0..=8).map(|k| -1.0 + 0.25 * k as f64).collect();
        let mut found = false;
        'outer: for a in &grid {
            for b in &grid {
                for c in &grid {
                    for d in &grid {
                        let us = [v(&[*a, *b]), v(&[*c, *d])];
                        if clf_cbf_barrier_margin(&s, &s.initial_states, &us, w.barrier).unwrap() >= 0.0 {
                            found = true;
                            break 'outer;
                        }
                    }
                }
            }
        }
        assert!(found);
    }

    #[test]
    fn idle_filter_reproduces_consensus() {
        let mut c = benchmark_config();
        c.obstacles = vec![ObstacleConfig { center: [0.0, 4.5], radius: 0.1 }];
        c.controller.t_max = 30;
        let s = c.build().unwrap();
        let record = run_nc_cbf(&s).unwrap();
        let mut states = s.initial_states.clone();
        for round in &record.rounds {
            let inputs: Vec<_> = (0..states.len())
                .map(|i| consensus_tau(&states[i], &current_neighbors(&s, i, &states).unwrap(), &s.gain, &s.limits.input).unwrap())
                .collect();
            for (i, a) in round.agents.iter().enumerate() {
                assert_eq!(a.state, states[i]);
                assert_eq!(a.input, inputs[i]);
            }
            for i in 0..states.len() {
                states[i] = step(s.model.as_ref(), &states[i], &inputs[i]).unwrap();
            }
        }
        assert_eq!(record.rounds.len(), 30);
    }
}
