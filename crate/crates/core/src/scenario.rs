//! Scenario files: a single JSON document describing the model, the graph,
//! the initial states, obstacles and controller parameters.
//!
//! Agents are numbered from 1 in files and from 0 in the API.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::barrier::{min_psi, BarrierSpec, ObstacleBarrier};
use crate::codec::matrix_from_rows;
use crate::dynamics::{BoxSet, DoubleIntegrator, DynamicsModel, Limits, SingleIntegrator, StateVector, VehicleModel};
use crate::error::{Error, Result};
use crate::topology::{Edge, Topology, VirtualReference};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Vehicle {
        #[serde(default = "default_dt")]
        dt: f64,
        #[serde(default = "default_drag")]
        drag: f64,
    },
    DoubleIntegrator {
        #[serde(default = "default_dt")]
        dt: f64,
    },
    SingleIntegrator {
        #[serde(default = "default_dt")]
        dt: f64,
        dim: usize,
    },
}

fn default_dt() -> f64 {
    0.1
}
fn default_drag() -> f64 {
    -3.0
}

impl ModelConfig {
    pub fn build(&self) -> Arc<dyn DynamicsModel> {
        match *self {
            ModelConfig::Vehicle { dt, drag } => Arc::new(VehicleModel { dt, drag }),
            ModelConfig::DoubleIntegrator { dt } => Arc::new(DoubleIntegrator { dt }),
            ModelConfig::SingleIntegrator { dt, dim } => Arc::new(SingleIntegrator { dt, dim }),
        }
    }

    pub fn dt(&self) -> f64 {
        match *self {
            ModelConfig::Vehicle { dt, .. }
            | ModelConfig::DoubleIntegrator { dt }
            | ModelConfig::SingleIntegrator { dt, .. } => dt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsConfig {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// One gain for every order, or one gain per order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PhiConfig {
    Uniform(f64),
    PerOrder(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceConfig {
    pub state: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<Vec<f64>>,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub initial_state: Vec<f64>,
    pub phi: PhiConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeConfig {
    pub from: usize,
    pub to: usize,
    #[serde(default = "one")]
    pub weight: f64,
    /// Desired `x_to - x_from`.
    pub offset: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleConfig {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub horizon: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub barrier_order: usize,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    /// Consensus gain `K` (q×n).
    pub gain: Vec<Vec<f64>>,
    pub epsilon: f64,
    pub t_max: usize,
    pub rho_enabled: bool,
    pub rho_weight: f64,
    pub eta_cap: f64,
    pub max_iterations: usize,
    /// Optional pairwise separation kept from neighbors' announced positions.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inter_agent_distance: Option<f64>,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            horizon: 5,
            gamma: 0.1,
            lambda: 0.9,
            barrier_order: 2,
            q: identity_rows(4),
            r: identity_rows(2),
            gain: vec![vec![0.5, 0.0, 1.0, 0.0], vec![0.0, 0.5, 0.0, 1.0]],
            epsilon: 0.05,
            t_max: 400,
            rho_enabled: true,
            rho_weight: 1.0,
            eta_cap: 1e6,
            max_iterations: 200,
            inter_agent_distance: None,
        }
    }
}

/// How the centralized CLF-CBF baseline writes its barrier constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClfCbfBarrier {
    /// `h(f(x,u)) - (1-φ) h(x) ≥ 0`.
    FirstOrder,
    /// `ψ_m(x,u) ≥ 0`, the same constraint DSMPC uses.
    HighOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    /// Decrease rate `c` in `V(x⁺) - V(x) ≤ -c V(x) + s`.
    pub clf_rate: f64,
    pub clf_slack_weight: f64,
    pub clf_cbf_barrier: ClfCbfBarrier,
    /// Terminal slack for the distance-constrained MPC.
    pub mpc_dc_rho_enabled: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { clf_rate: 0.1, clf_slack_weight: 1e3, clf_cbf_barrier: ClfCbfBarrier::FirstOrder, mpc_dc_rho_enabled: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub model: ModelConfig,
    pub state_bounds: BoundsConfig,
    pub input_bounds: BoundsConfig,
    pub agents: Vec<AgentConfig>,
    #[serde(default)]
    pub edges: Vec<EdgeConfig>,
    #[serde(default)]
    pub obstacles: Vec<ObstacleConfig>,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub baselines: BaselineConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn identity_rows(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

/// A validated scenario with every derived object built.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub model: Arc<dyn DynamicsModel>,
    pub limits: Limits,
    pub topology: Topology,
    pub initial_states: Vec<StateVector>,
    pub obstacles: Vec<ObstacleBarrier>,
    /// Per agent, the gains `φ_1…φ_m`.
    pub phi: Vec<Vec<f64>>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub gain: DMatrix<f64>,
}

impl Scenario {
    pub fn num_agents(&self) -> usize {
        self.initial_states.len()
    }

    pub fn params(&self) -> &ControllerConfig {
        &self.config.controller
    }

    pub fn barriers(&self, agent: usize) -> Vec<BarrierSpec> {
        self.obstacles
            .iter()
            .map(|o| BarrierSpec::new(Arc::new(o.clone()), self.phi[agent].clone()).expect("validated gains"))
            .collect()
    }

    /// Smallest clearance `‖p - c‖ - r` over obstacles; infinite without obstacles.
    pub fn clearance(&self, x: &StateVector) -> f64 {
        self.obstacles.iter().map(|o| o.clearance(x)).fold(f64::INFINITY, f64::min)
    }

    /// Smallest `h(x)` over obstacles; infinite without obstacles.
    pub fn h_min(&self, x: &StateVector) -> f64 {
        use crate::barrier::BarrierFunction;
        self.obstacles.iter().map(|o| o.value(x)).fold(f64::INFINITY, f64::min)
    }

    pub fn with_horizon(&self, horizon: usize) -> Result<Scenario> {
        let mut c = self.config.clone();
        c.controller.horizon = horizon;
        c.build()
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Scenario> {
        let mut c = self.config.clone();
        c.controller.gamma = gamma;
        c.build()
    }
}

fn check_pd(name: &str, rows: &[Vec<f64>], n: usize, errs: &mut Vec<String>) -> Option<DMatrix<f64>> {
    let Some(m) = matrix_from_rows(rows) else {
        errs.push(format!("controller.{name}: rows have different lengths"));
        return None;
    };
    if m.shape() != (n, n) {
        errs.push(format!("controller.{name}: expected {n}×{n}, got {}×{}", m.nrows(), m.ncols()));
        return None;
    }
    if (&m - m.transpose()).amax() > 1e-12 || Cholesky::new(m.clone()).is_none() {
        errs.push(format!("controller.{name}: not symmetric positive definite"));
        return None;
    }
    Some(m)
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Validates and builds, reporting every problem found.
    pub fn build(&self) -> Result<Scenario> {
        let mut errs = Vec::new();
        let model = self.model.build();
        let (n, q) = (model.state_dim(), model.input_dim());
        if !(self.model.dt() > 0.0) {
            errs.push("model.dt: must be positive".into());
        }
        if let ModelConfig::SingleIntegrator { dim: 0, .. } = self.model {
            errs.push("model.dim: must be positive".into());
        }

        let mut bounds = |b: &BoundsConfig, name: &str, dim: usize| -> Option<BoxSet> {
            if b.lower.len() != dim || b.upper.len() != dim {
                errs.push(format!("{name}: expected {dim} entries"));
                return None;
            }
            match BoxSet::new(DVector::from_vec(b.lower.clone()), DVector::from_vec(b.upper.clone())) {
                Ok(bx) => Some(bx),
                Err(e) => {
                    errs.push(format!("{name}: {e}"));
                    None
                }
            }
        };
        let state_box = bounds(&self.state_bounds, "state_bounds", n);
        let input_box = bounds(&self.input_bounds, "input_bounds", q);

        let c = &self.controller;
        if !(0.0..1.0).contains(&c.gamma) {
            errs.push(format!("controller.gamma: {} outside [0, 1)", c.gamma));
        }
        if !(c.lambda > 0.0 && c.lambda <= 1.0) {
            errs.push(format!("controller.lambda: {} outside (0, 1]", c.lambda));
        }
        if c.horizon < 2 {
            errs.push(format!("controller.horizon: {} is below 2", c.horizon));
        }
        if c.barrier_order == 0 {
            errs.push("controller.barrier_order: must be positive".into());
        }
        if !(c.epsilon > 0.0) {
            errs.push("controller.epsilon: must be positive".into());
        }
        if !(c.rho_weight > 0.0) {
            errs.push("controller.rho_weight: must be positive".into());
        }
        if !(c.eta_cap > 0.0) {
            errs.push("controller.eta_cap: must be positive".into());
        }
        if c.inter_agent_distance.is_some_and(|d| !(d > 0.0)) {
            errs.push("controller.inter_agent_distance: must be positive".into());
        }
        if c.max_iterations == 0 {
            errs.push("controller.max_iterations: must be positive".into());
        }
        let qm = check_pd("q", &c.q, n, &mut errs);
        let rm = check_pd("r", &c.r, q, &mut errs);
        let gain = match matrix_from_rows(&c.gain) {
            Some(g) if g.shape() == (q, n) => Some(g),
            _ => {
                errs.push(format!("controller.gain: expected {q}×{n}"));
                None
            }
        };
        if !(self.baselines.clf_rate > 0.0 && self.baselines.clf_rate <= 1.0) {
            errs.push("baselines.clf_rate: outside (0, 1]".into());
        }
        if !(self.baselines.clf_slack_weight > 0.0) {
            errs.push("baselines.clf_slack_weight: must be positive".into());
        }

        let mut obstacles = Vec::new();
        for (k, o) in self.obstacles.iter().enumerate() {
            if n < 2 {
                errs.push(format!("obstacles[{k}]: model has no planar position"));
                continue;
            }
            match ObstacleBarrier::new(o.center, o.radius) {
                Ok(ob) => obstacles.push(ob),
                Err(e) => errs.push(format!("obstacles[{k}]: {e}")),
            }
        }

        let num_agents = self.agents.len();
        if num_agents == 0 {
            errs.push("agents: at least one agent is required".into());
        }
        let mut initial_states = Vec::new();
        let mut phi = Vec::new();
        for (i, a) in self.agents.iter().enumerate() {
            let path = format!("agents[{}]", i + 1);
            let x0 = DVector::from_vec(a.initial_state.clone());
            if x0.len() != n {
                errs.push(format!("{path}.initial_state: expected {n} entries"));
            } else {
                if let Some(bx) = &state_box {
                    if !bx.contains(&x0, 0.0) {
                        errs.push(format!("{path}.initial_state: outside the state bounds"));
                    }
                }
                for (k, o) in obstacles.iter().enumerate() {
                    if o.clearance(&x0) < 0.0 {
                        errs.push(format!("{path}.initial_state: inside obstacles[{k}]"));
                    }
                }
            }
            let gains = match &a.phi {
                PhiConfig::Uniform(p) => vec![*p; c.barrier_order],
                PhiConfig::PerOrder(v) => v.clone(),
            };
            if gains.len() != c.barrier_order {
                errs.push(format!("{path}.phi: expected {} gains", c.barrier_order));
            }
            if let Some(p) = gains.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
                errs.push(format!("{path}.phi: {p} outside (0, 1]"));
            }
            if let Some(r) = &a.reference {
                if r.state.len() != n || r.offset.as_ref().is_some_and(|o| o.len() != n) {
                    errs.push(format!("{path}.reference: expected {n} entries"));
                }
                if !(r.weight > 0.0) {
                    errs.push(format!("{path}.reference.weight: must be positive"));
                }
            }
            initial_states.push(x0);
            phi.push(gains);
        }
        for (k, e) in self.edges.iter().enumerate() {
            if e.from == 0 || e.to == 0 || e.from > num_agents || e.to > num_agents {
                errs.push(format!("edges[{k}]: agents are numbered 1…{num_agents}"));
            }
            if e.offset.len() != n {
                errs.push(format!("edges[{k}].offset: expected {n} entries"));
            }
        }

        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }

        let edges = self
            .edges
            .iter()
            .map(|e| Edge { from: e.from - 1, to: e.to - 1, weight: e.weight, offset: DVector::from_vec(e.offset.clone()) })
            .collect();
        let mut topology = Topology::new(num_agents, n, edges).map_err(|e| Error::Config(vec![format!("edges: {e}")]))?;
        for (i, a) in self.agents.iter().enumerate() {
            if let Some(r) = &a.reference {
                let reference = VirtualReference {
                    state: DVector::from_vec(r.state.clone()),
                    offset: r.offset.clone().map_or_else(|| DVector::zeros(n), DVector::from_vec),
                    weight: r.weight,
                };
                topology = topology.with_reference(i, reference)?;
            }
        }

        let scenario = Scenario {
            config: self.clone(),
            model,
            limits: Limits { state: state_box.expect("checked"), input: input_box.expect("checked") },
            topology,
            initial_states,
            obstacles,
            phi,
            q: qm.expect("checked"),
            r: rm.expect("checked"),
            gain: gain.expect("checked"),
        };
        let mut errs = Vec::new();
        for i in 0..scenario.num_agents() {
            for (k, b) in scenario.barriers(i).iter().enumerate() {
                if let Err(e) = b.check_relative_degree(scenario.model.as_ref(), &scenario.initial_states[i]) {
                    errs.push(format!("agents[{}] / obstacles[{k}]: {e}", i + 1));
                }
            }
        }
        if errs.is_empty() {
            Ok(scenario)
        } else {
            Err(Error::Config(errs))
        }
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    ScenarioConfig::from_json(&text)?.build()
}

/// The three-vehicle benchmark: a leader with a goal reference and two
/// followers pass one obstacle on their way to a triangle formation.
pub fn benchmark_config() -> ScenarioConfig {
    let zero4 = || Some(vec![0.0; 4]);
    ScenarioConfig {
        name: "three_vehicle_obstacle".into(),
        model: ModelConfig::Vehicle { dt: 0.1, drag: -3.0 },
        state_bounds: BoundsConfig { lower: vec![-5.0, -5.0, -2.0, -2.0], upper: vec![5.0, 5.0, 2.0, 2.0] },
        input_bounds: BoundsConfig { lower: vec![-0.5, -0.5], upper: vec![0.5, 0.5] },
        agents: vec![
            AgentConfig {
                initial_state: vec![-2.0, -0.5, 0.0, 0.0],
                phi: PhiConfig::Uniform(0.1),
                reference: Some(ReferenceConfig { state: vec![2.0, 0.0, 0.0, 0.0], offset: zero4(), weight: 1.0 }),
            },
            AgentConfig { initial_state: vec![-2.0, 0.0, 0.0, 0.0], phi: PhiConfig::Uniform(0.9), reference: None },
            AgentConfig { initial_state: vec![-2.5, -0.5, 0.0, 0.0], phi: PhiConfig::Uniform(0.4), reference: None },
        ],
        // followers hold x_1 - x_2 = (0, 0.5) and x_1 - x_3 = (-0.5, 0)
        edges: vec![
            EdgeConfig { from: 1, to: 2, weight: 1.0, offset: vec![0.0, -0.5, 0.0, 0.0] },
            EdgeConfig { from: 1, to: 3, weight: 1.0, offset: vec![0.5, 0.0, 0.0, 0.0] },
        ],
        obstacles: vec![ObstacleConfig { center: [0.0, 0.0], radius: 0.5 }],
        // the non-smooth input norm leaves a dead zone around zero input
        // unless the terminal slack is priced well above the stage costs
        controller: ControllerConfig { rho_weight: 1e6, ..ControllerConfig::default() },
        baselines: BaselineConfig::default(),
        seed: None,
    }
}

/// Random vehicle scenario: a few agents at rest to the left, one obstacle
/// in between, goals to the right. Initial states lie in every safe set.
pub fn random_config(seed: u64) -> ScenarioConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = benchmark_config();
    cfg.name = format!("random_{seed}");
    cfg.seed = Some(seed);
    let num_agents = rng.random_range(1..=3);
    let center = [rng.random_range(-1.0..1.0), rng.random_range(-1.5..1.5)];
    let radius = rng.random_range(0.2..0.6);
    cfg.obstacles = vec![ObstacleConfig { center, radius }];
    cfg.controller.horizon = rng.random_range(2..=5);
    cfg.controller.gamma = rng.random_range(0.0..0.9);
    cfg.controller.t_max = 60;
    let probe = cfg.clone();
    let model = probe.model.build();
    let ob = ObstacleBarrier::new(center, radius).expect("positive radius");
    cfg.agents.clear();
    cfg.edges.clear();
    for i in 0..num_agents {
        let phi = rng.random_range(0.1..1.0);
        let spec = BarrierSpec::uniform(Arc::new(ob.clone()), phi, 2).expect("valid gain");
        let start = loop {
            let x = DVector::from_row_slice(&[
                rng.random_range(-4.0..-1.5),
                rng.random_range(-2.0..2.0),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            ]);
            if min_psi(&spec, model.as_ref(), &x) > 0.0 && ob.clearance(&x) > 0.05 {
                break x;
            }
        };
        let goal = vec![rng.random_range(1.5..4.0), rng.random_range(-2.0..2.0), 0.0, 0.0];
        cfg.agents.push(AgentConfig {
            initial_state: start.iter().copied().collect(),
            phi: PhiConfig::Uniform(phi),
            reference: Some(ReferenceConfig { state: goal.clone(), offset: Some(vec![0.0; 4]), weight: 1.0 }),
        });
        if i > 0 {
            let prev = &cfg.agents[i - 1].reference.as_ref().expect("set above").state;
            let offset: Vec<f64> = goal.iter().zip(prev).map(|(a, b)| a - b).collect();
            cfg.edges.push(EdgeConfig { from: i, to: i + 1, weight: 1.0, offset });
        }
    }
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_builds() {
        let s = benchmark_config().build().unwrap();
        assert_eq!(s.num_agents(), 3);
        assert_eq!(s.phi, vec![vec![0.1, 0.1], vec![0.9, 0.9], vec![0.4, 0.4]]);
        assert!(s.topology.neighbors(0).unwrap().is_empty());
        assert_eq!(s.topology.neighbors(2).unwrap(), vec![0]);
    }

    #[test]
    fn gamma_at_one_is_rejected() {
        let mut c = benchmark_config();
        c.controller.gamma = 1.0;
        match c.build() {
            Err(Error::Config(errs)) => assert!(errs.iter().any(|e| e.contains("gamma")), "{errs:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn reports_every_problem() {
        let mut c = benchmark_config();
        c.controller.gamma = -0.1;
        c.controller.lambda = 0.0;
        c.controller.horizon = 1;
        c.agents[0].initial_state = vec![0.1, 0.0, 0.0, 0.0];
        c.controller.q[0][0] = -1.0;
        let Err(Error::Config(errs)) = c.build() else { panic!("expected config error") };
        for key in ["gamma", "lambda", "horizon", "agents[1].initial_state", "controller.q"] {
            assert!(errs.iter().any(|e| e.contains(key)), "missing {key}: {errs:?}");
        }
    }

    #[test]
    fn shipped_benchmark_matches() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/paper_sec5.json");
        let s = load_scenario(&path).unwrap();
        assert_eq!(s.config, benchmark_config());
        assert_eq!(s.num_agents(), 3);
        assert_eq!(s.model.sampling_time(), 0.1);
        assert_eq!(s.config.model, ModelConfig::Vehicle { dt: 0.1, drag: -3.0 });
    }

    #[test]
    fn json_round_trip() {
        let c = benchmark_config();
        let back = ScenarioConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn random_scenarios_validate() {
        for seed in 0..20 {
            random_config(seed).build().unwrap();
        }
    }
}
