//! Distributed safety-critical model predictive control for multi-agent
//! formation with obstacle avoidance.

pub mod barrier;
pub mod baselines;
pub mod bench;
pub mod codec;
pub mod dynamics;
pub mod error;
pub mod estimator;
pub mod lyapunov;
pub mod metrics;
pub mod nlp;
pub mod ocp;
pub mod orchestrator;
pub mod probe;
pub mod runlog;
pub mod scenario;
pub mod topology;
pub mod verify;

pub use error::{Error, Result};

/// Feasibility tolerance shared by the solver, the safe-set tests and the checks.
pub const FEAS_TOL: f64 = 1e-6;
