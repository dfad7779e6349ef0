//! Estimated trajectories exchanged between neighbors.
//!
//! After each solve an agent drops the first optimal input, appends the
//! consensus law evaluated at the optimal terminal states and rolls the
//! result out from its next state. Neighbors plan against this announced
//! trajectory; the compatibility bound limits how far the next plan may
//! stray from it.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::dynamics::{step, BoxSet, ControlVector, DynamicsModel, StateVector};
use crate::error::{ensure_dim, Error, Result};

/// Below this the ζ sum is treated as zero and the bound falls back to `eta_cap`.
pub const ZETA_FLOOR: f64 = 1e-9;

/// A neighbor's state as seen by the consensus law, with edge weight and offset `d_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborState {
    pub state: StateVector,
    pub weight: f64,
    pub offset: DVector<f64>,
}

/// An agent's announced trajectory `x^a(0…T_p | t)` and inputs `u^a(0…T_p-1 | t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateBuffer {
    pub owner: usize,
    pub t: usize,
    #[serde(with = "codec::dvec_list")]
    pub x_est: Vec<StateVector>,
    #[serde(with = "codec::dvec_list")]
    pub u_est: Vec<ControlVector>,
}

impl EstimateBuffer {
    /// Round-zero estimate: the initial state repeated over the horizon, zero inputs.
    pub fn initial(owner: usize, x0: &StateVector, horizon: usize, input_dim: usize) -> Self {
        Self {
            owner,
            t: 0,
            x_est: vec![x0.clone(); horizon + 1],
            u_est: vec![DVector::zeros(input_dim); horizon],
        }
    }

    /// A stationary trajectory, used for virtual references.
    pub fn constant(owner: usize, t: usize, state: &StateVector, horizon: usize, input_dim: usize) -> Self {
        Self { t, ..Self::initial(owner, state, horizon, input_dim) }
    }

    pub fn horizon(&self) -> usize {
        self.u_est.len()
    }

    /// Largest deviation from `x_est(k+1) = f(x_est(k), u_est(k))`.
    pub fn recursion_residual(&self, model: &dyn DynamicsModel) -> f64 {
        self.u_est
            .iter()
            .enumerate()
            .map(|(k, u)| (model.eval(&self.x_est[k], u) - &self.x_est[k + 1]).amax())
            .fold(0.0, f64::max)
    }
}

/// `clip_U(-K Σ_j w_ij (x_i - x_j - d_ij))`; zero input without neighbors.
pub fn consensus_tau(
    x_i: &StateVector,
    neighbors: &[NeighborState],
    gain: &DMatrix<f64>,
    inputs: &BoxSet,
) -> Result<ControlVector> {
    ensure_dim("gain columns", gain.ncols(), x_i.len())?;
    ensure_dim("gain rows", gain.nrows(), inputs.dim())?;
    let mut acc = DVector::zeros(x_i.len());
    for n in neighbors {
        ensure_dim("neighbor state", n.state.len(), x_i.len())?;
        ensure_dim("neighbor offset", n.offset.len(), x_i.len())?;
        acc += (x_i - &n.state - &n.offset) * n.weight;
    }
    Ok(inputs.project(&(-(gain * acc))))
}

/// Drops `u*(0|t)` and appends the consensus input at the optimal terminal states.
pub fn shift_append(
    u_star: &[ControlVector],
    own_terminal: &StateVector,
    neighbor_terminals: &[NeighborState],
    gain: &DMatrix<f64>,
    inputs: &BoxSet,
) -> Result<Vec<ControlVector>> {
    if u_star.is_empty() {
        return Err(Error::state("no optimal input sequence to shift"));
    }
    let tail = consensus_tau(own_terminal, neighbor_terminals, gain, inputs)?;
    Ok(shift_with(u_star, tail))
}

/// `[u(1), …, u(T-1), appended]`.
pub fn shift_with(u_star: &[ControlVector], appended: ControlVector) -> Vec<ControlVector> {
    u_star.iter().skip(1).cloned().chain(std::iter::once(appended)).collect()
}

/// Rolls `u_est` out from `x_start`, the realized next state.
pub fn build_estimate_buffer(
    model: &dyn DynamicsModel,
    owner: usize,
    t: usize,
    x_start: &StateVector,
    u_est: Vec<ControlVector>,
) -> Result<EstimateBuffer> {
    let mut x_est = Vec::with_capacity(u_est.len() + 1);
    x_est.push(x_start.clone());
    for u in &u_est {
        let next = step(model, x_est.last().expect("non-empty"), u)?;
        x_est.push(next);
    }
    Ok(EstimateBuffer { owner, t, x_est, u_est })
}

/// `sqrt(zᵀ Q z)`.
pub fn weighted_norm(z: &DVector<f64>, q: &DMatrix<f64>) -> f64 {
    (z.dot(&(q * z))).max(0.0).sqrt()
}

/// `max_{k∈[1,T_p-1]} ‖x_j^a(k) - x_i^a(k) - d_ji‖`.
pub fn zeta(own: &EstimateBuffer, neighbor: &EstimateBuffer, d_ji: &DVector<f64>) -> Result<f64> {
    if own.t != neighbor.t {
        return Err(Error::state(format!(
            "estimate buffers from rounds {} and {} cannot be compared",
            own.t, neighbor.t
        )));
    }
    if own.horizon() != neighbor.horizon() {
        return Err(Error::state("estimate buffers have different horizons"));
    }
    let h = own.horizon();
    let mut best = 0.0_f64;
    for k in 1..h {
        let diff = &neighbor.x_est[k] - &own.x_est[k] - d_ji;
        best = best.max(diff.norm());
    }
    Ok(best)
}

/// `η = γ Σ‖y*‖_Q / ((δT_p - δ) Σζ)`, or `eta_cap` once the ζ sum vanishes.
pub fn compatibility_eta(
    y_star_norms: &[f64],
    zetas: &[f64],
    gamma: f64,
    dt: f64,
    horizon: usize,
    eta_cap: f64,
) -> Result<f64> {
    if horizon < 2 {
        return Err(Error::config(format!("horizon must be at least 2 for the compatibility bound, got {horizon}")));
    }
    let zeta_sum: f64 = zetas.iter().sum();
    if zeta_sum < ZETA_FLOOR {
        return Ok(eta_cap);
    }
    let num: f64 = gamma * y_star_norms.iter().sum::<f64>();
    let den = (dt * horizon as f64 - dt) * zeta_sum;
    Ok((num / den).min(eta_cap))
}

/// η together with the quantities it was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompatibilityBound {
    pub eta: f64,
    pub gamma: f64,
    pub zeta: Vec<f64>,
}
