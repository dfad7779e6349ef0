//! Control Lyapunov terminal constraint with contraction schedule and slack.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{BoxSet, DynamicsModel, StateVector};
use crate::error::{Error, Result};
use crate::estimator::{consensus_tau, NeighborState};
use crate::FEAS_TOL;

/// `v = Σ_j ‖ỹ_ij‖²`; zero for an agent without neighbors.
pub fn dclf_value<'a>(errors: impl IntoIterator<Item = &'a DVector<f64>>) -> f64 {
    errors.into_iter().map(|y| y.norm_squared()).sum()
}

/// One-step decrease test `v_next - v_now + λ'·v_now ≤ FEAS_TOL`.
pub fn dclf_decrement_check(v_next: f64, v_now: f64, lambda_prime: f64) -> bool {
    v_next - v_now + lambda_prime * v_now <= FEAS_TOL
}

/// Per-agent terminal contraction state.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalRule {
    /// Contraction factor `λ ∈ (0, 1]`.
    pub lambda: f64,
    pub v_init: f64,
    pub v_prev: Option<f64>,
    pub rho_enabled: bool,
    pub rho_weight: f64,
}

impl TerminalRule {
    pub fn new(lambda: f64, v_init: f64, rho_enabled: bool, rho_weight: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(Error::domain(format!("lambda {lambda} outside (0, 1]")));
        }
        if !(v_init >= 0.0) {
            return Err(Error::domain("initial terminal value must be non-negative"));
        }
        Ok(Self { lambda, v_init, v_prev: None, rho_enabled, rho_weight })
    }

    /// `λ' = 1 - λ`.
    pub fn lambda_prime(&self) -> f64 {
        1.0 - self.lambda
    }

    /// Right-hand side of `v(ỹ(T_p|t)) ≤ bound (+ ρ)`.
    pub fn bound(&self, t: usize, horizon: usize) -> Result<f64> {
        if t == 0 {
            return Ok(self.lambda.powi(horizon as i32) * self.v_init);
        }
        match self.v_prev {
            Some(v) => Ok(self.lambda * v),
            None => Err(Error::state(format!("terminal value from round {} missing", t - 1))),
        }
    }

    pub fn record(&mut self, v_terminal: f64) {
        self.v_prev = Some(v_terminal.max(0.0));
    }
}

/// Terminal value used by the first round: the agent's own state rolled out
/// for `horizon` steps under the consensus law, neighbors held at their
/// current states.
pub fn initial_terminal_value(
    model: &dyn DynamicsModel,
    x0: &StateVector,
    neighbors: &[NeighborState],
    gain: &DMatrix<f64>,
    inputs: &BoxSet,
    horizon: usize,
) -> Result<f64> {
    let mut x = x0.clone();
    for _ in 0..horizon {
        let u = consensus_tau(&x, neighbors, gain, inputs)?;
        x = crate::dynamics::step(model, &x, &u)?;
    }
    let errors: Vec<DVector<f64>> = neighbors.iter().map(|n| &x - &n.state - &n.offset).collect();
    Ok(dclf_value(&errors))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    #[test]
    fn dclf_value_examples() {
        assert_eq!(dclf_value(&[v(&[0.0; 4])]), 0.0);
        assert_eq!(dclf_value(&[v(&[1.0, 0.0, 0.0, 0.0]), v(&[0.0, 2.0, 0.0, 0.0])]), 5.0);
        assert_eq!(dclf_value(&[]), 0.0);
    }

    #[test]
    fn terminal_bound_examples() {
        let r = TerminalRule::new(0.9, 10.0, true, 1.0).unwrap();
        assert!((r.bound(0, 5).unwrap() - 5.9049).abs() < 1e-12);
        assert!(matches!(r.bound(3, 5), Err(Error::State(_))));
        let mut r = TerminalRule::new(0.9, 10.0, true, 1.0).unwrap();
        r.record(4.0);
        assert!((r.bound(3, 5).unwrap() - 3.6).abs() < 1e-12);
        let mut r = TerminalRule::new(1.0, 7.5, false, 1.0).unwrap();
        assert_eq!(r.bound(0, 4).unwrap(), 7.5);
        r.record(2.25);
        assert_eq!(r.bound(9, 4).unwrap(), 2.25);
        assert!(TerminalRule::new(0.0, 1.0, true, 1.0).is_err());
        assert!(TerminalRule::new(1.1, 1.0, true, 1.0).is_err());
    }

    #[test]
    fn decrement_check_examples() {
        assert!(dclf_decrement_check(0.0, 0.0, 0.1));
        assert!(dclf_decrement_check(0.85, 1.0, 0.1));
        assert!(!dclf_decrement_check(0.95, 1.0, 0.1));
    }

    #[test]
    fn single_neighbor_bounds_are_tight() {
        // c1 = c2 = 1 for one neighbor
        for y in [v(&[0.3, -1.0, 2.0, 0.5]), v(&[0.0, 0.0, 0.0, 1e-3])] {
            assert_eq!(dclf_value(std::slice::from_ref(&y)), y.norm_squared());
        }
    }
}
