//! Sampled sweeps of the structural conditions DSMPC relies on: the declared
//! barrier order matches the relative degree, and the input box always holds
//! a `u` with `ψ_m(x, u) ≥ 0` on the safe set.

use nalgebra::DVector;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::barrier::{assumption1_probe, min_psi};
use crate::dynamics::StateVector;
use crate::error::Result;
use crate::scenario::Scenario;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeSummary {
    /// Zero-based agent index.
    pub agent: usize,
    pub obstacle: usize,
    /// Samples drawn near the obstacle.
    pub drawn: usize,
    /// Samples inside every safe set of the barrier.
    pub in_safe_set: usize,
    pub relative_degree_failures: usize,
    pub input_condition_failures: usize,
    pub worst_margin: f64,
    pub worst_state: Option<Vec<f64>>,
}

/// Draws `samples` states around each obstacle (positions within `1.5 m` of
/// the boundary, velocities over the state box) and probes the ones inside
/// the safe set.
pub fn sweep(scenario: &Scenario, samples: usize, seed: u64) -> Result<Vec<ProbeSummary>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = scenario.model.as_ref();
    let lo = &scenario.limits.state.lower;
    let hi = &scenario.limits.state.upper;
    let mut out = Vec::new();
    for agent in 0..scenario.num_agents() {
        for (o, spec) in scenario.barriers(agent).into_iter().enumerate() {
            let ob = &scenario.obstacles[o];
            let reach = ob.radius + 1.5;
            let mut s = ProbeSummary {
                agent,
                obstacle: o,
                drawn: samples,
                in_safe_set: 0,
                relative_degree_failures: 0,
                input_condition_failures: 0,
                worst_margin: f64::INFINITY,
                worst_state: None,
            };
            for _ in 0..samples {
                let x: StateVector = DVector::from_fn(lo.len(), |c, _| {
                    let (a, b) = if c < 2 {
                        ((ob.center[c] - reach).max(lo[c]), (ob.center[c] + reach).min(hi[c]))
                    } else {
                        (lo[c], hi[c])
                    };
                    if a < b && a.is_finite() && b.is_finite() { rng.random_range(a..b) } else { 0.0 }
                });
                if min_psi(&spec, model, &x) < 0.0 {
                    continue;
                }
                s.in_safe_set += 1;
                if spec.check_relative_degree(model, &x).is_err() {
                    s.relative_degree_failures += 1;
                }
                let (_, margin) = assumption1_probe(&spec, model, &x, &scenario.limits.input)?;
                if margin < 0.0 {
                    s.input_condition_failures += 1;
                }
                if margin < s.worst_margin {
                    s.worst_margin = margin;
                    s.worst_state = Some(x.iter().copied().collect());
                }
            }
            out.push(s);
        }
    }
    Ok(out)
}
