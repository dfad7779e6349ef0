//! Re-checks a persisted run against the invariants its controller promises.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::barrier::{best_appended_input, psi};
use crate::error::Result;
use crate::estimator::weighted_norm;
use crate::orchestrator::{family_name, shifted_candidate_oracle, ControllerKind, RunRecord};
use crate::scenario::Scenario;
use crate::FEAS_TOL;

/// Largest `‖f(x, u) - x⁺‖_∞` accepted between consecutive logged states.
pub const DYNAMICS_TOL: f64 = 1e-9;
/// Largest compatibility deviation of the shifted candidate.
pub const SHIFT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Invariant {
    Dynamics,
    InputBox,
    StateBox,
    Safety,
    Compatibility,
    TerminalDecay,
    ShiftedCandidate,
}

impl Invariant {
    pub fn name(self) -> &'static str {
        match self {
            Invariant::Dynamics => "dynamics",
            Invariant::InputBox => "input box",
            Invariant::StateBox => "state box",
            Invariant::Safety => "safety",
            Invariant::Compatibility => "compatibility",
            Invariant::TerminalDecay => "terminal decay",
            Invariant::ShiftedCandidate => "shifted candidate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub invariant: Invariant,
    pub t: usize,
    /// Zero-based agent index.
    pub agent: usize,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} invariant violated at round {}, agent {}: {}", self.invariant.name(), self.t, self.agent + 1, self.detail)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: usize,
    /// Candidate checks skipped because the appended-input probe was negative.
    pub oracle_skipped: usize,
    pub violations: Vec<Violation>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    fn check(&mut self, ok: bool, invariant: Invariant, t: usize, agent: usize, detail: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            self.violations.push(Violation { invariant, t, agent, detail: detail() });
        }
    }
}

/// Which families each controller is held to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Promises {
    /// `ψ_l ≥ 0` for `l < m` rather than just `h ≥ 0`.
    pub barrier_invariance: bool,
    pub compatibility: bool,
    pub terminal: bool,
}

impl Promises {
    pub fn of(kind: ControllerKind) -> Self {
        match kind {
            ControllerKind::Dsmpc => Promises { barrier_invariance: true, compatibility: true, terminal: true },
            ControllerKind::MpcDc => Promises { barrier_invariance: false, compatibility: false, terminal: true },
            ControllerKind::NcCbf => Promises { barrier_invariance: true, compatibility: false, terminal: false },
            ControllerKind::ClfCbf => Promises { barrier_invariance: false, compatibility: false, terminal: false },
        }
    }
}

pub fn verify_record(record: &RunRecord) -> Result<VerifyReport> {
    let scenario = record.scenario.build()?;
    verify_with(&scenario, record)
}

pub fn verify_with(scenario: &Scenario, record: &RunRecord) -> Result<VerifyReport> {
    let promises = Promises::of(record.controller);
    let model = scenario.model.as_ref();
    let mut report = VerifyReport::default();
    let history = record.state_history();
    let lambda = scenario.params().lambda;

    for (t, round) in record.rounds.iter().enumerate() {
        let failed_round = record.failure.is_some_and(|(ft, _)| ft == t);
        for a in &round.agents {
            let i = a.agent;
            let x = &a.state;
            report.check(scenario.limits.state.contains(x, FEAS_TOL), Invariant::StateBox, t, i, || format!("state {x} outside X"));

            if promises.barrier_invariance {
                for b in scenario.barriers(i) {
                    for l in 0..b.order() {
                        let val = psi(&b, model, l, x)?;
                        report.check(val >= -FEAS_TOL, Invariant::Safety, t, i, || format!("psi_{l} = {val:.3e}"));
                    }
                }
            } else {
                let h = scenario.h_min(x);
                report.check(h >= -FEAS_TOL, Invariant::Safety, t, i, || format!("h = {h:.3e}"));
            }

            if !a.solve.status.is_feasible() {
                continue;
            }
            if !failed_round {
                let next = &history[t + 1][i];
                let gap = (model.eval(x, &a.input) - next).amax();
                report.check(gap <= DYNAMICS_TOL, Invariant::Dynamics, t, i, || format!("|f(x,u) - x+| = {gap:.3e}"));
                report.check(scenario.limits.input.contains(&a.input, FEAS_TOL), Invariant::InputBox, t, i, || {
                    format!("input {} outside U", a.input)
                });
            }

            if promises.compatibility {
                if let (Some(buf), Some(eta)) = (&a.buffer, a.eta) {
                    let horizon = a.solve.u_star.len();
                    for k in 1..horizon {
                        let dev = weighted_norm(&(&a.solve.x_star[k] - &buf.x_est[k]), &scenario.q);
                        report.check(dev <= eta + FEAS_TOL, Invariant::Compatibility, t, i, || {
                            format!("step {k}: deviation {dev:.6} exceeds eta {eta:.6}")
                        });
                    }
                }
            }

            if promises.terminal {
                if let (Some(v), Some(bound)) = (a.v_terminal, a.terminal_bound) {
                    let rho = a.solve.rho_star;
                    report.check(v <= bound + rho + FEAS_TOL, Invariant::TerminalDecay, t, i, || {
                        format!("v = {v:.6} above bound {bound:.6} + rho {rho:.3e}")
                    });
                    if t > 0 && rho <= FEAS_TOL {
                        if let Some(prev) = record.rounds[t - 1].agents[i].v_terminal {
                            report.check(v <= lambda * prev + FEAS_TOL, Invariant::TerminalDecay, t, i, || {
                                format!("v = {v:.6} above lambda * {prev:.6}")
                            });
                        }
                    }
                }
            }
        }
    }

    if let Some((ft, _)) = record.failure {
        let last = &record.rounds[ft];
        for a in &last.agents {
            let same = a.state == record.final_states[a.agent];
            report.check(same, Invariant::Dynamics, ft, a.agent, || "state moved after a failed round".into());
        }
    }

    // the appended input only accounts for obstacles, so separation rows are not covered
    if record.controller.is_predictive() && scenario.params().inter_agent_distance.is_none() {
        check_shifted_candidates(scenario, record, &mut report)?;
    }
    Ok(report)
}

/// Wherever the appended-input probe is non-negative, the shifted plan of
/// round `t` must satisfy every constraint of round `t + 1`.
fn check_shifted_candidates(scenario: &Scenario, record: &RunRecord, report: &mut VerifyReport) -> Result<()> {
    let compat = Promises::of(record.controller).compatibility;
    for t in 0..record.rounds.len().saturating_sub(1) {
        if record.rounds[t].agents.iter().any(|a| !a.solve.status.is_feasible()) {
            continue;
        }
        for c in shifted_candidate_oracle(scenario, record, t)? {
            let solve = &record.rounds[t].agents[c.agent].solve;
            let terminal = &solve.x_star[solve.u_star.len()];
            let (_, margin) =
                best_appended_input(&scenario.barriers(c.agent), scenario.model.as_ref(), terminal, &scenario.limits.input)?;
            if margin < 0.0 {
                report.oracle_skipped += 1;
                continue;
            }
            let worst = c.worst().cloned();
            report.check(c.passes(), Invariant::ShiftedCandidate, c.t, c.agent, || {
                let w = worst.expect("failing report has margins");
                format!("{} row at step {} has margin {:.3e}", family_name(w.family), w.step, w.margin)
            });
            if compat {
                let r = c.compatibility_residual;
                report.check(r <= SHIFT_TOL, Invariant::ShiftedCandidate, c.t, c.agent, || {
                    format!("compatibility residual {r:.3e}")
                });
            }
        }
    }
    Ok(())
}
