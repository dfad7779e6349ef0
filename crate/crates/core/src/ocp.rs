//! One agent's receding-horizon program, transcribed by single shooting.
//!
//! Decision variables are `z = (u(0), …, u(T_p-1), ρ)`; states are obtained
//! by rolling the model forward from `x0`, so dynamic feasibility holds by
//! construction. Constraint families:
//!
//! - input box (variable bounds) and state box on `x(1…T_p)`;
//! - safety: `ψ_m(x(k), u(k)) ≥ 0` for `k < T_p`, or a plain distance
//!   constraint on `x(1…T_p)` for the distance-based baseline;
//! - compatibility: `‖x(k) - x^a(k)‖_Q ≤ η` for `k = 1…T_p-1`;
//! - terminal: `Σ_j ‖ỹ_ij(T_p)‖² ≤ bound + ρ`, `ρ ≥ 0`.
//!
//! Root norms are smoothed as `sqrt(zᵀQz + ε²) - ε` so that the solver sees
//! differentiable functions; reported costs use the exact norms.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::barrier::{psi_m, psi_m_gradients, BarrierSpec, ObstacleBarrier};
use crate::codec;
use crate::dynamics::{ControlVector, DynamicsModel, Limits, StateVector};
use crate::error::{Error, Result};
use crate::estimator::{weighted_norm, EstimateBuffer};
use crate::lyapunov::{dclf_value, TerminalRule};
use crate::nlp::{self, Evaluation, Nlp, SolveStatus, SqpOptions};
use crate::FEAS_TOL;

pub const NORM_SMOOTHING: f64 = 1e-8;

/// A neighbor's announced trajectory together with the edge data used in costs.
#[derive(Debug, Clone)]
pub struct NeighborPlan {
    pub buffer: EstimateBuffer,
    pub weight: f64,
    /// `d_ij`.
    pub offset: DVector<f64>,
}

#[derive(Debug, Clone)]
pub enum SafetyConstraint {
    /// `ψ_m(x(k), u(k)) ≥ 0` at every step `k < T_p`.
    Barrier(BarrierSpec),
    /// `ψ_m(x(k), u(k)) ≥ 0` at a single step.
    StepBarrier { step: usize, spec: BarrierSpec },
    /// `‖p(k) - c‖ ≥ r` for `k = 1…T_p`.
    Distance(ObstacleBarrier),
}

#[derive(Debug, Clone)]
pub struct OcpProblem {
    pub model: Arc<dyn DynamicsModel>,
    pub limits: Limits,
    pub horizon: usize,
    pub t: usize,
    pub x0: StateVector,
    pub neighbors: Vec<NeighborPlan>,
    /// The agent's own announced trajectory; required when `eta` is set.
    pub own_buffer: Option<EstimateBuffer>,
    /// Compatibility radius. `None` drops the compatibility family.
    pub eta: Option<f64>,
    pub safety: Vec<SafetyConstraint>,
    pub terminal: TerminalRule,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub max_iterations: usize,
}

/// Largest violation per constraint family, in the family's natural units.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub input_box: f64,
    pub state_box: f64,
    pub safety: f64,
    pub compatibility: f64,
    pub terminal: f64,
    pub rho_sign: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        [self.input_box, self.state_box, self.safety, self.compatibility, self.terminal, self.rho_sign]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveResult {
    pub status: SolveStatus,
    #[serde(with = "codec::dvec_list")]
    pub u_star: Vec<ControlVector>,
    /// `x(0…T_p)`, starting at the problem's `x0`.
    #[serde(with = "codec::dvec_list")]
    pub x_star: Vec<StateVector>,
    pub rho_star: f64,
    pub cost: f64,
    pub solve_time: f64,
    pub residuals: Residuals,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    InputBox,
    StateBox,
    Safety,
    Compatibility,
    Terminal,
    RhoSign,
}

/// One constraint evaluated at a candidate; `margin ≥ 0` means satisfied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Margin {
    pub family: Family,
    pub step: usize,
    pub margin: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConstraintCounts {
    pub input_box: usize,
    pub state_box: usize,
    pub safety: usize,
    pub compatibility: usize,
    pub terminal: usize,
    pub rho_sign: usize,
}

fn smooth_norm(z: &DVector<f64>, w: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let wz = w * z;
    let root = (z.dot(&wz) + NORM_SMOOTHING * NORM_SMOOTHING).sqrt();
    (root - NORM_SMOOTHING, wz / root)
}

impl OcpProblem {
    pub fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.model.input_dim()
    }

    pub fn num_vars(&self) -> usize {
        self.horizon * self.input_dim() + 1
    }

    fn validate(&self) -> Result<()> {
        let (n, q) = (self.state_dim(), self.input_dim());
        let mut errs = Vec::new();
        if self.horizon == 0 {
            errs.push("horizon: must be positive".to_string());
        }
        if self.x0.len() != n {
            errs.push(format!("x0: dimension {} != {n}", self.x0.len()));
        }
        if self.limits.state.dim() != n || self.limits.input.dim() != q {
            errs.push("limits: dimensions do not match the model".into());
        }
        if self.q.shape() != (n, n) {
            errs.push("q: must be n×n".into());
        }
        if self.r.shape() != (q, q) {
            errs.push("r: must be q×q".into());
        }
        let check_buffer = |b: &EstimateBuffer, what: &str, errs: &mut Vec<String>| {
            if b.t != self.t {
                errs.push(format!("{what}: buffer from round {} used at round {}", b.t, self.t));
            }
            if b.x_est.len() != self.horizon + 1 || b.x_est.iter().any(|x| x.len() != n) {
                errs.push(format!("{what}: buffer shape does not match horizon/state"));
            }
        };
        for (k, nb) in self.neighbors.iter().enumerate() {
            check_buffer(&nb.buffer, &format!("neighbors[{k}]"), &mut errs);
            if nb.offset.len() != n {
                errs.push(format!("neighbors[{k}].offset: dimension mismatch"));
            }
        }
        if let Some(eta) = self.eta {
            if !(eta >= 0.0) {
                errs.push("eta: must be non-negative".into());
            }
            match &self.own_buffer {
                Some(b) => check_buffer(b, "own_buffer", &mut errs),
                None => errs.push("own_buffer: required with a compatibility bound".into()),
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    fn terminal_bound(&self) -> Result<f64> {
        self.terminal.bound(self.t, self.horizon)
    }

    pub fn assemble(&self) -> Result<AssembledOcp<'_>> {
        self.validate()?;
        let bound = self.terminal_bound()?;
        let q = self.input_dim();
        let finite = |v: &DVector<f64>| v.iter().filter(|x| x.is_finite()).count();
        let state_rows_per_step = finite(&self.limits.state.lower) + finite(&self.limits.state.upper);
        let mut safety_rows = 0;
        for s in &self.safety {
            safety_rows += match s {
                SafetyConstraint::Barrier(_) | SafetyConstraint::Distance(_) => self.horizon,
                SafetyConstraint::StepBarrier { step, .. } => usize::from(*step < self.horizon),
            };
        }
        let compat_rows = if self.eta.is_some() { self.horizon.saturating_sub(1) } else { 0 };
        let counts = ConstraintCounts {
            input_box: 2 * q * self.horizon,
            state_box: state_rows_per_step * self.horizon,
            safety: safety_rows,
            compatibility: compat_rows,
            terminal: 1,
            rho_sign: 1,
        };
        Ok(AssembledOcp { problem: self, bound, counts })
    }

    /// Estimated neighbor state `x_j^a(k|t)` shifted by the offset: `x_j^a(k) + d_ij`.
    fn target(&self, j: usize, k: usize) -> DVector<f64> {
        let nb = &self.neighbors[j];
        &nb.buffer.x_est[k] + &nb.offset
    }

    /// `Σ_j ‖x_k - x_j^a(k) - d_ij‖_Q + ‖u_k‖_R`.
    pub fn stage_cost(&self, k: usize, x_k: &StateVector, u_k: &ControlVector) -> f64 {
        let track: f64 = (0..self.neighbors.len())
            .map(|j| weighted_norm(&(x_k - self.target(j, k)), &self.q))
            .sum();
        track + weighted_norm(u_k, &self.r)
    }

    /// `Σ_j ‖ỹ_ij(T_p)‖_Q + w_ρ·ρ²`.
    pub fn terminal_cost(&self, x_t: &StateVector, rho: f64) -> f64 {
        let track: f64 = (0..self.neighbors.len())
            .map(|j| weighted_norm(&(x_t - self.target(j, self.horizon)), &self.q))
            .sum();
        track + self.terminal.rho_weight * rho * rho
    }

    /// `v(ỹ(T_p|t))` for a terminal state.
    pub fn terminal_value(&self, x_t: &StateVector) -> f64 {
        let errs: Vec<DVector<f64>> =
            (0..self.neighbors.len()).map(|j| x_t - self.target(j, self.horizon)).collect();
        dclf_value(&errs)
    }

    pub fn rollout(&self, inputs: &[ControlVector]) -> Vec<StateVector> {
        let mut xs = Vec::with_capacity(inputs.len() + 1);
        xs.push(self.x0.clone());
        for u in inputs {
            let next = self.model.eval(xs.last().expect("non-empty"), u);
            xs.push(next);
        }
        xs
    }

    /// Exact (unsmoothed) objective along a candidate.
    pub fn total_cost(&self, inputs: &[ControlVector], rho: f64) -> f64 {
        let xs = self.rollout(inputs);
        let stage: f64 = (0..self.horizon).map(|k| self.stage_cost(k, &xs[k], &inputs[k])).sum();
        stage + self.terminal_cost(&xs[self.horizon], rho)
    }

    /// Every constraint evaluated at a candidate input sequence and slack.
    pub fn margins(&self, inputs: &[ControlVector], rho: f64) -> Result<Vec<Margin>> {
        let bound = self.terminal_bound()?;
        if inputs.len() != self.horizon {
            return Err(Error::domain(format!("expected {} inputs, got {}", self.horizon, inputs.len())));
        }
        let xs = self.rollout(inputs);
        let mut out = Vec::new();
        let lim = &self.limits;
        for (k, u) in inputs.iter().enumerate() {
            for c in 0..u.len() {
                out.push(Margin { family: Family::InputBox, step: k, margin: u[c] - lim.input.lower[c] });
                out.push(Margin { family: Family::InputBox, step: k, margin: lim.input.upper[c] - u[c] });
            }
        }
        for (k, x) in xs.iter().enumerate().skip(1) {
            for c in 0..x.len() {
                if lim.state.lower[c].is_finite() {
                    out.push(Margin { family: Family::StateBox, step: k, margin: x[c] - lim.state.lower[c] });
                }
                if lim.state.upper[c].is_finite() {
                    out.push(Margin { family: Family::StateBox, step: k, margin: lim.state.upper[c] - x[c] });
                }
            }
        }
        for s in &self.safety {
            match s {
                SafetyConstraint::Barrier(spec) => {
                    for k in 0..self.horizon {
                        let m = psi_m(spec, self.model.as_ref(), &xs[k], &inputs[k])?;
                        out.push(Margin { family: Family::Safety, step: k, margin: m });
                    }
                }
                SafetyConstraint::StepBarrier { step, spec } => {
                    if *step < self.horizon {
                        let m = psi_m(spec, self.model.as_ref(), &xs[*step], &inputs[*step])?;
                        out.push(Margin { family: Family::Safety, step: *step, margin: m });
                    }
                }
                SafetyConstraint::Distance(ob) => {
                    for (k, x) in xs.iter().enumerate().skip(1) {
                        out.push(Margin { family: Family::Safety, step: k, margin: ob.clearance(x) });
                    }
                }
            }
        }
        if let (Some(eta), Some(own)) = (self.eta, &self.own_buffer) {
            for k in 1..self.horizon {
                let dev = weighted_norm(&(&xs[k] - &own.x_est[k]), &self.q);
                out.push(Margin { family: Family::Compatibility, step: k, margin: eta - dev });
            }
        }
        let v = self.terminal_value(&xs[self.horizon]);
        out.push(Margin { family: Family::Terminal, step: self.horizon, margin: bound + rho - v });
        let rho_margin = if self.terminal.rho_enabled { rho } else { -rho.abs() };
        out.push(Margin { family: Family::RhoSign, step: self.horizon, margin: rho_margin });
        Ok(out)
    }

    pub fn residuals(&self, inputs: &[ControlVector], rho: f64) -> Result<Residuals> {
        let mut r = Residuals::default();
        for m in self.margins(inputs, rho)? {
            let viol = (-m.margin).max(0.0);
            let slot = match m.family {
                Family::InputBox => &mut r.input_box,
                Family::StateBox => &mut r.state_box,
                Family::Safety => &mut r.safety,
                Family::Compatibility => &mut r.compatibility,
                Family::Terminal => &mut r.terminal,
                Family::RhoSign => &mut r.rho_sign,
            };
            *slot = slot.max(viol);
        }
        Ok(r)
    }

    /// Smallest slack that satisfies the terminal constraint for the given inputs.
    pub fn required_rho(&self, inputs: &[ControlVector]) -> Result<f64> {
        let bound = self.terminal_bound()?;
        let xs = self.rollout(inputs);
        Ok((self.terminal_value(&xs[self.horizon]) - bound).max(0.0))
    }

    pub fn solve(&self, warm_start: Option<&[ControlVector]>) -> Result<SolveResult> {
        let started = Instant::now();
        let nlp = self.assemble()?;
        let q = self.input_dim();
        let mut z0 = DVector::zeros(self.num_vars());
        for k in 0..self.horizon {
            let u = match warm_start {
                Some(ws) if ws.len() == self.horizon && ws[k].len() == q => self.limits.input.project(&ws[k]),
                _ => self.limits.input.project(&DVector::zeros(q)),
            };
            z0.rows_mut(k * q, q).copy_from(&u);
        }
        if self.terminal.rho_enabled {
            let inputs = split_inputs(&z0, self.horizon, q);
            z0[self.horizon * q] = self.required_rho(&inputs)?;
        }
        let opts = SqpOptions { max_iterations: self.max_iterations, ..SqpOptions::default() };
        let res = nlp::minimize(&nlp, &z0, &opts);
        let u_star = split_inputs(&res.z, self.horizon, q);
        // the smallest slack the returned inputs need; ρ enters no other row
        let rho_star = if self.terminal.rho_enabled {
            self.required_rho(&u_star)?
        } else {
            res.z[self.horizon * q]
        };
        let x_star = self.rollout(&u_star);
        let residuals = self.residuals(&u_star, rho_star)?;
        let cost = self.total_cost(&u_star, rho_star);
        let mut status = res.status;
        if status.is_feasible() && residuals.max() > FEAS_TOL {
            status = SolveStatus::NumericalFailure;
        } else if status == SolveStatus::NumericalFailure && residuals.max() <= FEAS_TOL {
            // the last iterate is usable once ρ is tightened
            status = SolveStatus::FeasibleSuboptimal;
        }
        Ok(SolveResult {
            status,
            u_star,
            x_star,
            rho_star,
            cost,
            solve_time: started.elapsed().as_secs_f64(),
            residuals,
            iterations: res.iterations,
        })
    }
}

pub(crate) fn split_inputs(z: &DVector<f64>, horizon: usize, q: usize) -> Vec<ControlVector> {
    (0..horizon).map(|k| z.rows(k * q, q).into_owned()).collect()
}

/// The program in solver form.
pub struct AssembledOcp<'a> {
    problem: &'a OcpProblem,
    bound: f64,
    counts: ConstraintCounts,
}

impl AssembledOcp<'_> {
    pub fn counts(&self) -> ConstraintCounts {
        self.counts
    }

    fn eval_inner(&self, z: &DVector<f64>, derivs: bool) -> Evaluation {
        let p = self.problem;
        let (n, q, tp) = (p.state_dim(), p.input_dim(), p.horizon);
        let nv = p.num_vars();
        let inputs = split_inputs(z, tp, q);
        let rho = z[tp * q];
        let xs = p.rollout(&inputs);

        // sensitivities dx(k)/dU
        let mut sens: Vec<DMatrix<f64>> = Vec::new();
        if derivs {
            sens.push(DMatrix::zeros(n, nv));
            for k in 0..tp {
                let (a, b) = p.model.jacobians(&xs[k], &inputs[k]);
                let mut s = &a * &sens[k];
                let mut blk = s.view_mut((0, k * q), (n, q));
                blk += &b;
                sens.push(s);
            }
        }

        let mut objective = 0.0;
        let mut gradient = DVector::zeros(nv);
        let add_state_grad = |grad: &mut DVector<f64>, k: usize, gx: &DVector<f64>| {
            if derivs && k > 0 {
                *grad += sens[k].transpose() * gx;
            }
        };
        for k in 0..=tp {
            for j in 0..p.neighbors.len() {
                let (val, g) = smooth_norm(&(&xs[k] - p.target(j, k)), &p.q);
                objective += val;
                add_state_grad(&mut gradient, k, &g);
            }
            if k < tp {
                let (val, g) = smooth_norm(&inputs[k], &p.r);
                objective += val;
                if derivs {
                    let mut blk = gradient.rows_mut(k * q, q);
                    blk += g;
                }
            }
        }
        objective += p.terminal.rho_weight * rho * rho;
        if derivs {
            gradient[tp * q] += 2.0 * p.terminal.rho_weight * rho;
        }

        let rows = self.counts.state_box + self.counts.safety + self.counts.compatibility + self.counts.terminal;
        let mut c = DVector::zeros(rows);
        let mut jac = if derivs { DMatrix::zeros(rows, nv) } else { DMatrix::zeros(0, 0) };
        let mut row = 0;
        let mut push_state_row = |c: &mut DVector<f64>, jac: &mut DMatrix<f64>, row: &mut usize, val: f64, k: usize, gx: Option<&DVector<f64>>, gu: Option<&DVector<f64>>| {
            c[*row] = val;
            if derivs {
                if let Some(gx) = gx {
                    if k > 0 {
                        let contrib = gx.transpose() * &sens[k];
                        let mut r = jac.row_mut(*row);
                        r += contrib;
                    }
                }
                if let Some(gu) = gu {
                    for (i, g) in gu.iter().enumerate() {
                        jac[(*row, k * q + i)] += g;
                    }
                }
            }
            *row += 1;
        };

        let lim = &p.limits.state;
        for (k, x) in xs.iter().enumerate().skip(1) {
            for comp in 0..n {
                let mut e = DVector::zeros(n);
                if lim.lower[comp].is_finite() {
                    e[comp] = -1.0;
                    push_state_row(&mut c, &mut jac, &mut row, lim.lower[comp] - x[comp], k, Some(&e), None);
                }
                if lim.upper[comp].is_finite() {
                    e[comp] = 1.0;
                    push_state_row(&mut c, &mut jac, &mut row, x[comp] - lim.upper[comp], k, Some(&e), None);
                }
            }
        }

        let model = p.model.as_ref();
        let barrier_row = |spec: &BarrierSpec, k: usize, c: &mut DVector<f64>, jac: &mut DMatrix<f64>, row: &mut usize, push: &mut dyn FnMut(&mut DVector<f64>, &mut DMatrix<f64>, &mut usize, f64, usize, Option<&DVector<f64>>, Option<&DVector<f64>>)| {
            let val = psi_m(spec, model, &xs[k], &inputs[k]).unwrap_or(f64::NAN);
            if derivs {
                let (gx, gu) = psi_m_gradients(spec, model, &xs[k], &inputs[k]);
                push(c, jac, row, -val, k, Some(&-gx), Some(&-gu));
            } else {
                push(c, jac, row, -val, k, None, None);
            }
        };
        for s in &p.safety {
            match s {
                SafetyConstraint::Barrier(spec) => {
                    for k in 0..tp {
                        barrier_row(spec, k, &mut c, &mut jac, &mut row, &mut push_state_row);
                    }
                }
                SafetyConstraint::StepBarrier { step, spec } => {
                    if *step < tp {
                        barrier_row(spec, *step, &mut c, &mut jac, &mut row, &mut push_state_row);
                    }
                }
                SafetyConstraint::Distance(ob) => {
                    for (k, x) in xs.iter().enumerate().skip(1) {
                        let dist = ob.distance(x).max(1e-12);
                        let mut gx = DVector::zeros(n);
                        gx[0] = -(x[0] - ob.center[0]) / dist;
                        gx[1] = -(x[1] - ob.center[1]) / dist;
                        push_state_row(&mut c, &mut jac, &mut row, ob.radius - ob.distance(x), k, Some(&gx), None);
                    }
                }
            }
        }

        if let (Some(eta), Some(own)) = (p.eta, &p.own_buffer) {
            for k in 1..tp {
                let (val, g) = smooth_norm(&(&xs[k] - &own.x_est[k]), &p.q);
                push_state_row(&mut c, &mut jac, &mut row, val - eta, k, Some(&g), None);
            }
        }

        let mut v = 0.0;
        let mut gv = DVector::zeros(n);
        for j in 0..p.neighbors.len() {
            let e = &xs[tp] - p.target(j, tp);
            v += e.norm_squared();
            gv += e * 2.0;
        }
        let r_before = row;
        push_state_row(&mut c, &mut jac, &mut row, v - self.bound - rho, tp, Some(&gv), None);
        if derivs {
            jac[(r_before, tp * q)] = -1.0;
        }
        debug_assert_eq!(row, rows);

        Evaluation { objective, gradient, constraints: c, jacobian: jac }
    }
}

impl Nlp for AssembledOcp<'_> {
    fn num_vars(&self) -> usize {
        self.problem.num_vars()
    }

    fn num_constraints(&self) -> usize {
        self.counts.state_box + self.counts.safety + self.counts.compatibility + self.counts.terminal
    }

    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let p = self.problem;
        let q = p.input_dim();
        let nv = p.num_vars();
        let mut lb = DVector::zeros(nv);
        let mut ub = DVector::zeros(nv);
        for k in 0..p.horizon {
            lb.rows_mut(k * q, q).copy_from(&p.limits.input.lower);
            ub.rows_mut(k * q, q).copy_from(&p.limits.input.upper);
        }
        lb[nv - 1] = 0.0;
        ub[nv - 1] = if p.terminal.rho_enabled { f64::INFINITY } else { 0.0 };
        (lb, ub)
    }

    fn evaluate(&self, z: &DVector<f64>) -> (f64, DVector<f64>) {
        let e = self.eval_inner(z, false);
        (e.objective, e.constraints)
    }

    fn evaluate_with_derivatives(&self, z: &DVector<f64>) -> Evaluation {
        self.eval_inner(z, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barrier::AffineBarrier;
    use crate::dynamics::{BoxSet, DoubleIntegrator, SingleIntegrator, VehicleModel};

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    fn vehicle_limits() -> Limits {
        Limits { state: BoxSet::symmetric(&[5.0, 5.0, 2.0, 2.0]), input: BoxSet::symmetric(&[0.5, 0.5]) }
    }

    fn base_problem(x0: DVector<f64>, neighbors: Vec<NeighborPlan>) -> OcpProblem {
        OcpProblem {
            model: Arc::new(VehicleModel::default()),
            limits: vehicle_limits(),
            horizon: 3,
            t: 0,
            x0,
            neighbors,
            own_buffer: None,
            eta: None,
            safety: vec![],
            terminal: TerminalRule::new(0.9, 0.0, true, 1.0).unwrap(),
            q: DMatrix::identity(4, 4),
            r: DMatrix::identity(2, 2),
            max_iterations: 200,
        }
    }

    fn plan(state: DVector<f64>, horizon: usize) -> NeighborPlan {
        NeighborPlan { buffer: EstimateBuffer::initial(1, &state, horizon, 2), weight: 1.0, offset: v(&[0.0; 4]) }
    }

    #[test]
    fn stage_cost_examples() {
        let p = base_problem(v(&[0.0; 4]), vec![plan(v(&[1.0, 0.0, 0.0, 0.0]), 3)]);
        let x = v(&[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(p.stage_cost(0, &x, &v(&[0.0, 0.0])), 0.0);
        let p = base_problem(v(&[0.0; 4]), vec![plan(v(&[0.0; 4]), 3)]);
        assert!((p.stage_cost(1, &x, &v(&[0.5, 0.0])) - 1.5).abs() < 1e-15);
        let p = base_problem(v(&[0.0; 4]), vec![]);
        assert!((p.stage_cost(0, &x, &v(&[0.3, -0.4])) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn terminal_cost_examples() {
        let p = base_problem(v(&[0.0; 4]), vec![plan(v(&[0.0; 4]), 3)]);
        assert_eq!(p.terminal_cost(&v(&[0.0; 4]), 0.0), 0.0);
        assert!((p.terminal_cost(&v(&[0.0; 4]), 0.2) - 0.04).abs() < 1e-15);
        assert!((p.terminal_cost(&v(&[0.0, 3.0, 0.0, 0.0]), 0.0) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn constraint_counts_for_planar_single_integrator() {
        let model = Arc::new(SingleIntegrator { dt: 0.1, dim: 2 });
        let x0 = v(&[2.0, 0.0]);
        let own = EstimateBuffer::initial(0, &x0, 2, 2);
        let nb = NeighborPlan { buffer: EstimateBuffer::initial(1, &v(&[1.0, 0.0]), 2, 2), weight: 1.0, offset: v(&[0.0, 0.0]) };
        let spec = BarrierSpec::new(Arc::new(ObstacleBarrier::new([0.0, 0.0], 0.5).unwrap()), vec![0.5]).unwrap();
        let p = OcpProblem {
            model,
            limits: Limits { state: BoxSet::symmetric(&[5.0, 5.0]), input: BoxSet::symmetric(&[0.5, 0.5]) },
            horizon: 2,
            t: 0,
            x0,
            neighbors: vec![nb],
            own_buffer: Some(own),
            eta: Some(0.3),
            safety: vec![SafetyConstraint::Barrier(spec)],
            terminal: TerminalRule::new(0.9, 1.0, true, 1.0).unwrap(),
            q: DMatrix::identity(2, 2),
            r: DMatrix::identity(2, 2),
            max_iterations: 200,
        };
        let a = p.assemble().unwrap();
        assert_eq!(a.num_vars(), 5);
        assert_eq!(
            a.counts(),
            ConstraintCounts { input_box: 8, state_box: 8, safety: 2, compatibility: 1, terminal: 1, rho_sign: 1 }
        );
    }

    #[test]
    fn at_rest_in_formation_stays_put() {
        let x0 = v(&[1.0, 1.0, 0.0, 0.0]);
        let p = base_problem(x0.clone(), vec![plan(x0.clone(), 3)]);
        let r = p.solve(Some(&[v(&[0.0, 0.0]), v(&[0.0, 0.0]), v(&[0.0, 0.0])])).unwrap();
        assert!(r.status.is_feasible());
        assert!(r.u_star.iter().all(|u| u.norm() <= 1e-4));
        assert!(r.cost <= 1e-4);
    }

    #[test]
    fn frozen_inputs_cannot_meet_terminal_contraction() {
        let mut p = base_problem(v(&[0.0; 4]), vec![plan(v(&[2.0, 0.0, 0.0, 0.0]), 3)]);
        p.limits.input = BoxSet::new(v(&[0.0, 0.0]), v(&[0.0, 0.0])).unwrap();
        p.terminal = TerminalRule::new(0.9, 4.0, false, 1.0).unwrap();
        let r = p.solve(None).unwrap();
        assert_eq!(r.status, SolveStatus::Infeasible);
    }

    #[test]
    fn double_integrator_matches_grid_search() {
        // ψ_2 = -0.0005 + 0.01u here, so the cost pulling u negative meets u ≥ 0.05
        let model = Arc::new(DoubleIntegrator { dt: 0.1 });
        let spec = BarrierSpec::new(Arc::new(AffineBarrier { weights: v(&[1.0, 0.0]), offset: 0.0 }), vec![0.5, 0.9]).unwrap();
        let target = v(&[-3.0, -2.0]);
        let p = OcpProblem {
            model,
            limits: Limits { state: BoxSet::symmetric(&[10.0, 10.0]), input: BoxSet::symmetric(&[0.5]) },
            horizon: 1,
            t: 0,
            x0: v(&[0.31, -1.0]),
            neighbors: vec![NeighborPlan { buffer: EstimateBuffer::initial(1, &target, 1, 1), weight: 1.0, offset: v(&[0.0, 0.0]) }],
            own_buffer: None,
            eta: None,
            safety: vec![SafetyConstraint::Barrier(spec)],
            terminal: TerminalRule::new(1.0, 1e6, false, 1.0).unwrap(),
            q: DMatrix::identity(2, 2),
            r: DMatrix::identity(1, 1),
            max_iterations: 200,
        };
        let r = p.solve(None).unwrap();
        assert!(r.status.is_feasible());
        let mut best = f64::INFINITY;
        for i in 0..=10_000 {
            let u = -0.5 + i as f64 * 1e-4;
            let cand = [v(&[u])];
            if p.residuals(&cand, 0.0).unwrap().max() <= 0.0 {
                best = best.min(p.total_cost(&cand, 0.0));
            }
        }
        assert!((r.cost - best).abs() < 1e-3, "{} vs {}", r.cost, best);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let horizon = rng.random_range(2..5);
            let mut rv = |lo: f64, hi: f64, n: usize| DVector::from_fn(n, |_, _| rng.random_range(lo..hi));
            let x0 = rv(-2.0, 2.0, 4);
            let nb_state = rv(-2.0, 2.0, 4);
            let own_u: Vec<_> = (0..horizon).map(|_| rv(-0.5, 0.5, 2)).collect();
            let model = VehicleModel::default();
            let own = build_estimate_buffer_for(&model, &x0, own_u);
            let center = [rv(-3.0, 3.0, 1)[0], rv(-3.0, 3.0, 1)[0]];
            let spec = BarrierSpec::new(Arc::new(ObstacleBarrier::new(center, 0.5).unwrap()), vec![0.1, 0.9]).unwrap();
            let mut p = base_problem(x0, vec![plan(nb_state, horizon)]);
            p.horizon = horizon;
            p.own_buffer = Some(own);
            p.eta = Some(0.2);
            p.safety = vec![
                SafetyConstraint::Barrier(spec),
                SafetyConstraint::Distance(ObstacleBarrier::new([center[1], center[0]], 0.3).unwrap()),
            ];
            p.terminal = TerminalRule::new(0.9, 1.0, true, 2.0).unwrap();
            let a = p.assemble().unwrap();
            let z = rv(-0.5, 0.5, p.num_vars()).map(|v| v.abs().max(0.0));
            let ev = a.evaluate_with_derivatives(&z);
            let h = 1e-6;
            for i in 0..p.num_vars() {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[i] += h;
                zm[i] -= h;
                let (fp, cp) = a.evaluate(&zp);
                let (fm, cm) = a.evaluate(&zm);
                let gf = (fp - fm) / (2.0 * h);
                assert!((gf - ev.gradient[i]).abs() < 1e-5 * (1.0 + gf.abs()), "objective d/dz{i}: {gf} vs {}", ev.gradient[i]);
                for r in 0..cp.len() {
                    let jf = (cp[r] - cm[r]) / (2.0 * h);
                    let ja = ev.jacobian[(r, i)];
                    assert!((jf - ja).abs() < 1e-5 * (1.0 + jf.abs()), "row {r} var {i}: {jf} vs {ja}");
                }
            }
        }
    }

    fn build_estimate_buffer_for(model: &VehicleModel, x0: &DVector<f64>, u: Vec<DVector<f64>>) -> EstimateBuffer {
        crate::estimator::build_estimate_buffer(model, 0, 0, x0, u).unwrap()
    }
}
