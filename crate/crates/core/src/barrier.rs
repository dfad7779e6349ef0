//! Discrete-time high-order control barrier functions.
//!
//! For a barrier `h` of relative degree `m` the chain
//!
//! ```text
//! ψ_0(x) = h(x)
//! ψ_l(x) = ψ_{l-1}(f̄(x)) - ψ_{l-1}(x) + φ_l·ψ_{l-1}(x),   l = 1…m-1
//! ψ_m(x, u) = ψ_{m-1}(f(x, u)) - ψ_{m-1}(x) + φ_m·ψ_{m-1}(x)
//! ```
//!
//! uses the uncontrolled map `f̄(x) = f(x, 0)` below order `m`, where the
//! input has no influence by definition of the relative degree.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;

use crate::dynamics::{
    relative_degree_probe, uncontrolled_step, BoxSet, ControlVector, DynamicsModel, StateVector,
};
use crate::error::{ensure_dim, Error, Result};
use crate::FEAS_TOL;

pub trait BarrierFunction: Send + Sync + fmt::Debug {
    fn value(&self, x: &StateVector) -> f64;

    fn gradient(&self, x: &StateVector) -> DVector<f64> {
        let mut g = DVector::zeros(x.len());
        for c in 0..x.len() {
            let h = 1e-6 * (1.0 + x[c].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += h;
            xm[c] -= h;
            g[c] = (self.value(&xp) - self.value(&xm)) / (2.0 * h);
        }
        g
    }
}

/// Circular obstacle on the first two state components: `h = ‖p - c‖² - r²`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObstacleBarrier {
    pub center: [f64; 2],
    pub radius: f64,
}

impl ObstacleBarrier {
    pub fn new(center: [f64; 2], radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::domain(format!("obstacle radius must be positive, got {radius}")));
        }
        Ok(Self { center, radius })
    }

    pub fn distance(&self, x: &StateVector) -> f64 {
        ((x[0] - self.center[0]).powi(2) + (x[1] - self.center[1]).powi(2)).sqrt()
    }

    /// Distance to the obstacle boundary, negative inside.
    pub fn clearance(&self, x: &StateVector) -> f64 {
        self.distance(x) - self.radius
    }
}

impl BarrierFunction for ObstacleBarrier {
    fn value(&self, x: &StateVector) -> f64 {
        (x[0] - self.center[0]).powi(2) + (x[1] - self.center[1]).powi(2) - self.radius.powi(2)
    }

    fn gradient(&self, x: &StateVector) -> DVector<f64> {
        let mut g = DVector::zeros(x.len());
        g[0] = 2.0 * (x[0] - self.center[0]);
        g[1] = 2.0 * (x[1] - self.center[1]);
        g
    }
}

/// `h = wᵀx + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineBarrier {
    pub weights: DVector<f64>,
    pub offset: f64,
}

impl BarrierFunction for AffineBarrier {
    fn value(&self, x: &StateVector) -> f64 {
        self.weights.dot(x) + self.offset
    }

    fn gradient(&self, _x: &StateVector) -> DVector<f64> {
        self.weights.clone()
    }
}

/// A barrier function together with its class-κ gains `φ_1…φ_m`; `m = phi.len()`.
#[derive(Debug, Clone)]
pub struct BarrierSpec {
    pub h: Arc<dyn BarrierFunction>,
    pub phi: Vec<f64>,
}

impl BarrierSpec {
    pub fn new(h: Arc<dyn BarrierFunction>, phi: Vec<f64>) -> Result<Self> {
        if phi.is_empty() {
            return Err(Error::domain("barrier needs at least one gain"));
        }
        if let Some(p) = phi.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return Err(Error::domain(format!("barrier gain {p} outside (0, 1]")));
        }
        Ok(Self { h, phi })
    }

    /// Same gain at every order.
    pub fn uniform(h: Arc<dyn BarrierFunction>, phi: f64, order: usize) -> Result<Self> {
        Self::new(h, vec![phi; order])
    }

    pub fn order(&self) -> usize {
        self.phi.len()
    }

    /// Confirms the declared order equals the probed relative degree of `h` at `x`.
    pub fn check_relative_degree(&self, model: &dyn DynamicsModel, x: &StateVector) -> Result<()> {
        let h = self.h.clone();
        let probed = relative_degree_probe(model, &move |s| h.value(s), x, self.order() + 2)?;
        match probed {
            Some(m) if m == self.order() => Ok(()),
            Some(m) => Err(Error::domain(format!(
                "barrier declares order {} but its relative degree is {m}",
                self.order()
            ))),
            None => Err(Error::domain("barrier is not influenced by the input")),
        }
    }
}

fn psi_unchecked(spec: &BarrierSpec, model: &dyn DynamicsModel, l: usize, x: &StateVector) -> f64 {
    if l == 0 {
        return spec.h.value(x);
    }
    let next = uncontrolled_step(model, x);
    psi_unchecked(spec, model, l - 1, &next) - (1.0 - spec.phi[l - 1]) * psi_unchecked(spec, model, l - 1, x)
}

fn psi_gradient_unchecked(
    spec: &BarrierSpec,
    model: &dyn DynamicsModel,
    l: usize,
    x: &StateVector,
) -> DVector<f64> {
    if l == 0 {
        return spec.h.gradient(x);
    }
    let u0 = DVector::zeros(model.input_dim());
    let next = model.eval(x, &u0);
    let (a, _) = model.jacobians(x, &u0);
    a.transpose() * psi_gradient_unchecked(spec, model, l - 1, &next)
        - psi_gradient_unchecked(spec, model, l - 1, x) * (1.0 - spec.phi[l - 1])
}

/// `ψ_l(x)` for `0 ≤ l ≤ m-1`.
pub fn psi(spec: &BarrierSpec, model: &dyn DynamicsModel, l: usize, x: &StateVector) -> Result<f64> {
    if l >= spec.order() {
        return Err(Error::domain(format!(
            "order {l} out of range for a barrier of relative degree {}",
            spec.order()
        )));
    }
    ensure_dim("state", x.len(), model.state_dim())?;
    Ok(psi_unchecked(spec, model, l, x))
}

/// `∇ψ_l(x)`.
pub fn psi_gradient(
    spec: &BarrierSpec,
    model: &dyn DynamicsModel,
    l: usize,
    x: &StateVector,
) -> Result<DVector<f64>> {
    if l >= spec.order() {
        return Err(Error::domain(format!("order {l} out of range")));
    }
    ensure_dim("state", x.len(), model.state_dim())?;
    Ok(psi_gradient_unchecked(spec, model, l, x))
}

/// The input-dependent top order `ψ_m(x, u)`; the safety constraint is `ψ_m ≥ 0`.
pub fn psi_m(
    spec: &BarrierSpec,
    model: &dyn DynamicsModel,
    x: &StateVector,
    u: &ControlVector,
) -> Result<f64> {
    ensure_dim("state", x.len(), model.state_dim())?;
    ensure_dim("input", u.len(), model.input_dim())?;
    let m = spec.order();
    let next = model.eval(x, u);
    let val = psi_unchecked(spec, model, m - 1, &next)
        - (1.0 - spec.phi[m - 1]) * psi_unchecked(spec, model, m - 1, x);
    if !val.is_finite() {
        return Err(Error::numerical("non-finite barrier value"));
    }
    Ok(val)
}

/// `(∂ψ_m/∂x, ∂ψ_m/∂u)`.
pub fn psi_m_gradients(
    spec: &BarrierSpec,
    model: &dyn DynamicsModel,
    x: &StateVector,
    u: &ControlVector,
) -> (DVector<f64>, DVector<f64>) {
    let m = spec.order();
    let next = model.eval(x, u);
    let (a, b) = model.jacobians(x, u);
    let g_next = psi_gradient_unchecked(spec, model, m - 1, &next);
    let gx = a.transpose() * &g_next
        - psi_gradient_unchecked(spec, model, m - 1, x) * (1.0 - spec.phi[m - 1]);
    let gu = b.transpose() * g_next;
    (gx, gu)
}

/// Element `l` tells whether `x ∈ C^l`, i.e. `ψ_l(x) ≥ -FEAS_TOL`.
pub fn safe_set_membership(spec: &BarrierSpec, model: &dyn DynamicsModel, x: &StateVector) -> Vec<bool> {
    (0..spec.order())
        .map(|l| psi_unchecked(spec, model, l, x) >= -FEAS_TOL)
        .collect()
}

/// Lowest `ψ_l(x)` over all orders below `m`.
pub fn min_psi(spec: &BarrierSpec, model: &dyn DynamicsModel, x: &StateVector) -> f64 {
    (0..spec.order())
        .map(|l| psi_unchecked(spec, model, l, x))
        .fold(f64::INFINITY, f64::min)
}

const ASCENT_STEPS: usize = 50;

/// Maximizes `objective` over `bounds`: best vertex, then projected gradient ascent.
fn maximize_on_box(
    bounds: &BoxSet,
    objective: &dyn Fn(&ControlVector) -> (f64, DVector<f64>),
) -> Result<(ControlVector, f64)> {
    let mut best: Option<(ControlVector, f64)> = None;
    for v in bounds.vertices() {
        let (val, _) = objective(&v);
        if !val.is_finite() {
            return Err(Error::numerical("non-finite objective on input box vertex"));
        }
        if best.as_ref().is_none_or(|(_, b)| val > *b) {
            best = Some((v, val));
        }
    }
    let (mut u, mut val) = best.expect("a box has at least one vertex");
    let width = (&bounds.upper - &bounds.lower).amax();
    let mut step = 0.25 * width.max(1e-12);
    for _ in 0..ASCENT_STEPS {
        let (_, g) = objective(&u);
        let gn = g.norm();
        if gn == 0.0 || !gn.is_finite() {
            break;
        }
        let cand = bounds.project(&(&u + &g * (step / gn)));
        let (cval, _) = objective(&cand);
        if cval > val {
            u = cand;
            val = cval;
            step *= 1.5;
        } else {
            step *= 0.5;
        }
    }
    Ok((u, val))
}

/// Checks the input-box lower-bound condition on `ψ_m` at `x`.
///
/// Returns the maximizer `u_M` of `ψ_{m-1}(f(x, u))` over the input box and the
/// margin `ψ_m(x, u_M)`; a non-negative margin certifies the condition at `x`.
pub fn assumption1_probe(
    spec: &BarrierSpec,
    model: &dyn DynamicsModel,
    x: &StateVector,
    inputs: &BoxSet,
) -> Result<(ControlVector, f64)> {
    best_appended_input(std::slice::from_ref(spec), model, x, inputs)
}

/// Input maximizing the smallest `ψ_m(x, u)` across `barriers`, with that value.
/// With a single barrier this is exactly the probe's `u_M` and margin.
pub fn best_appended_input(
    barriers: &[BarrierSpec],
    model: &dyn DynamicsModel,
    x: &StateVector,
    inputs: &BoxSet,
) -> Result<(ControlVector, f64)> {
    ensure_dim("state", x.len(), model.state_dim())?;
    ensure_dim("input box", inputs.dim(), model.input_dim())?;
    if barriers.is_empty() {
        let u = inputs.project(&DVector::zeros(model.input_dim()));
        return Ok((u, f64::INFINITY));
    }
    let objective = |u: &ControlVector| {
        let mut worst = f64::INFINITY;
        let mut grad = DVector::zeros(u.len());
        for b in barriers {
            let val = psi_m(b, model, x, u).unwrap_or(f64::NAN);
            if val < worst || val.is_nan() {
                worst = val;
                grad = psi_m_gradients(b, model, x, u).1;
            }
        }
        (worst, grad)
    };
    maximize_on_box(inputs, &objective)
}
