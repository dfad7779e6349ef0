//! Discrete-time agent models `x⁺ = f(x, u)` and box constraint sets.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure_dim, ensure_finite, Error, Result};

pub type StateVector = DVector<f64>;
pub type ControlVector = DVector<f64>;

/// Threshold on the input sensitivity norm below which an output is treated as u-independent.
pub const RELATIVE_DEGREE_TOL: f64 = 1e-8;

pub trait DynamicsModel: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn sampling_time(&self) -> f64;

    /// Evaluates `f(x, u)`. Callers are expected to have checked dimensions.
    fn eval(&self, x: &StateVector, u: &ControlVector) -> StateVector;

    /// `(∂f/∂x, ∂f/∂u)`; central differences unless a model overrides it.
    fn jacobians(&self, x: &StateVector, u: &ControlVector) -> (DMatrix<f64>, DMatrix<f64>) {
        central_jacobians(self, x, u)
    }

    fn name(&self) -> &'static str;
}

pub fn central_jacobians<M: DynamicsModel + ?Sized>(
    model: &M,
    x: &StateVector,
    u: &ControlVector,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = model.state_dim();
    let q = model.input_dim();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, q);
    for c in 0..n {
        let h = 1e-6 * (1.0 + x[c].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[c] += h;
        xm[c] -= h;
        let col = (model.eval(&xp, u) - model.eval(&xm, u)) / (2.0 * h);
        a.set_column(c, &col);
    }
    for c in 0..q {
        let h = 1e-6 * (1.0 + u[c].abs());
        let mut up = u.clone();
        let mut um = u.clone();
        up[c] += h;
        um[c] -= h;
        let col = (model.eval(x, &up) - model.eval(x, &um)) / (2.0 * h);
        b.set_column(c, &col);
    }
    (a, b)
}

/// Planar vehicle with cubic drag: positions integrate velocities, velocities
/// integrate `drag·v³ + u` per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleModel {
    pub dt: f64,
    pub drag: f64,
}

impl Default for VehicleModel {
    fn default() -> Self {
        Self { dt: 0.1, drag: -3.0 }
    }
}

impl DynamicsModel for VehicleModel {
    fn state_dim(&self) -> usize {
        4
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn sampling_time(&self) -> f64 {
        self.dt
    }

    fn eval(&self, x: &StateVector, u: &ControlVector) -> StateVector {
        let (dt, a) = (self.dt, self.drag);
        DVector::from_row_slice(&[
            x[0] + dt * x[2],
            x[1] + dt * x[3],
            x[2] + dt * (a * x[2].powi(3) + u[0]),
            x[3] + dt * (a * x[3].powi(3) + u[1]),
        ])
    }

    fn jacobians(&self, x: &StateVector, _u: &ControlVector) -> (DMatrix<f64>, DMatrix<f64>) {
        let (dt, a) = (self.dt, self.drag);
        let mut ja = DMatrix::identity(4, 4);
        ja[(0, 2)] = dt;
        ja[(1, 3)] = dt;
        ja[(2, 2)] = 1.0 + 3.0 * dt * a * x[2] * x[2];
        ja[(3, 3)] = 1.0 + 3.0 * dt * a * x[3] * x[3];
        let mut jb = DMatrix::zeros(4, 2);
        jb[(2, 0)] = dt;
        jb[(3, 1)] = dt;
        (ja, jb)
    }

    fn name(&self) -> &'static str {
        "vehicle"
    }
}

/// One-dimensional double integrator, state `(p, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubleIntegrator {
    pub dt: f64,
}

impl DynamicsModel for DoubleIntegrator {
    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn sampling_time(&self) -> f64 {
        self.dt
    }

    fn eval(&self, x: &StateVector, u: &ControlVector) -> StateVector {
        DVector::from_row_slice(&[x[0] + self.dt * x[1], x[1] + self.dt * u[0]])
    }

    fn jacobians(&self, _x: &StateVector, _u: &ControlVector) -> (DMatrix<f64>, DMatrix<f64>) {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, self.dt, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, self.dt]);
        (a, b)
    }

    fn name(&self) -> &'static str {
        "double_integrator"
    }
}

/// `x⁺ = x + dt·u` in `dim` dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleIntegrator {
    pub dt: f64,
    pub dim: usize,
}

impl DynamicsModel for SingleIntegrator {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn input_dim(&self) -> usize {
        self.dim
    }

    fn sampling_time(&self) -> f64 {
        self.dt
    }

    fn eval(&self, x: &StateVector, u: &ControlVector) -> StateVector {
        x + u * self.dt
    }

    fn jacobians(&self, _x: &StateVector, _u: &ControlVector) -> (DMatrix<f64>, DMatrix<f64>) {
        (DMatrix::identity(self.dim, self.dim), DMatrix::identity(self.dim, self.dim) * self.dt)
    }

    fn name(&self) -> &'static str {
        "single_integrator"
    }
}

/// Componentwise box `lower ≤ v ≤ upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl BoxSet {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        ensure_dim("box upper", upper.len(), lower.len())?;
        if lower.iter().zip(upper.iter()).any(|(l, u)| l > u) {
            return Err(Error::domain("box lower bound exceeds upper bound"));
        }
        Ok(Self { lower, upper })
    }

    pub fn symmetric(half_widths: &[f64]) -> Self {
        let upper = DVector::from_row_slice(half_widths);
        Self { lower: -upper.clone(), upper }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, v: &DVector<f64>, tol: f64) -> bool {
        v.len() == self.dim()
            && v.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(x, (l, u))| *x >= l - tol && *x <= u + tol)
    }

    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            v.len(),
            v.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .map(|(x, (l, u))| x.clamp(*l, *u)),
        )
    }

    /// All `2^dim` corners, enumerated in binary order (bit set = upper).
    pub fn vertices(&self) -> Vec<DVector<f64>> {
        let d = self.dim();
        (0..1usize << d)
            .map(|mask| {
                DVector::from_iterator(
                    d,
                    (0..d).map(|k| if mask >> k & 1 == 1 { self.upper[k] } else { self.lower[k] }),
                )
            })
            .collect()
    }
}

/// State set 𝒳 and input set 𝒰.
#[derive(Debug, Clone, PartialEq)]
pub struct Limits {
    pub state: BoxSet,
    pub input: BoxSet,
}

/// `f(x, u)` with dimension and finiteness checks.
pub fn step(model: &dyn DynamicsModel, x: &StateVector, u: &ControlVector) -> Result<StateVector> {
    ensure_dim("state", x.len(), model.state_dim())?;
    ensure_dim("input", u.len(), model.input_dim())?;
    ensure_finite("state", x.as_slice())?;
    ensure_finite("input", u.as_slice())?;
    let next = model.eval(x, u);
    if !next.iter().all(|v| v.is_finite()) {
        return Err(Error::numerical("dynamics produced a non-finite state"));
    }
    Ok(next)
}

/// `f(x, 0)`.
pub fn uncontrolled_step(model: &dyn DynamicsModel, x: &StateVector) -> StateVector {
    model.eval(x, &DVector::zeros(model.input_dim()))
}

/// States `x(1)…x(T)` obtained by applying `inputs` from `x0`.
pub fn rollout(
    model: &dyn DynamicsModel,
    x0: &StateVector,
    inputs: &[ControlVector],
) -> Result<Vec<StateVector>> {
    let mut out = Vec::with_capacity(inputs.len());
    let mut x = x0.clone();
    for u in inputs {
        x = step(model, &x, u)?;
        out.push(x.clone());
    }
    Ok(out)
}

/// Smallest number of steps after which `u` measurably influences `output`,
/// probed at `x` with `u = 0`. `None` when no order up to `max_order` qualifies.
pub fn relative_degree_probe(
    model: &dyn DynamicsModel,
    output: &dyn Fn(&StateVector) -> f64,
    x: &StateVector,
    max_order: usize,
) -> Result<Option<usize>> {
    ensure_dim("state", x.len(), model.state_dim())?;
    let q = model.input_dim();
    let u0 = DVector::<f64>::zeros(q);
    let through = |u: &ControlVector, order: usize| {
        let mut s = model.eval(x, u);
        for _ in 1..order {
            s = uncontrolled_step(model, &s);
        }
        output(&s)
    };
    for order in 1..=max_order {
        let mut sq = 0.0;
        for c in 0..q {
            let h = 1e-5 * (1.0 + u0[c].abs());
            let mut up = u0.clone();
            let mut um = u0.clone();
            up[c] += h;
            um[c] -= h;
            let d = (through(&up, order) - through(&um, order)) / (2.0 * h);
            if !d.is_finite() {
                return Err(Error::numerical("non-finite sensitivity in relative degree probe"));
            }
            sq += d * d;
        }
        if sq.sqrt() > RELATIVE_DEGREE_TOL {
            return Ok(Some(order));
        }
    }
    Ok(None)
}
