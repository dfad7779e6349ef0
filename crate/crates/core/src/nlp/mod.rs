//! Small dense nonlinear programming toolkit used by the controllers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub mod qp;
pub mod sqp;

pub use sqp::{minimize, SqpOptions, SqpResult};

/// Outcome of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    FeasibleSuboptimal,
    Infeasible,
    NumericalFailure,
}

impl SolveStatus {
    pub fn is_feasible(self) -> bool {
        matches!(self, SolveStatus::Optimal | SolveStatus::FeasibleSuboptimal)
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub objective: f64,
    pub gradient: DVector<f64>,
    /// Constraint values; feasible when every entry is `≤ 0`.
    pub constraints: DVector<f64>,
    pub jacobian: DMatrix<f64>,
}

/// `minimize f(z)` subject to `c(z) ≤ 0` and `lb ≤ z ≤ ub`.
pub trait Nlp {
    fn num_vars(&self) -> usize;
    fn num_constraints(&self) -> usize;
    fn bounds(&self) -> (DVector<f64>, DVector<f64>);
    fn evaluate(&self, z: &DVector<f64>) -> (f64, DVector<f64>);
    fn evaluate_with_derivatives(&self, z: &DVector<f64>) -> Evaluation;
}

/// An [`Nlp`] given by plain closures, differentiated by central differences.
/// Meant for small programs whose functions are cheap and smooth.
pub struct FdProblem<F, C>
where
    F: Fn(&DVector<f64>) -> f64,
    C: Fn(&DVector<f64>) -> DVector<f64>,
{
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub num_constraints: usize,
    pub objective: F,
    pub constraints: C,
}

impl<F, C> Nlp for FdProblem<F, C>
where
    F: Fn(&DVector<f64>) -> f64,
    C: Fn(&DVector<f64>) -> DVector<f64>,
{
    fn num_vars(&self) -> usize {
        self.lower.len()
    }

    fn num_constraints(&self) -> usize {
        self.num_constraints
    }

    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        (self.lower.clone(), self.upper.clone())
    }

    fn evaluate(&self, z: &DVector<f64>) -> (f64, DVector<f64>) {
        ((self.objective)(z), (self.constraints)(z))
    }

    fn evaluate_with_derivatives(&self, z: &DVector<f64>) -> Evaluation {
        let n = z.len();
        let objective = (self.objective)(z);
        let constraints = (self.constraints)(z);
        let mut gradient = DVector::zeros(n);
        let mut jacobian = DMatrix::zeros(self.num_constraints, n);
        for i in 0..n {
            let h = 1e-6 * (1.0 + z[i].abs());
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[i] += h;
            zm[i] -= h;
            gradient[i] = ((self.objective)(&zp) - (self.objective)(&zm)) / (2.0 * h);
            let dc = ((self.constraints)(&zp) - (self.constraints)(&zm)) / (2.0 * h);
            jacobian.set_column(i, &dc);
        }
        Evaluation { objective, gradient, constraints, jacobian }
    }
}
