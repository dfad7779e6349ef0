//! Sequential quadratic programming with an elastic subproblem.
//!
//! Each iteration solves
//!
//! ```text
//! minimize    ½ dᵀB d + ∇fᵀd + μ t
//! subject to  c(z) + J(z) d ≤ t,  t ≥ 0,  lb ≤ z + d ≤ ub
//! ```
//!
//! which is always feasible, then backtracks on the merit function
//! `f + μ·max(0, max_i c_i)`. `B` is a damped BFGS approximation of the
//! Lagrangian Hessian. If even the largest penalty cannot reduce the
//! linearized violation, the point is reported as locally infeasible.

use nalgebra::{DMatrix, DVector};

use super::qp::{solve_qp, QpProblem};
use super::{Nlp, SolveStatus};

#[derive(Debug, Clone)]
pub struct SqpOptions {
    pub max_iterations: usize,
    pub feas_tol: f64,
    pub step_tol: f64,
    pub initial_penalty: f64,
    pub max_penalty: f64,
}

impl Default for SqpOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            feas_tol: crate::FEAS_TOL,
            step_tol: 1e-9,
            initial_penalty: 10.0,
            max_penalty: 1e8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SqpResult {
    pub z: DVector<f64>,
    pub objective: f64,
    pub constraints: DVector<f64>,
    pub status: SolveStatus,
    pub iterations: usize,
    pub multipliers: DVector<f64>,
}

impl SqpResult {
    pub fn max_violation(&self) -> f64 {
        violation(&self.constraints)
    }
}

pub(crate) fn violation(c: &DVector<f64>) -> f64 {
    c.iter().fold(0.0_f64, |a, v| a.max(*v))
}

pub fn minimize<P: Nlp + ?Sized>(problem: &P, z0: &DVector<f64>, opts: &SqpOptions) -> SqpResult {
    let n = problem.num_vars();
    let (lb, ub) = problem.bounds();
    let free: Vec<usize> = (0..n).filter(|&i| ub[i] - lb[i] > 1e-14).collect();
    let nf = free.len();

    let mut z = DVector::from_fn(n, |i, _| {
        let v = if z0[i].is_finite() { z0[i] } else { 0.0 };
        v.clamp(lb[i], ub[i])
    });

    // work on f / scale so that the unit initial Hessian and the penalties fit the problem
    let first = problem.evaluate_with_derivatives(&z);
    let g0 = DVector::from_fn(nf, |k, _| first.gradient[free[k]]);
    let scale = if g0.iter().all(|v| v.is_finite()) { g0.amax().max(1.0) } else { 1.0 };
    let scaled = |mut e: super::Evaluation| {
        e.objective /= scale;
        e.gradient /= scale;
        e
    };
    let eval_plain = |z: &DVector<f64>| {
        let (f, c) = problem.evaluate(z);
        (f / scale, c)
    };
    let mut ev = scaled(first);
    let mut iterations = 0;
    let mut mu = opts.initial_penalty;
    let mut b = DMatrix::<f64>::identity(nf, nf);
    let mut lambda = DVector::zeros(problem.num_constraints());
    let mut converged = false;
    let mut infeasible = false;
    let mut failed = false;

    let mut best: Option<(DVector<f64>, f64, DVector<f64>)> = None;
    let consider = |best: &mut Option<(DVector<f64>, f64, DVector<f64>)>, z: &DVector<f64>, f: f64, c: &DVector<f64>| {
        if violation(c) <= opts.feas_tol && f.is_finite() && best.as_ref().is_none_or(|(_, bf, _)| f < *bf) {
            *best = Some((z.clone(), f, c.clone()));
        }
    };
    consider(&mut best, &z, ev.objective, &ev.constraints);

    if !ev.objective.is_finite() || !ev.constraints.iter().all(|v| v.is_finite()) {
        failed = true;
    }

    while !failed && iterations < opts.max_iterations {
        iterations += 1;
        let viol = violation(&ev.constraints);
        let m = ev.constraints.len();

        let g_free = DVector::from_fn(nf, |k, _| ev.gradient[free[k]]);
        let mu_cap = opts.max_penalty;
        let j_free = DMatrix::from_fn(m, nf, |i, k| ev.jacobian[(i, free[k])]);

        // QP in (d_free, t)
        let mut hess = DMatrix::zeros(nf + 1, nf + 1);
        hess.view_mut((0, 0), (nf, nf)).copy_from(&b);
        let mut g_rows = DMatrix::zeros(m, nf + 1);
        g_rows.view_mut((0, 0), (m, nf)).copy_from(&j_free);
        for i in 0..m {
            g_rows[(i, nf)] = -1.0;
        }
        let h_rows = -&ev.constraints;
        let mut lo = DVector::from_fn(nf + 1, |k, _| if k < nf { lb[free[k]] - z[free[k]] } else { 0.0 });
        let mut hi = DVector::from_fn(nf + 1, |k, _| if k < nf { ub[free[k]] - z[free[k]] } else { f64::INFINITY });
        if m == 0 {
            lo[nf] = 0.0;
            hi[nf] = 0.0;
        }

        let (d, t_star, qp_lambda) = loop {
            let mut linear = DVector::zeros(nf + 1);
            linear.rows_mut(0, nf).copy_from(&g_free);
            linear[nf] = mu;
            let qp = QpProblem {
                hessian: hess.clone(),
                linear,
                g: g_rows.clone(),
                h: h_rows.clone(),
                lo: lo.clone(),
                hi: hi.clone(),
            };
            let sol = match solve_qp(&qp) {
                Ok(s) => s,
                Err(_) => {
                    failed = true;
                    break (DVector::zeros(nf), 0.0, DVector::zeros(m));
                }
            };
            let t_star = sol.x[nf].max(0.0);
            let enough = t_star <= 0.01 * opts.feas_tol || t_star <= 0.9 * viol;
            if enough || mu >= mu_cap {
                break (sol.x.rows(0, nf).into_owned(), t_star, sol.lambda);
            }
            mu = (mu * 10.0).min(mu_cap);
        };
        if failed {
            break;
        }

        if viol > opts.feas_tol && mu >= mu_cap && t_star >= viol - 1e-12 * (1.0 + viol) {
            infeasible = true;
            break;
        }
        lambda = qp_lambda;

        let d_inf = d.amax();
        let z_inf = z.amax();
        let quad = 0.5 * d.dot(&(&b * &d));
        let pred = -(g_free.dot(&d) + quad) + mu * (viol - t_star);
        if viol <= opts.feas_tol && (d_inf <= opts.step_tol * (1.0 + z_inf) || pred <= 1e-14 * (1.0 + ev.objective.abs())) {
            converged = true;
            break;
        }

        // backtracking on the merit function
        let merit0 = ev.objective + mu * viol;
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha >= 1e-10 {
            let mut z_new = z.clone();
            for (k, &i) in free.iter().enumerate() {
                z_new[i] = (z[i] + alpha * d[k]).clamp(lb[i], ub[i]);
            }
            let (f_new, c_new) = eval_plain(&z_new);
            let merit = f_new + mu * violation(&c_new);
            if merit.is_finite() && merit <= merit0 - 1e-4 * alpha * pred.max(0.0) {
                accepted = Some(z_new);
                break;
            }
            alpha *= 0.5;
        }
        let Some(z_new) = accepted else {
            // no progress possible along the QP direction
            if viol <= opts.feas_tol {
                converged = d_inf <= 1e-6 * (1.0 + z_inf);
            }
            break;
        };

        let ev_new = scaled(problem.evaluate_with_derivatives(&z_new));
        if !ev_new.objective.is_finite() {
            break;
        }
        // damped BFGS on the Lagrangian gradient
        let grad_l = |e: &super::Evaluation| {
            let gl = &e.gradient + e.jacobian.transpose() * &lambda;
            DVector::from_fn(nf, |k, _| gl[free[k]])
        };
        let s_vec = DVector::from_fn(nf, |k, _| z_new[free[k]] - z[free[k]]);
        let y_vec = grad_l(&ev_new) - grad_l(&ev);
        let bs = &b * &s_vec;
        let sbs = s_vec.dot(&bs);
        let sy = s_vec.dot(&y_vec);
        if sbs > 1e-300 {
            let theta = if sy >= 0.2 * sbs { 1.0 } else { 0.8 * sbs / (sbs - sy) };
            let r = &y_vec * theta + &bs * (1.0 - theta);
            let sr = s_vec.dot(&r);
            if sr > 1e-300 {
                b -= &bs * bs.transpose() / sbs;
                b += &r * r.transpose() / sr;
            }
        }

        z = z_new;
        ev = ev_new;
        consider(&mut best, &z, ev.objective, &ev.constraints);
    }

    let final_viol = violation(&ev.constraints);
    if converged && final_viol <= opts.feas_tol {
        return SqpResult {
            z,
            objective: ev.objective * scale,
            constraints: ev.constraints,
            status: SolveStatus::Optimal,
            iterations,
            multipliers: lambda,
        };
    }
    if let Some((bz, bf, bc)) = best {
        return SqpResult {
            z: bz,
            objective: bf * scale,
            constraints: bc,
            status: SolveStatus::FeasibleSuboptimal,
            iterations,
            multipliers: lambda,
        };
    }
    SqpResult {
        z,
        objective: ev.objective * scale,
        constraints: ev.constraints,
        status: if infeasible { SolveStatus::Infeasible } else { SolveStatus::NumericalFailure },
        iterations,
        multipliers: lambda,
    }
}
