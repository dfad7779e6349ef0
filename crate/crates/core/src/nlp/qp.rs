//! Dense convex QP by a primal-dual interior-point method (Mehrotra
//! predictor-corrector).
//!
//! ```text
//! minimize    ½ xᵀH x + cᵀx
//! subject to  G x ≤ h
//!             lo ≤ x ≤ hi        (entries may be infinite)
//! ```

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers of the `G x ≤ h` rows.
    pub lambda: DVector<f64>,
    /// Multipliers of upper bounds minus multipliers of lower bounds, per variable.
    pub bound_lambda: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

const MAX_ITER: usize = 100;
const TOL: f64 = 1e-10;

struct BoundRow {
    var: usize,
    sign: f64,
    rhs: f64,
}

pub fn solve_qp(p: &QpProblem) -> Result<QpSolution> {
    let n = p.linear.len();
    let m_g = p.h.len();
    if p.hessian.shape() != (n, n) || p.g.shape() != (m_g, n) || p.lo.len() != n || p.hi.len() != n {
        return Err(Error::domain("inconsistent QP dimensions"));
    }

    // normalize general rows
    let mut g = p.g.clone();
    let mut h = p.h.clone();
    let mut row_scale = DVector::from_element(m_g, 1.0);
    for i in 0..m_g {
        let nrm = g.row(i).amax();
        if nrm > 0.0 {
            row_scale[i] = nrm;
            g.row_mut(i).scale_mut(1.0 / nrm);
            h[i] /= nrm;
        }
    }

    let mut bounds = Vec::new();
    for j in 0..n {
        if p.hi[j].is_finite() {
            bounds.push(BoundRow { var: j, sign: 1.0, rhs: p.hi[j] });
        }
        if p.lo[j].is_finite() {
            bounds.push(BoundRow { var: j, sign: -1.0, rhs: -p.lo[j] });
        }
    }
    let m_b = bounds.len();
    let m = m_g + m_b;

    let mut x = DVector::from_fn(n, |j, _| {
        let (l, u) = (p.lo[j], p.hi[j]);
        match (l.is_finite(), u.is_finite()) {
            (true, true) => 0.5 * (l + u),
            (true, false) => l.max(0.0),
            (false, true) => u.min(0.0),
            _ => 0.0,
        }
    });

    if m == 0 {
        let chol = factor(p.hessian.clone())?;
        x = chol.solve(&(-&p.linear));
        return Ok(QpSolution {
            x,
            lambda: DVector::zeros(m_g),
            bound_lambda: DVector::zeros(n),
            iterations: 0,
            converged: true,
        });
    }

    let gx = &g * &x;
    let mut s = DVector::from_fn(m, |i, _| {
        let r = if i < m_g {
            h[i] - gx[i]
        } else {
            let b = &bounds[i - m_g];
            b.rhs - b.sign * x[b.var]
        };
        r.max(1.0)
    });
    let mut lam = DVector::from_element(m, 1.0);

    let c_scale = 1.0 + p.linear.amax();
    let h_scale = 1.0 + h.amax().max(bounds.iter().map(|b| b.rhs.abs()).fold(0.0, f64::max));

    let mut converged = false;
    let mut iterations = 0;
    for it in 0..MAX_ITER {
        iterations = it + 1;
        // residuals
        let gx = &g * &x;
        let mut r_d = &p.hessian * &x + &p.linear + g.transpose() * lam.rows(0, m_g);
        for (k, b) in bounds.iter().enumerate() {
            r_d[b.var] += b.sign * lam[m_g + k];
        }
        let r_p = DVector::from_fn(m, |i, _| {
            if i < m_g {
                gx[i] + s[i] - h[i]
            } else {
                let b = &bounds[i - m_g];
                b.sign * x[b.var] + s[i] - b.rhs
            }
        });
        let mu = s.dot(&lam) / m as f64;
        if r_d.amax() <= TOL * c_scale && r_p.amax() <= TOL * h_scale && mu <= TOL {
            converged = true;
            break;
        }
        if !mu.is_finite() || !r_d.amax().is_finite() {
            return Err(Error::numerical("QP iterates diverged"));
        }

        let w = lam.component_div(&s);
        let mut mat = p.hessian.clone();
        let mut gt_w = g.transpose();
        for i in 0..m_g {
            gt_w.column_mut(i).scale_mut(w[i]);
        }
        mat += &gt_w * &g;
        for (k, b) in bounds.iter().enumerate() {
            mat[(b.var, b.var)] += w[m_g + k];
        }
        let chol = factor(mat)?;

        let solve_dir = |r_c: &DVector<f64>| -> (DVector<f64>, DVector<f64>, DVector<f64>) {
            // Δλ = W(GΔx + r_p) - S⁻¹ r_c ;  (H + GᵀWG)Δx = -r_d - Gᵀ(W r_p - S⁻¹ r_c)
            let t = DVector::from_fn(m, |i, _| w[i] * r_p[i] - r_c[i] / s[i]);
            let mut rhs = -&r_d - g.transpose() * t.rows(0, m_g);
            for (k, b) in bounds.iter().enumerate() {
                rhs[b.var] -= b.sign * t[m_g + k];
            }
            let dx = chol.solve(&rhs);
            let gdx = &g * &dx;
            let a_dx = DVector::from_fn(m, |i, _| {
                if i < m_g {
                    gdx[i]
                } else {
                    let b = &bounds[i - m_g];
                    b.sign * dx[b.var]
                }
            });
            let dlam = DVector::from_fn(m, |i, _| w[i] * (a_dx[i] + r_p[i]) - r_c[i] / s[i]);
            let ds = -&r_p - a_dx;
            (dx, ds, dlam)
        };

        let r_c_aff = s.component_mul(&lam);
        let (_, ds_a, dl_a) = solve_dir(&r_c_aff);
        let a_p = max_step(&s, &ds_a);
        let a_d = max_step(&lam, &dl_a);
        let mu_aff = (&s + &ds_a * a_p).dot(&(&lam + &dl_a * a_d)) / m as f64;
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);

        let r_c = DVector::from_fn(m, |i, _| s[i] * lam[i] + ds_a[i] * dl_a[i] - sigma * mu);
        let (dx, ds, dl) = solve_dir(&r_c);
        let alpha = (0.99 * max_step(&s, &ds).min(max_step(&lam, &dl))).min(1.0);
        x += &dx * alpha;
        s += &ds * alpha;
        lam += &dl * alpha;
        // keep strictly interior
        for v in s.iter_mut().chain(lam.iter_mut()) {
            *v = v.max(1e-300);
        }
    }

    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::numerical("QP produced non-finite iterate"));
    }
    let lambda = DVector::from_fn(m_g, |i, _| lam[i] / row_scale[i]);
    let mut bound_lambda = DVector::zeros(n);
    for (k, b) in bounds.iter().enumerate() {
        bound_lambda[b.var] += b.sign * lam[m_g + k];
    }
    Ok(QpSolution { x, lambda, bound_lambda, iterations, converged })
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(1.0, f64::min)
}

fn factor(mut mat: DMatrix<f64>) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    let scale = 1.0 + mat.diagonal().amax();
    let mut reg = 0.0;
    for _ in 0..12 {
        if let Some(c) = Cholesky::new(mat.clone()) {
            return Ok(c);
        }
        let bump = if reg == 0.0 { 1e-12 * scale } else { reg * 99.0 };
        for i in 0..mat.nrows() {
            mat[(i, i)] += bump;
        }
        reg += bump;
    }
    Err(Error::numerical("QP normal matrix is not positive definite"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unbounded(n: usize) -> (DVector<f64>, DVector<f64>) {
        (DVector::from_element(n, f64::NEG_INFINITY), DVector::from_element(n, f64::INFINITY))
    }

    #[test]
    fn unconstrained_minimum() {
        let (lo, hi) = unbounded(2);
        let p = QpProblem {
            hessian: DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]),
            linear: DVector::from_row_slice(&[-2.0, -4.0]),
            g: DMatrix::zeros(0, 2),
            h: DVector::zeros(0),
            lo,
            hi,
        };
        let s = solve_qp(&p).unwrap();
        assert!((s.x[0] - 1.0).abs() < 1e-12 && (s.x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn active_inequality_and_bounds() {
        // min (x-2)² + (y-2)²  s.t. x + y ≤ 1, 0 ≤ x ≤ 0.2
        let p = QpProblem {
            hessian: DMatrix::identity(2, 2) * 2.0,
            linear: DVector::from_row_slice(&[-4.0, -4.0]),
            g: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            h: DVector::from_row_slice(&[1.0]),
            lo: DVector::from_row_slice(&[0.0, f64::NEG_INFINITY]),
            hi: DVector::from_row_slice(&[0.2, f64::INFINITY]),
        };
        let s = solve_qp(&p).unwrap();
        assert!(s.converged);
        assert!((s.x[0] - 0.2).abs() < 1e-8, "{}", s.x);
        assert!((s.x[1] - 0.8).abs() < 1e-8);
        // stationarity: 2(y-2) + λ = 0
        assert!((s.lambda[0] - 2.4).abs() < 1e-6);
    }

    #[test]
    fn lp_with_zero_hessian_block() {
        // min t s.t. 1 - t ≤ 0, t ≥ 0  → t = 1
        let p = QpProblem {
            hessian: DMatrix::zeros(1, 1),
            linear: DVector::from_row_slice(&[1.0]),
            g: DMatrix::from_row_slice(1, 1, &[-1.0]),
            h: DVector::from_row_slice(&[-1.0]),
            lo: DVector::from_row_slice(&[0.0]),
            hi: DVector::from_row_slice(&[f64::INFINITY]),
        };
        let s = solve_qp(&p).unwrap();
        assert!((s.x[0] - 1.0).abs() < 1e-8);
    }
}
