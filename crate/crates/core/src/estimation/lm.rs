// SPDX-License-Identifier: Apache-2.0

//! Damped Gauss–Newton (Levenberg–Marquardt) for small dense problems.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub(crate) const MAX_ITERATIONS: usize = 200;
const STEP_TOL: f64 = 1e-10;
const COST_TOL: f64 = 1e-12;
const MAX_DAMPING: f64 = 1e16;

/// Weighted residuals and their Jacobian at a parameter point. An `Err`
/// marks the point as outside the model's domain; the solver backs off.
pub(crate) type Evaluation = Result<(DVector<f64>, DMatrix<f64>)>;

#[derive(Debug, Clone)]
pub(crate) struct Outcome {
    pub params: DVector<f64>,
    pub residuals: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub message: String,
}

impl Outcome {
    pub fn cost(&self) -> f64 {
        self.residuals.norm_squared()
    }

    /// `(JᵀJ)⁻¹`, via pseudo-inverse when the problem is rank deficient.
    pub fn covariance(&self) -> DMatrix<f64> {
        let jtj = self.jacobian.transpose() * &self.jacobian;
        let (rows, cols) = jtj.shape();
        match jtj.clone().cholesky() {
            Some(c) => c.inverse(),
            None => jtj
                .pseudo_inverse(1e-14)
                .unwrap_or_else(|_| DMatrix::from_element(rows, cols, f64::NAN)),
        }
    }
}

pub(crate) fn minimize<F>(mut eval: F, start: DVector<f64>, max_iterations: usize) -> Result<Outcome>
where
    F: FnMut(&DVector<f64>) -> Evaluation,
{
    let mut p = start;
    let (mut r, mut j) = eval(&p)?;
    let mut cost = r.norm_squared();
    if !cost.is_finite() {
        return Err(Error::Degenerate("non-finite residuals at the starting point".into()));
    }
    let mut lambda = 1e-3;
    let mut iterations = 0;

    let finish = |p, r, j, iterations, converged, message: &str| Outcome {
        params: p,
        residuals: r,
        jacobian: j,
        iterations,
        converged,
        message: message.to_string(),
    };

    while iterations < max_iterations {
        iterations += 1;
        if cost == 0.0 {
            return Ok(finish(p, r, j, iterations, true, "exact fit"));
        }
        let jt = j.transpose();
        let a = &jt * &j;
        let g = &jt * &r;
        let scale: DVector<f64> = a.diagonal().map(|d| if d > 0.0 { d } else { 1.0 });

        let mut accepted = None;
        while lambda <= MAX_DAMPING {
            let mut damped = a.clone();
            for i in 0..damped.nrows() {
                damped[(i, i)] += lambda * scale[i];
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&(-&g));
            let trial = &p + &step;
            match eval(&trial) {
                Ok((rt, jt)) if rt.norm_squared() < cost => {
                    accepted = Some((trial, rt, jt, step));
                    break;
                }
                _ => lambda *= 10.0,
            }
        }

        let Some((trial, rt, jt, step)) = accepted else {
            // No downhill direction left: a minimum to working precision.
            return Ok(finish(p, r, j, iterations, true, "no further decrease"));
        };
        let new_cost = rt.norm_squared();
        let rel_step = step.norm() / (p.norm() + STEP_TOL);
        let rel_cost = (cost - new_cost) / cost;
        let small_damping = lambda < 1.0;
        p = trial;
        r = rt;
        j = jt;
        cost = new_cost;
        lambda = (lambda / 10.0).max(1e-12);
        if rel_step < STEP_TOL {
            return Ok(finish(p, r, j, iterations, true, "relative step below tolerance"));
        }
        if small_damping && rel_cost < COST_TOL {
            return Ok(finish(
                p,
                r,
                j,
                iterations,
                true,
                "relative cost change below tolerance",
            ));
        }
    }
    Ok(finish(p, r, j, iterations, false, "iteration cap reached"))
}

/// Central-difference Jacobian of `f` at `p`.
pub(crate) fn numeric_jacobian<F>(f: &F, p: &DVector<f64>, r0: &DVector<f64>) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let mut j = DMatrix::zeros(r0.len(), p.len());
    for k in 0..p.len() {
        let h = 1e-6 * p[k].abs().max(1e-6);
        let mut hi = p.clone();
        hi[k] += h;
        let mut lo = p.clone();
        lo[k] -= h;
        // Fall back to a one-sided difference at a domain edge.
        let col = match (f(&hi), f(&lo)) {
            (Ok(a), Ok(b)) => (a - b) / (2.0 * h),
            (Ok(a), Err(_)) => (a - r0) / h,
            (Err(_), Ok(b)) => (r0 - b) / h,
            (Err(e), Err(_)) => return Err(e),
        };
        j.set_column(k, &col);
    }
    Ok(j)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay_recovered() {
        let t: Vec<f64> = (0..30).map(|i| i as f64 * 0.2).collect();
        let y: Vec<f64> = t.iter().map(|t| 2.5 * (-1.3 * t).exp()).collect();
        let eval = |p: &DVector<f64>| -> Evaluation {
            let r = DVector::from_iterator(t.len(), t.iter().zip(&y).map(|(t, y)| p[0] * (-p[1] * t).exp() - y));
            let mut j = DMatrix::zeros(t.len(), 2);
            for (i, t) in t.iter().enumerate() {
                let e = (-p[1] * t).exp();
                j[(i, 0)] = e;
                j[(i, 1)] = -p[0] * t * e;
            }
            Ok((r, j))
        };
        let out = minimize(eval, DVector::from_vec(vec![1.0, 0.3]), MAX_ITERATIONS).unwrap();
        assert!(out.converged, "{}", out.message);
        assert!((out.params[0] - 2.5).abs() < 1e-8);
        assert!((out.params[1] - 1.3).abs() < 1e-8);
    }

    #[test]
    fn rosenbrock_within_cap() {
        let eval = |p: &DVector<f64>| -> Evaluation {
            let r = DVector::from_vec(vec![10.0 * (p[1] - p[0] * p[0]), 1.0 - p[0]]);
            let j = DMatrix::from_row_slice(2, 2, &[-20.0 * p[0], 10.0, -1.0, 0.0]);
            Ok((r, j))
        };
        let out = minimize(eval, DVector::from_vec(vec![-1.2, 1.0]), MAX_ITERATIONS).unwrap();
        assert!(out.converged);
        assert!((out.params[0] - 1.0).abs() < 1e-8 && (out.params[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn iteration_cap_reports_not_converged() {
        let eval = |p: &DVector<f64>| -> Evaluation {
            let r = DVector::from_vec(vec![10.0 * (p[1] - p[0] * p[0]), 1.0 - p[0]]);
            let j = DMatrix::from_row_slice(2, 2, &[-20.0 * p[0], 10.0, -1.0, 0.0]);
            Ok((r, j))
        };
        let out = minimize(eval, DVector::from_vec(vec![-1.2, 1.0]), 2).unwrap();
        assert!(!out.converged);
        assert_eq!(out.iterations, 2);
    }

    #[test]
    fn numeric_jacobian_matches_analytic() {
        let f = |p: &DVector<f64>| -> Result<DVector<f64>> { Ok(DVector::from_vec(vec![p[0] * p[1], p[0].sin()])) };
        let p = DVector::from_vec(vec![0.7, -2.0]);
        let j = numeric_jacobian(&f, &p, &f(&p).unwrap()).unwrap();
        assert!((j[(0, 0)] + 2.0).abs() < 1e-8);
        assert!((j[(0, 1)] - 0.7).abs() < 1e-8);
        assert!((j[(1, 0)] - 0.7f64.cos()).abs() < 1e-8);
        assert!(j[(1, 1)].abs() < 1e-12);
    }
}
