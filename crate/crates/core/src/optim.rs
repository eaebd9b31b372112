//! Small dense optimizers and finite-difference helpers.
//!
//! BFGS with backtracking line search is all the smooth low-dimensional
//! posterior maximisations here need. Gradients may be supplied or built
//! from central differences, and a central-difference Hessian supports
//! Laplace approximations.

use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    pub max_iters: usize,
    /// Stop when the gradient sup-norm falls below this.
    pub grad_tol: f64,
    /// Stop when a step changes the objective by less than this.
    pub f_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            grad_tol: 1e-6,
            f_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_norm: f64,
    pub iters: usize,
    pub converged: bool,
}

/// Minimise `f` starting at `x0` using BFGS with an Armijo backtracking line
/// search. `grad` must return the exact or approximate gradient of `f`.
pub fn minimize_bfgs<F, G>(
    x0: &[f64],
    mut f: F,
    mut grad: G,
    opts: &BfgsOptions,
    context: &str,
) -> Result<BfgsResult>
where
    F: FnMut(&[f64]) -> Result<f64>,
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let mut fx = f(x.as_slice())?;
    let mut g = DVector::from_vec(grad(x.as_slice())?);
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut iters = 0;

    for _ in 0..opts.max_iters {
        let g_norm = g.amax();
        if g_norm < opts.grad_tol {
            return Ok(BfgsResult {
                x: x.as_slice().to_vec(),
                f: fx,
                grad_norm: g_norm,
                iters,
                converged: true,
            });
        }
        iters += 1;

        let mut dir = -(&h_inv * &g);
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            // Curvature update went bad; reset to steepest descent.
            h_inv = DMatrix::identity(n, n);
            dir = -g.clone();
            slope = g.dot(&dir);
        }

        let mut t = 1.0;
        let mut x_new = &x + &dir * t;
        let mut f_new = f(x_new.as_slice()).unwrap_or(f64::INFINITY);
        let mut backtracks = 0;
        while !(f_new <= fx + 1e-4 * t * slope) {
            t *= 0.5;
            backtracks += 1;
            if backtracks > 50 {
                break;
            }
            x_new = &x + &dir * t;
            f_new = f(x_new.as_slice()).unwrap_or(f64::INFINITY);
        }
        if backtracks > 50 || !f_new.is_finite() {
            // No acceptable step along this direction; treat current point
            // as the optimum if the gradient is small, otherwise fail.
            return Ok(BfgsResult {
                x: x.as_slice().to_vec(),
                f: fx,
                grad_norm: g_norm,
                iters,
                converged: g_norm < opts.grad_tol * 100.0,
            });
        }

        let g_new = DVector::from_vec(grad(x_new.as_slice())?);
        let s = &x_new - &x;
        let yv = &g_new - &g;
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            // Standard inverse BFGS update.
            let rho = 1.0 / sy;
            let hy = &h_inv * &yv;
            let yhy = yv.dot(&hy);
            let term = (&s * s.transpose()) * (rho * rho * yhy + rho);
            let cross = (&hy * s.transpose() + &s * hy.transpose()) * rho;
            h_inv = h_inv + term - cross;
        }

        let f_drop = (fx - f_new).abs();
        x = x_new;
        g = g_new;
        fx = f_new;
        if f_drop < opts.f_tol * (1.0 + fx.abs()) {
            let g_norm = g.amax();
            return Ok(BfgsResult {
                x: x.as_slice().to_vec(),
                f: fx,
                grad_norm: g_norm,
                iters,
                converged: true,
            });
        }
    }

    let g_norm = g.amax();
    if g_norm < opts.grad_tol * 1000.0 {
        return Ok(BfgsResult {
            x: x.as_slice().to_vec(),
            f: fx,
            grad_norm: g_norm,
            iters,
            converged: true,
        });
    }
    Err(CoreError::NoConvergence {
        context: context.to_string(),
        iters,
        grad_norm: g_norm,
    })
}

/// Central-difference gradient with per-coordinate steps scaled to the
/// coordinate magnitude.
pub fn central_gradient<F>(x: &[f64], step: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut g = vec![0.0; x.len()];
    let mut work = x.to_vec();
    for j in 0..x.len() {
        let h = step * (1.0 + x[j].abs());
        work[j] = x[j] + h;
        let up = f(&work)?;
        work[j] = x[j] - h;
        let dn = f(&work)?;
        work[j] = x[j];
        g[j] = (up - dn) / (2.0 * h);
    }
    Ok(g)
}

/// Symmetric central-difference Hessian.
pub fn central_hessian<F>(x: &[f64], step: f64, mut f: F) -> Result<DMatrix<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    let f0 = f(x)?;
    let steps: Vec<f64> = x.iter().map(|v| step * (1.0 + v.abs())).collect();
    let mut work = x.to_vec();

    for i in 0..n {
        work[i] = x[i] + steps[i];
        let up = f(&work)?;
        work[i] = x[i] - steps[i];
        let dn = f(&work)?;
        work[i] = x[i];
        h[(i, i)] = (up - 2.0 * f0 + dn) / (steps[i] * steps[i]);
    }
    for i in 0..n {
        for j in 0..i {
            work[i] = x[i] + steps[i];
            work[j] = x[j] + steps[j];
            let pp = f(&work)?;
            work[j] = x[j] - steps[j];
            let pm = f(&work)?;
            work[i] = x[i] - steps[i];
            let mm = f(&work)?;
            work[j] = x[j] + steps[j];
            let mp = f(&work)?;
            work[i] = x[i];
            work[j] = x[j];
            let v = (pp - pm - mp + mm) / (4.0 * steps[i] * steps[j]);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rosenbrock(x: &[f64]) -> Result<f64> {
        Ok((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2))
    }

    #[test]
    fn bfgs_solves_rosenbrock() {
        let res = minimize_bfgs(
            &[-1.2, 1.0],
            rosenbrock,
            |x| central_gradient(x, 1e-7, rosenbrock),
            &BfgsOptions {
                max_iters: 500,
                ..Default::default()
            },
            "rosenbrock",
        )
        .unwrap();
        assert!(res.converged);
        assert_relative_eq!(res.x[0], 1.0, epsilon = 1e-4);
        assert_relative_eq!(res.x[1], 1.0, epsilon = 1e-4);
    }

    #[test]
    fn bfgs_quadratic_exact() {
        let quad = |x: &[f64]| -> Result<f64> {
            Ok(2.0 * (x[0] - 3.0).powi(2) + 0.5 * (x[1] + 1.0).powi(2) + x[2] * x[2])
        };
        let res = minimize_bfgs(
            &[0.0, 0.0, 5.0],
            quad,
            |x| central_gradient(x, 1e-7, quad),
            &BfgsOptions::default(),
            "quadratic",
        )
        .unwrap();
        assert!(res.converged);
        assert_relative_eq!(res.x[0], 3.0, epsilon = 1e-5);
        assert_relative_eq!(res.x[1], -1.0, epsilon = 1e-5);
        assert_relative_eq!(res.x[2], 0.0, epsilon = 1e-5);
    }

    #[test]
    fn hessian_of_quadratic_is_constant_matrix() {
        let f = |x: &[f64]| -> Result<f64> {
            Ok(1.5 * x[0] * x[0] + 0.7 * x[0] * x[1] + 2.0 * x[1] * x[1])
        };
        let h = central_hessian(&[0.4, -0.3], 1e-4, f).unwrap();
        assert_relative_eq!(h[(0, 0)], 3.0, epsilon = 1e-5);
        assert_relative_eq!(h[(0, 1)], 0.7, epsilon = 1e-5);
        assert_relative_eq!(h[(1, 1)], 4.0, epsilon = 1e-5);
    }
}
