//! Natural cubic smoothing splines with generalized cross-validation.
//!
//! Classical formulation: fitted values solve `(I + lambda*K) g = y` with
//! `K = Q R^-1 Q^T` built from the knot spacings; second derivatives at the
//! knots follow as `R^-1 Q^T g` and define a natural cubic interpolant that
//! is linear beyond the boundary knots. `lambda = 0` is exact interpolation,
//! `lambda -> inf` the least-squares line.

use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};

/// Fitted spline: knot locations, fitted values, and second derivatives.
#[derive(Debug, Clone)]
pub struct SmoothingSpline {
    x: Vec<f64>,
    g: Vec<f64>,
    m: Vec<f64>,
}

fn check_sorted_strict(x: &[f64]) -> Result<()> {
    if x.len() < 2 {
        return Err(CoreError::InvalidConfig(
            "spline needs at least two knots".into(),
        ));
    }
    for w in x.windows(2) {
        if !(w[1] > w[0]) {
            return Err(CoreError::InvalidConfig(
                "spline knots must be strictly increasing".into(),
            ));
        }
    }
    Ok(())
}

/// Penalty factorization pieces shared by the solvers.
fn build_qr(x: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = x.len();
    let k = n - 2;
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let mut q = DMatrix::zeros(n, k);
    let mut r = DMatrix::zeros(k, k);
    for c in 0..k {
        let i = c + 1;
        q[(i - 1, c)] = 1.0 / h[i - 1];
        q[(i, c)] = -1.0 / h[i - 1] - 1.0 / h[i];
        q[(i + 1, c)] = 1.0 / h[i];
        r[(c, c)] = (h[i - 1] + h[i]) / 3.0;
        if c + 1 < k {
            r[(c, c + 1)] = h[i] / 6.0;
            r[(c + 1, c)] = h[i] / 6.0;
        }
    }
    (q, r)
}

impl SmoothingSpline {
    /// Fit with a fixed smoothing parameter; `lambda = 0` interpolates.
    pub fn fit(x: &[f64], y: &[f64], lambda: f64) -> Result<Self> {
        let (sp, _) = Self::fit_traced(x, y, lambda)?;
        Ok(sp)
    }

    /// Fit and additionally return the effective degrees of freedom
    /// `tr (I + lambda*K)^-1`, needed by GCV.
    fn fit_traced(x: &[f64], y: &[f64], lambda: f64) -> Result<(Self, f64)> {
        check_sorted_strict(x)?;
        if y.len() != x.len() {
            return Err(CoreError::LengthMismatch {
                context: "spline".into(),
                got: y.len(),
                want: x.len(),
            });
        }
        if !(lambda >= 0.0) {
            return Err(CoreError::InvalidConfig("negative lambda".into()));
        }
        let n = x.len();
        if n == 2 || lambda == 0.0 {
            let sp = Self::interpolate(x, y)?;
            return Ok((sp, n as f64));
        }

        let (q, r) = build_qr(x);
        let r_chol = r
            .clone()
            .cholesky()
            .ok_or_else(|| CoreError::NotPositiveDefinite {
                context: "spline penalty".into(),
            })?;
        // K = Q R^-1 Q^T, dense; n is a season length so this stays small.
        let k_mat = &q * r_chol.solve(&q.transpose());
        let a = DMatrix::identity(n, n) + k_mat * lambda;
        let a_inv = a.try_inverse().ok_or_else(|| CoreError::NotPositiveDefinite {
            context: "spline system".into(),
        })?;
        let yv = DVector::from_column_slice(y);
        let g = &a_inv * &yv;
        let gamma = r_chol.solve(&(q.transpose() * &g));
        let mut m = vec![0.0; n];
        m[1..n - 1].copy_from_slice(gamma.as_slice());
        let sp = SmoothingSpline {
            x: x.to_vec(),
            g: g.as_slice().to_vec(),
            m,
        };
        Ok((sp, a_inv.trace()))
    }

    /// Exact natural cubic interpolation (tridiagonal solve for the second
    /// derivatives).
    pub fn interpolate(x: &[f64], y: &[f64]) -> Result<Self> {
        check_sorted_strict(x)?;
        if y.len() != x.len() {
            return Err(CoreError::LengthMismatch {
                context: "spline".into(),
                got: y.len(),
                want: x.len(),
            });
        }
        let n = x.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
            let k = n - 2;
            // Thomas algorithm on the tridiagonal system R gamma = Q^T y.
            let mut diag: Vec<f64> = (0..k).map(|c| (h[c] + h[c + 1]) / 3.0).collect();
            let mut rhs: Vec<f64> = (0..k)
                .map(|c| (y[c + 2] - y[c + 1]) / h[c + 1] - (y[c + 1] - y[c]) / h[c])
                .collect();
            let off: Vec<f64> = (0..k.saturating_sub(1)).map(|c| h[c + 1] / 6.0).collect();
            for i in 1..k {
                let w = off[i - 1] / diag[i - 1];
                diag[i] -= w * off[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            if k > 0 {
                m[k] = rhs[k - 1] / diag[k - 1];
                for i in (0..k - 1).rev() {
                    m[i + 1] = (rhs[i] - off[i] * m[i + 2]) / diag[i];
                }
            }
        }
        Ok(SmoothingSpline {
            x: x.to_vec(),
            g: y.to_vec(),
            m,
        })
    }

    /// Fit choosing lambda by generalized cross-validation over a log grid.
    pub fn fit_gcv(x: &[f64], y: &[f64]) -> Result<(Self, f64)> {
        check_sorted_strict(x)?;
        let n = x.len() as f64;
        let mut best: Option<(f64, f64)> = None;
        for i in 0..31 {
            let lambda = 10f64.powf(-4.0 + i as f64 * (10.0 / 30.0));
            let (sp, tr) = Self::fit_traced(x, y, lambda)?;
            let rss: f64 = sp
                .g
                .iter()
                .zip(y)
                .map(|(g, y)| (y - g) * (y - g))
                .sum();
            let denom = n - tr;
            // tr A <= n always; equality only at interpolation, excluded by
            // the grid's positive lower bound.
            let gcv = if denom > 1e-9 {
                n * rss / (denom * denom)
            } else {
                f64::INFINITY
            };
            if best.map_or(true, |(g, _)| gcv < g) {
                best = Some((gcv, lambda));
            }
        }
        let (_, lambda) = best.expect("non-empty grid");
        Ok((Self::fit(x, y, lambda)?, lambda))
    }

    /// Evaluate the natural cubic; linear continuation outside the knots.
    pub fn eval(&self, xq: f64) -> f64 {
        let n = self.x.len();
        let (x, g, m) = (&self.x, &self.g, &self.m);
        if xq <= x[0] {
            let h = x[1] - x[0];
            let slope = (g[1] - g[0]) / h - m[1] * h / 6.0;
            return g[0] + slope * (xq - x[0]);
        }
        if xq >= x[n - 1] {
            let h = x[n - 1] - x[n - 2];
            let slope = (g[n - 1] - g[n - 2]) / h + m[n - 2] * h / 6.0;
            return g[n - 1] + slope * (xq - x[n - 1]);
        }
        let i = match x.binary_search_by(|v| v.partial_cmp(&xq).unwrap()) {
            Ok(i) => return g[i],
            Err(i) => i - 1,
        };
        let h = x[i + 1] - x[i];
        let a = x[i + 1] - xq;
        let b = xq - x[i];
        m[i] * a * a * a / (6.0 * h)
            + m[i + 1] * b * b * b / (6.0 * h)
            + (g[i] / h - m[i] * h / 6.0) * a
            + (g[i + 1] / h - m[i + 1] * h / 6.0) * b
    }

    pub fn fitted(&self) -> &[f64] {
        &self.g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn linear_data_is_reproduced_for_any_lambda() {
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 - 0.5 * v).collect();
        for lambda in [0.0, 0.01, 10.0, 1e6] {
            let sp = SmoothingSpline::fit(&x, &y, lambda).unwrap();
            for (xi, yi) in x.iter().zip(&y) {
                assert_relative_eq!(sp.eval(*xi), *yi, epsilon = 1e-8);
            }
            assert_relative_eq!(sp.eval(5.5), 3.0 - 0.5 * 5.5, epsilon = 1e-8);
        }
    }

    #[test]
    fn interpolation_hits_the_data() {
        let x = [0.0, 1.0, 2.5, 4.0, 5.0];
        let y = [1.0, -1.0, 0.5, 2.0, 1.5];
        let sp = SmoothingSpline::interpolate(&x, &y).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert_relative_eq!(sp.eval(*xi), *yi, epsilon = 1e-12);
        }
    }

    #[test]
    fn gcv_smooths_noise_toward_the_signal() {
        use rand::Rng;
        let mut rng = crate::rng::substream(11, "spline-test");
        let x: Vec<f64> = (0..80).map(|i| i as f64).collect();
        let truth: Vec<f64> = x.iter().map(|v| (v / 12.0).sin() * 5.0 + 20.0).collect();
        let y: Vec<f64> = truth
            .iter()
            .map(|t| t + rng.gen_range(-0.8..0.8))
            .collect();
        let (sp, lambda) = SmoothingSpline::fit_gcv(&x, &y).unwrap();
        assert!(lambda > 0.0);
        let mse: f64 = x
            .iter()
            .zip(&truth)
            .map(|(xi, t)| (sp.eval(*xi) - t) * (sp.eval(*xi) - t))
            .sum::<f64>()
            / x.len() as f64;
        let raw_mse: f64 = y
            .iter()
            .zip(&truth)
            .map(|(y, t)| (y - t) * (y - t))
            .sum::<f64>()
            / x.len() as f64;
        assert!(mse < raw_mse, "smoothing should beat raw noise: {mse} vs {raw_mse}");
    }

    #[test]
    fn extrapolation_is_linear() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [0.0, 1.0, 0.0, 1.0];
        let sp = SmoothingSpline::interpolate(&x, &y).unwrap();
        let s_left = (sp.eval(-1.0) - sp.eval(0.0)) / -1.0;
        let s_far = (sp.eval(-3.0) - sp.eval(0.0)) / -3.0;
        assert_relative_eq!(s_left, s_far, epsilon = 1e-10);
    }
}
