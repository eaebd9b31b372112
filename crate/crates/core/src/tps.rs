//! Penalized thin plate spline interpolation on the plane.
//!
//! Minimizes `sum (z_i - f(s_i))^2 + lambda * J(f)` where `J` is the bending
//! energy. The solution is `f(s) = a0 + a1 x + a2 y + sum_i c_i E(|s - s_i|)`
//! with `E(r) = r^2 log(r) / (8 pi)` and side conditions `sum c_i = sum c_i
//! x_i = sum c_i y_i = 0`, obtained from the bordered linear system
//!
//! ```text
//! [ E + lambda I   P ] [c]   [z]
//! [ P^T            0 ] [a] = [0]
//! ```
//!
//! Coordinates are standardized to unit region diameter before solving, so a
//! given `lambda` means the same amount of smoothing regardless of the
//! physical extent of the domain. `lambda = 0` interpolates exactly;
//! `lambda -> inf` recovers the least-squares plane.

use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};
use crate::geometry::Point;

/// Default smoothing; close to interpolation at regional scales.
pub const DEFAULT_LAMBDA: f64 = 0.001;

fn kernel(r: f64) -> f64 {
    if r <= 0.0 {
        0.0
    } else {
        r * r * r.ln() / (8.0 * std::f64::consts::PI)
    }
}

/// Fitted spline; prediction re-applies the stored standardization.
#[derive(Debug, Clone)]
pub struct TpsModel {
    knots: Vec<Point>,
    center: Point,
    scale: f64,
    coef_radial: Vec<f64>,
    coef_affine: [f64; 3],
}

impl TpsModel {
    pub fn fit(knots: &[Point], z: &[f64], lambda: f64) -> Result<Self> {
        let n = knots.len();
        if z.len() != n {
            return Err(CoreError::LengthMismatch {
                context: "tps".into(),
                got: z.len(),
                want: n,
            });
        }
        if n < 3 {
            return Err(CoreError::InvalidConfig(
                "thin plate spline needs at least 3 knots".into(),
            ));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(CoreError::InvalidConfig("lambda must be >= 0".into()));
        }

        // Standardize to unit diameter (bounding-box diagonal).
        let mut lo = Point::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in knots {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        }
        let center = Point::new(0.5 * (lo.x + hi.x), 0.5 * (lo.y + hi.y));
        let diag = lo.dist(&hi);
        let scale = if diag > 0.0 { diag } else { 1.0 };
        let std_pts: Vec<Point> = knots
            .iter()
            .map(|p| Point::new((p.x - center.x) / scale, (p.y - center.y) / scale))
            .collect();

        for i in 0..n {
            for j in (i + 1)..n {
                if std_pts[i].dist(&std_pts[j]) < 1e-12 {
                    return Err(CoreError::Geometry(format!(
                        "duplicate knots at index {i} and {j}"
                    )));
                }
            }
        }
        // Collinear knots leave the affine part unidentified.
        let mut sxx = 0.0;
        let mut sxy = 0.0;
        let mut syy = 0.0;
        let (mx, my) = std_pts
            .iter()
            .fold((0.0, 0.0), |(ax, ay), p| (ax + p.x, ay + p.y));
        let (mx, my) = (mx / n as f64, my / n as f64);
        for p in &std_pts {
            sxx += (p.x - mx) * (p.x - mx);
            sxy += (p.x - mx) * (p.y - my);
            syy += (p.y - my) * (p.y - my);
        }
        if (sxx * syy - sxy * sxy).abs() < 1e-14 {
            return Err(CoreError::Geometry("collinear knots".into()));
        }

        let dim = n + 3;
        let mut a = DMatrix::zeros(dim, dim);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] = kernel(std_pts[i].dist(&std_pts[j]));
            }
            a[(i, i)] += lambda;
            a[(i, n)] = 1.0;
            a[(i, n + 1)] = std_pts[i].x;
            a[(i, n + 2)] = std_pts[i].y;
            a[(n, i)] = 1.0;
            a[(n + 1, i)] = std_pts[i].x;
            a[(n + 2, i)] = std_pts[i].y;
        }
        let mut rhs = DVector::zeros(dim);
        for i in 0..n {
            rhs[i] = z[i];
        }
        let sol = a
            .full_piv_lu()
            .solve(&rhs)
            .ok_or_else(|| CoreError::NotPositiveDefinite {
                context: "tps system".into(),
            })?;
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite { context: "tps solve".into() });
        }
        Ok(TpsModel {
            knots: knots.to_vec(),
            center,
            scale,
            coef_radial: sol.as_slice()[..n].to_vec(),
            coef_affine: [sol[n], sol[n + 1], sol[n + 2]],
        })
    }

    pub fn predict(&self, p: &Point) -> f64 {
        let q = Point::new(
            (p.x - self.center.x) / self.scale,
            (p.y - self.center.y) / self.scale,
        );
        let mut f = self.coef_affine[0] + self.coef_affine[1] * q.x + self.coef_affine[2] * q.y;
        for (k, c) in self.knots.iter().zip(&self.coef_radial) {
            let kq = Point::new(
                (k.x - self.center.x) / self.scale,
                (k.y - self.center.y) / self.scale,
            );
            f += c * kernel(q.dist(&kq));
        }
        f
    }

    pub fn predict_many(&self, pts: &[Point]) -> Vec<f64> {
        pts.iter().map(|p| self.predict(p)).collect()
    }

    /// Side-condition residuals `(sum c, sum c x, sum c y)` on the
    /// standardized coordinates; all three should be ~0.
    pub fn side_conditions(&self) -> (f64, f64, f64) {
        let mut s = (0.0, 0.0, 0.0);
        for (k, c) in self.knots.iter().zip(&self.coef_radial) {
            let x = (k.x - self.center.x) / self.scale;
            let y = (k.y - self.center.y) / self.scale;
            s.0 += c;
            s.1 += c * x;
            s.2 += c * y;
        }
        s
    }
}
