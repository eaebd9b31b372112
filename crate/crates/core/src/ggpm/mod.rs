//! Per-year Gaussian process model for daily maximum temperature.
//!
//! Within one season the field is an AR(1)-in-time, Matérn-in-space process
//! observed with a nugget:
//!
//! ```text
//! y(s, day) = b0 + b1 x(s) + xi_day(s) + eps,   eps ~ N(0, sigma_eps^2)
//! xi_day    = a xi_{day-1} + omega_day,         Cov(omega) = sigma_om^2 C
//! C_ij      = matern(nu, k, dist(s_i, s_j))
//! ```
//!
//! started from the stationary distribution `xi_1 ~ N(0, sigma_om^2 / (1 -
//! a^2) C)`. Years are treated as independent replicates and fitted one at a
//! time. Fitting maximises the posterior via the Kalman-filter form of the
//! marginal likelihood ([`likelihood`]), uncertainty comes from a Laplace
//! approximation ([`fit`]), and surfaces are produced by smoothing over an
//! augmented station-plus-grid state ([`predict`]).

pub mod fit;
pub mod likelihood;
pub mod matern;
pub mod predict;

use nalgebra::{Cholesky, DMatrix};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::Point;

/// Model constants that are fixed before fitting.
#[derive(Debug, Clone)]
pub struct GgpmConfig {
    /// Matérn smoothness; integer or half-integer.
    pub nu: f64,
    /// Largest spatial state dimension (stations plus grid points) a single
    /// solve may use.
    pub max_state_dim: usize,
    /// Prior standard deviation for the two regression coefficients.
    pub beta_sd: f64,
    /// Exponential prior rate on the process standard deviation.
    pub sd_process_rate: f64,
    /// Exponential prior rate on the nugget standard deviation.
    pub sd_nugget_rate: f64,
    /// Prior standard deviation of `artanh(a)` around zero.
    pub za_sd: f64,
    /// Prior standard deviation of `log k` around the heuristic centre
    /// `sqrt(8 nu) / median distance`.
    pub log_scale_sd: f64,
}

impl Default for GgpmConfig {
    fn default() -> Self {
        Self {
            nu: 1.0,
            max_state_dim: 220,
            beta_sd: 100.0,
            sd_process_rate: 0.2,
            sd_nugget_rate: 0.5,
            za_sd: 1.0,
            log_scale_sd: 1.5,
        }
    }
}

/// Natural-scale parameters of the per-year model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GgpmParams {
    /// Intercept.
    pub beta0: f64,
    /// Coefficient on the standardized covariate.
    pub beta_alt: f64,
    /// Day-to-day autoregression, in (-1, 1).
    pub a: f64,
    /// Innovation variance of the spatial process.
    pub sigma2_process: f64,
    /// Matérn inverse range.
    pub scale: f64,
    /// Nugget variance.
    pub sigma2_nugget: f64,
}

impl GgpmParams {
    pub fn validate(&self) -> Result<()> {
        if !self.a.is_finite() || self.a.abs() >= 1.0 {
            return Err(CoreError::InvalidConfig(format!(
                "autoregression must lie in (-1, 1), got {}",
                self.a
            )));
        }
        for (name, v) in [
            ("sigma2_process", self.sigma2_process),
            ("sigma2_nugget", self.sigma2_nugget),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(CoreError::InvalidConfig(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !(self.scale > 0.0) {
            return Err(CoreError::InvalidConfig(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        if !self.beta0.is_finite() || !self.beta_alt.is_finite() {
            return Err(CoreError::NonFinite {
                context: "regression coefficients".into(),
            });
        }
        Ok(())
    }

    /// Stationary marginal variance of the spatial process.
    pub fn stationary_var(&self) -> f64 {
        self.sigma2_process / (1.0 - self.a * self.a)
    }
}

/// One season of observations at fixed sites, day-major with gaps.
#[derive(Debug, Clone)]
pub struct YearObservations {
    /// Site coordinates in projected km.
    pub sites: Vec<Point>,
    /// Standardized covariate per site.
    pub alt: Vec<f64>,
    /// Number of days in the season.
    pub n_days: usize,
    /// `y[day * sites.len() + site]`; `None` marks a gap.
    pub y: Vec<Option<f64>>,
}

impl YearObservations {
    pub fn validate(&self) -> Result<()> {
        let n = self.sites.len();
        if self.alt.len() != n {
            return Err(CoreError::LengthMismatch {
                context: "covariate per site".into(),
                got: self.alt.len(),
                want: n,
            });
        }
        if self.y.len() != n * self.n_days {
            return Err(CoreError::LengthMismatch {
                context: "day-major observation vector".into(),
                got: self.y.len(),
                want: n * self.n_days,
            });
        }
        if self.y.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite {
                context: "observations".into(),
            });
        }
        if self.y.iter().all(|v| v.is_none()) {
            return Err(CoreError::EmptySelection {
                rule: "no observed values in season".into(),
            });
        }
        Ok(())
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn n_observed(&self) -> usize {
        self.y.iter().flatten().count()
    }

    /// Indices of sites observed on `day`.
    pub fn observed_on(&self, day: usize) -> Vec<usize> {
        let n = self.sites.len();
        (0..n)
            .filter(|&i| self.y[day * n + i].is_some())
            .collect()
    }
}

/// Matérn correlation matrix over a point set; unit diagonal.
pub fn spatial_corr(points: &[Point], nu: f64, scale: f64) -> Result<DMatrix<f64>> {
    let n = points.len();
    let mut c = DMatrix::zeros(n, n);
    for i in 0..n {
        c[(i, i)] = 1.0;
        for j in 0..i {
            let v = matern::matern(nu, scale, points[i].dist(&points[j]))?;
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    Ok(c)
}

/// Cholesky with a small escalating diagonal jitter; errors only when even a
/// generous jitter fails.
pub(crate) fn jittered_cholesky(
    mut m: DMatrix<f64>,
    context: &str,
) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    let base = m.diagonal().amax();
    for attempt in 0..6 {
        if let Some(ch) = Cholesky::new(m.clone()) {
            return Ok(ch);
        }
        let jitter = base * 1e-10 * 10f64.powi(attempt);
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
    }
    Err(CoreError::NotPositiveDefinite {
        context: context.to_string(),
    })
}

/// Draw one season of synthetic data from the model. Every site is observed
/// on every day; callers knock out values afterwards if they want gaps.
pub fn simulate<R: Rng>(
    sites: &[Point],
    alt: &[f64],
    n_days: usize,
    params: &GgpmParams,
    nu: f64,
    rng: &mut R,
) -> Result<YearObservations> {
    params.validate()?;
    let n = sites.len();
    if alt.len() != n {
        return Err(CoreError::LengthMismatch {
            context: "covariate per site".into(),
            got: alt.len(),
            want: n,
        });
    }
    if n == 0 || n_days == 0 {
        return Err(CoreError::EmptySelection {
            rule: "simulate needs at least one site and one day".into(),
        });
    }

    let chol = if params.sigma2_process > 0.0 {
        Some(jittered_cholesky(
            spatial_corr(sites, nu, params.scale)?,
            "simulated spatial correlation",
        )?)
    } else {
        None
    };

    let draw_field = |sd: f64, rng: &mut R| -> Vec<f64> {
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        match &chol {
            Some(ch) => {
                let v = ch.l() * DMatrix::from_column_slice(n, 1, &z);
                v.column(0).iter().map(|&u| sd * u).collect()
            }
            None => vec![0.0; n],
        }
    };

    let mut xi = draw_field(params.stationary_var().sqrt(), rng);
    let sd_innov = params.sigma2_process.sqrt();
    let sd_nug = params.sigma2_nugget.sqrt();
    let mut y = Vec::with_capacity(n * n_days);
    for day in 0..n_days {
        if day > 0 {
            let innov = draw_field(sd_innov, rng);
            for i in 0..n {
                xi[i] = params.a * xi[i] + innov[i];
            }
        }
        for i in 0..n {
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * sd_nug;
            y.push(Some(
                params.beta0 + params.beta_alt * alt[i] + xi[i] + noise,
            ));
        }
    }

    Ok(YearObservations {
        sites: sites.to_vec(),
        alt: alt.to_vec(),
        n_days,
        y,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn toy_sites(n: usize) -> (Vec<Point>, Vec<f64>) {
        let pts: Vec<Point> = (0..n)
            .map(|i| Point {
                x: (i % 4) as f64 * 12.0,
                y: (i / 4) as f64 * 15.0,
            })
            .collect();
        let alt: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) / 3.0).collect();
        (pts, alt)
    }

    #[test]
    fn simulate_shapes_and_determinism() {
        let (sites, alt) = toy_sites(8);
        let params = GgpmParams {
            beta0: 30.0,
            beta_alt: -0.8,
            a: 0.6,
            sigma2_process: 2.0,
            scale: 0.05,
            sigma2_nugget: 0.5,
        };
        let mut r1 = substream(7, "ggpm-sim");
        let mut r2 = substream(7, "ggpm-sim");
        let a = simulate(&sites, &alt, 20, &params, 1.0, &mut r1).unwrap();
        let b = simulate(&sites, &alt, 20, &params, 1.0, &mut r2).unwrap();
        assert_eq!(a.y.len(), 8 * 20);
        assert_eq!(a.n_observed(), 160);
        let av: Vec<f64> = a.y.iter().map(|v| v.unwrap()).collect();
        let bv: Vec<f64> = b.y.iter().map(|v| v.unwrap()).collect();
        assert_eq!(av, bv);
        a.validate().unwrap();
    }

    #[test]
    fn zero_process_variance_reduces_to_regression_noise() {
        let (sites, alt) = toy_sites(6);
        let params = GgpmParams {
            beta0: 25.0,
            beta_alt: 0.0,
            a: 0.0,
            sigma2_process: 0.0,
            scale: 0.1,
            sigma2_nugget: 0.0,
        };
        let mut rng = substream(3, "ggpm-sim-flat");
        let sim = simulate(&sites, &alt, 5, &params, 1.0, &mut rng).unwrap();
        for v in sim.y.iter().flatten() {
            assert!((v - 25.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let p = GgpmParams {
            beta0: 0.0,
            beta_alt: 0.0,
            a: 1.0,
            sigma2_process: 1.0,
            scale: 0.1,
            sigma2_nugget: 0.1,
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn corr_matrix_unit_diagonal_and_symmetric() {
        let (sites, _) = toy_sites(7);
        let c = spatial_corr(&sites, 1.0, 0.08).unwrap();
        for i in 0..7 {
            assert_eq!(c[(i, i)], 1.0);
            for j in 0..7 {
                assert_eq!(c[(i, j)], c[(j, i)]);
                assert!(c[(i, j)] > 0.0 && c[(i, j)] <= 1.0);
            }
        }
    }
}
