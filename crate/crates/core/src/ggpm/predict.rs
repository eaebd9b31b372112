//! Daily surfaces from a fitted per-year model.
//!
//! Prediction points are appended to the station set as never-observed state
//! entries, the Kalman filter runs over the augmented state, and a
//! Rauch-Tung-Striebel backward pass conditions every day on the whole
//! season. The predictive variance includes the nugget, so it describes a
//! new daily observation at the point rather than the latent field alone.

use nalgebra::{DMatrix, DVector};

use super::likelihood::run_filter;
use super::{jittered_cholesky, GgpmParams, YearObservations};
use crate::error::{CoreError, Result};
use crate::geometry::Point;

/// Smoothed daily predictions at a set of points.
#[derive(Debug, Clone)]
pub struct GgpmPrediction {
    /// `mean[day * n_points + p]`.
    pub mean: Vec<f64>,
    /// Predictive variance, same layout, nugget included.
    pub var: Vec<f64>,
    pub n_points: usize,
    pub n_days: usize,
}

/// Predict at `pred_sites` (with standardized covariate `pred_alt`) for
/// every day of the season covered by `data`.
pub fn predict_points(
    data: &YearObservations,
    pred_sites: &[Point],
    pred_alt: &[f64],
    params: &GgpmParams,
    nu: f64,
    max_state_dim: usize,
) -> Result<GgpmPrediction> {
    data.validate()?;
    params.validate()?;
    if pred_sites.len() != pred_alt.len() {
        return Err(CoreError::LengthMismatch {
            context: "prediction covariate".into(),
            got: pred_alt.len(),
            want: pred_sites.len(),
        });
    }
    if pred_sites.is_empty() {
        return Err(CoreError::EmptySelection {
            rule: "no prediction points".into(),
        });
    }
    if !(params.sigma2_process > 0.0) {
        return Err(CoreError::InvalidConfig(
            "prediction needs a positive process variance".into(),
        ));
    }
    let n = data.n_sites();
    let total = n + pred_sites.len();
    if total > max_state_dim {
        return Err(CoreError::SolveTooLarge {
            context: "augmented prediction state".into(),
            dim: total,
            cap: max_state_dim,
        });
    }

    let mut sites = data.sites.clone();
    sites.extend_from_slice(pred_sites);
    let mut alt = data.alt.clone();
    alt.extend_from_slice(pred_alt);
    let mut y = Vec::with_capacity(total * data.n_days);
    for day in 0..data.n_days {
        for i in 0..n {
            y.push(data.y[day * n + i]);
        }
        y.extend(std::iter::repeat(None).take(pred_sites.len()));
    }
    let augmented = YearObservations {
        sites,
        alt,
        n_days: data.n_days,
        y,
    };

    let (_, steps) = run_filter(&augmented, params, nu, true)?;
    let t = steps.len();

    // Backward smoothing with transition a * I.
    let mut m_s: Vec<DVector<f64>> = vec![DVector::zeros(0); t];
    let mut p_s_diag: Vec<DVector<f64>> = vec![DVector::zeros(0); t];
    let mut m_next = steps[t - 1].m_filt.clone();
    let mut p_next = steps[t - 1].p_filt.clone();
    m_s[t - 1] = m_next.clone();
    p_s_diag[t - 1] = p_next.diagonal();
    for day in (0..t - 1).rev() {
        let pred = &steps[day + 1];
        let chol = jittered_cholesky(pred.p_pred.clone(), "smoother predicted covariance")?;
        // G = a P_filt P_pred^-1; solve on the transpose to avoid inverting.
        let g = chol
            .solve(&(&steps[day].p_filt * params.a).transpose())
            .transpose();
        let m_cur = &steps[day].m_filt + &g * (&m_next - &pred.m_pred);
        let p_cur = &steps[day].p_filt + &g * (&p_next - &pred.p_pred) * g.transpose();
        let p_cur = symmetrize(p_cur);
        m_s[day] = m_cur.clone();
        p_s_diag[day] = p_cur.diagonal();
        m_next = m_cur;
        p_next = p_cur;
    }

    let g0 = n;
    let np = pred_sites.len();
    let mut mean = Vec::with_capacity(np * t);
    let mut var = Vec::with_capacity(np * t);
    for day in 0..t {
        for p in 0..np {
            let idx = g0 + p;
            mean.push(
                params.beta0 + params.beta_alt * augmented.alt[idx] + m_s[day][idx],
            );
            var.push(p_s_diag[day][idx].max(0.0) + params.sigma2_nugget);
        }
    }
    if mean.iter().chain(var.iter()).any(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite {
            context: "smoothed prediction".into(),
        });
    }
    Ok(GgpmPrediction {
        mean,
        var,
        n_points: np,
        n_days: t,
    })
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let mt = m.transpose();
    (m + mt) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ggpm::likelihood::kalman_loglik;
    use crate::ggpm::simulate;
    use crate::rng::substream;
    use approx::assert_relative_eq;

    fn setup() -> (YearObservations, GgpmParams) {
        let sites: Vec<Point> = (0..9)
            .map(|i| Point {
                x: (i % 3) as f64 * 20.0,
                y: (i / 3) as f64 * 20.0,
            })
            .collect();
        let alt = vec![0.0; 9];
        let params = GgpmParams {
            beta0: 30.0,
            beta_alt: 0.0,
            a: 0.6,
            sigma2_process: 2.0,
            scale: 0.03,
            sigma2_nugget: 0.01,
        };
        let mut rng = substream(5, "ggpm-pred");
        let data = simulate(&sites, &alt, 30, &params, 1.0, &mut rng).unwrap();
        (data, params)
    }

    #[test]
    fn augmentation_leaves_likelihood_unchanged() {
        let (data, params) = setup();
        let base = kalman_loglik(&data, &params, 1.0).unwrap();
        // Filtering with extra unobserved state must marginalise away.
        let mut sites = data.sites.clone();
        sites.push(Point { x: 7.0, y: 13.0 });
        sites.push(Point { x: 33.0, y: 29.0 });
        let mut y = Vec::new();
        for day in 0..data.n_days {
            for i in 0..9 {
                y.push(data.y[day * 9 + i]);
            }
            y.push(None);
            y.push(None);
        }
        let aug = YearObservations {
            sites,
            alt: vec![0.0; 11],
            n_days: data.n_days,
            y,
        };
        let ll = kalman_loglik(&aug, &params, 1.0).unwrap();
        assert_relative_eq!(ll, base, max_relative = 1e-9);
    }

    #[test]
    fn predicting_at_a_station_tracks_its_data() {
        let (data, params) = setup();
        // Predict exactly at station 4 (center). With a tiny nugget the
        // smoothed mean there should sit close to the recorded values.
        let pred = predict_points(
            &data,
            &[data.sites[4]],
            &[data.alt[4]],
            &params,
            1.0,
            50,
        )
        .unwrap();
        assert_eq!(pred.n_points, 1);
        assert_eq!(pred.n_days, 30);
        let mut worst: f64 = 0.0;
        for day in 0..30 {
            let y = data.y[day * 9 + 4].unwrap();
            worst = worst.max((pred.mean[day] - y).abs());
        }
        assert!(worst < 0.5, "worst gap {worst}");
    }

    #[test]
    fn variance_grows_with_distance_from_network() {
        let (data, params) = setup();
        let pred = predict_points(
            &data,
            &[
                Point { x: 20.0, y: 21.0 },
                Point { x: 400.0, y: 400.0 },
            ],
            &[0.0, 0.0],
            &params,
            1.0,
            50,
        )
        .unwrap();
        let day = 15;
        let near = pred.var[day * 2];
        let far = pred.var[day * 2 + 1];
        assert!(far > near * 2.0, "near {near} far {far}");
        // The remote point should revert toward the stationary variance plus
        // nugget.
        let cap = params.stationary_var() + params.sigma2_nugget;
        assert!(far <= cap * 1.05);
        assert!(far > cap * 0.8);
    }

    #[test]
    fn deterministic_across_calls() {
        let (data, params) = setup();
        let pts = [Point { x: 11.0, y: 17.0 }];
        let a = predict_points(&data, &pts, &[0.0], &params, 1.0, 50).unwrap();
        let b = predict_points(&data, &pts, &[0.0], &params, 1.0, 50).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.var, b.var);
    }

    #[test]
    fn state_cap_enforced() {
        let (data, params) = setup();
        let err = predict_points(
            &data,
            &[Point { x: 1.0, y: 1.0 }, Point { x: 2.0, y: 2.0 }],
            &[0.0, 0.0],
            &params,
            1.0,
            10,
        );
        assert!(matches!(err, Err(CoreError::SolveTooLarge { .. })));
    }
}
