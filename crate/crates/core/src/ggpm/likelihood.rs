//! Marginal likelihood of the per-year model, in two equivalent forms.
//!
//! The Kalman-filter form runs in `O(days * sites^3)` and is what fitting
//! uses; gaps simply shrink a day's update. The dense form materialises the
//! covariance of every observed entry and also returns the analytic gradient
//! in the transformed coordinates used by the optimizer, which the test
//! suite checks against finite differences. Both forms must agree to
//! rounding error, and a test pins that.

use nalgebra::{Cholesky, DMatrix, DVector};

use super::matern::matern_dk;
use super::{spatial_corr, GgpmParams, YearObservations};
use crate::error::{CoreError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Transformed coordinates: `[beta0, beta_alt, artanh(a), log sd_process,
/// log scale, log sd_nugget]`.
pub const N_PARAMS: usize = 6;

pub fn to_transformed(p: &GgpmParams) -> [f64; N_PARAMS] {
    [
        p.beta0,
        p.beta_alt,
        p.a.atanh(),
        0.5 * p.sigma2_process.ln(),
        p.scale.ln(),
        0.5 * p.sigma2_nugget.ln(),
    ]
}

pub fn from_transformed(t: &[f64]) -> GgpmParams {
    GgpmParams {
        beta0: t[0],
        beta_alt: t[1],
        a: t[2].tanh(),
        sigma2_process: (2.0 * t[3]).exp(),
        scale: t[4].exp(),
        sigma2_nugget: (2.0 * t[5]).exp(),
    }
}

pub(crate) struct FilterStep {
    pub m_pred: DVector<f64>,
    pub p_pred: DMatrix<f64>,
    pub m_filt: DVector<f64>,
    pub p_filt: DMatrix<f64>,
}

/// Kalman forward pass. Returns the log marginal likelihood of all observed
/// entries and, when `record` is set, the per-day predicted and filtered
/// state moments needed by the smoother.
pub(crate) fn run_filter(
    data: &YearObservations,
    params: &GgpmParams,
    nu: f64,
    record: bool,
) -> Result<(f64, Vec<FilterStep>)> {
    data.validate()?;
    params.validate()?;
    let n = data.n_sites();

    let corr = spatial_corr(&data.sites, nu, params.scale)?;
    let q = &corr * params.sigma2_process;
    let p0 = &corr * params.stationary_var();

    let mut m = DVector::zeros(n);
    let mut p = p0;
    let mut loglik = 0.0;
    let mut steps = Vec::new();

    for day in 0..data.n_days {
        if day > 0 {
            m *= params.a;
            p = &p * (params.a * params.a) + &q;
        }
        let m_pred = if record { Some(m.clone()) } else { None };
        let p_pred = if record { Some(p.clone()) } else { None };

        let obs = data.observed_on(day);
        if !obs.is_empty() {
            let n_o = obs.len();
            let mut e = DVector::zeros(n_o);
            for (r, &i) in obs.iter().enumerate() {
                let y = data.y[day * n + i].unwrap();
                e[r] = y - (params.beta0 + params.beta_alt * data.alt[i]) - m[i];
            }
            let mut s = DMatrix::zeros(n_o, n_o);
            for (r, &i) in obs.iter().enumerate() {
                for (c, &j) in obs.iter().enumerate() {
                    s[(r, c)] = p[(i, j)];
                }
                s[(r, r)] += params.sigma2_nugget;
            }
            let chol = Cholesky::new(s).ok_or_else(|| CoreError::NotPositiveDefinite {
                context: "innovation covariance".into(),
            })?;
            let mut logdet = 0.0;
            for r in 0..n_o {
                logdet += chol.l()[(r, r)].ln();
            }
            let sol = chol.solve(&e);
            loglik -= 0.5 * (n_o as f64 * LN_2PI) + logdet + 0.5 * e.dot(&sol);

            // K = P[:, obs] S^-1, applied without forming H.
            let mut p_cols = DMatrix::zeros(n, n_o);
            for (c, &j) in obs.iter().enumerate() {
                p_cols.set_column(c, &p.column(j));
            }
            let k = chol.solve(&p_cols.transpose()).transpose();
            m += &k * &e;
            let reduction = &k * p_cols.transpose();
            p -= reduction;
            // Enforce symmetry lost to rounding.
            let pt = p.transpose();
            p = (&p + pt) * 0.5;
        }

        if record {
            steps.push(FilterStep {
                m_pred: m_pred.unwrap(),
                p_pred: p_pred.unwrap(),
                m_filt: m.clone(),
                p_filt: p.clone(),
            });
        }
    }

    if !loglik.is_finite() {
        return Err(CoreError::NonFinite {
            context: "kalman log likelihood".into(),
        });
    }
    Ok((loglik, steps))
}

/// Log marginal likelihood via the Kalman filter.
pub fn kalman_loglik(data: &YearObservations, params: &GgpmParams, nu: f64) -> Result<f64> {
    run_filter(data, params, nu, false).map(|(ll, _)| ll)
}

/// Largest observed-entry count the dense form will materialise.
pub const MAX_DENSE_OBS: usize = 4000;

/// Log marginal likelihood over all observed entries, with its gradient in
/// the transformed coordinates. `O(n_obs^2)` memory; used for gradient
/// verification and as a cross-check of the filter, not for fitting.
pub fn dense_loglik_grad(
    data: &YearObservations,
    params: &GgpmParams,
    nu: f64,
) -> Result<(f64, [f64; N_PARAMS])> {
    data.validate()?;
    params.validate()?;
    let n = data.n_sites();
    let obs: Vec<(usize, usize)> = (0..data.n_days)
        .flat_map(|d| {
            (0..n)
                .filter(move |&i| data.y[d * n + i].is_some())
                .map(move |i| (d, i))
        })
        .collect();
    let m = obs.len();
    if m > MAX_DENSE_OBS {
        return Err(CoreError::SolveTooLarge {
            context: "dense likelihood".into(),
            dim: m,
            cap: MAX_DENSE_OBS,
        });
    }

    // Site-pair tables so the pair loop never re-evaluates Bessel functions.
    let corr = spatial_corr(&data.sites, nu, params.scale)?;
    let mut dcorr_dk = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let d = matern_dk(nu, params.scale, data.sites[i].dist(&data.sites[j]))?;
            dcorr_dk[(i, j)] = d;
            dcorr_dk[(j, i)] = d;
        }
    }

    let a = params.a;
    let v = params.stationary_var();
    let max_lag = data.n_days;
    let mut a_pow = vec![0.0; max_lag + 1];
    for (lag, slot) in a_pow.iter_mut().enumerate() {
        *slot = a.powi(lag as i32);
    }
    // d/dz [V a^lag] with z = artanh(a); lag 0 collapses to 2aV.
    let mut dz_fac = vec![0.0; max_lag + 1];
    for (lag, slot) in dz_fac.iter_mut().enumerate() {
        *slot = if lag == 0 {
            2.0 * a * v
        } else {
            v * (2.0 * a * a_pow[lag] + lag as f64 * a.powi(lag as i32 - 1) * (1.0 - a * a))
        };
    }

    let mut sigma = DMatrix::zeros(m, m);
    for p in 0..m {
        let (dp, sp) = obs[p];
        for q in 0..=p {
            let (dq, sq) = obs[q];
            let lag = dp.abs_diff(dq);
            let mut val = v * a_pow[lag] * corr[(sp, sq)];
            if p == q {
                val += params.sigma2_nugget;
            }
            sigma[(p, q)] = val;
            sigma[(q, p)] = val;
        }
    }

    let y = DVector::from_iterator(
        m,
        obs.iter().map(|&(d, i)| data.y[d * n + i].unwrap()),
    );
    let mu = DVector::from_iterator(
        m,
        obs.iter()
            .map(|&(_, i)| params.beta0 + params.beta_alt * data.alt[i]),
    );
    let resid = &y - &mu;

    let chol = Cholesky::new(sigma).ok_or_else(|| CoreError::NotPositiveDefinite {
        context: "dense observation covariance".into(),
    })?;
    let mut logdet = 0.0;
    for r in 0..m {
        logdet += chol.l()[(r, r)].ln();
    }
    let alpha = chol.solve(&resid);
    let loglik = -0.5 * m as f64 * LN_2PI - logdet - 0.5 * resid.dot(&alpha);

    let sigma_inv = chol.inverse();

    // Mean-parameter gradient: X^T alpha.
    let mut grad = [0.0; N_PARAMS];
    for p in 0..m {
        grad[0] += alpha[p];
        grad[1] += data.alt[obs[p].1] * alpha[p];
    }

    // Covariance parameters: 0.5 (alpha' M alpha - tr(Sigma^-1 M)) per
    // direction M, accumulated pairwise without materialising M.
    let k = params.scale;
    let s2n = params.sigma2_nugget;
    let mut g_z = 0.0;
    let mut g_w = 0.0; // log sd_process
    let mut g_k = 0.0; // log scale
    let mut g_e = 0.0; // log sd_nugget
    for p in 0..m {
        let (dp, sp) = obs[p];
        for q in 0..=p {
            let (dq, sq) = obs[q];
            let lag = dp.abs_diff(dq);
            let weight = if p == q { 1.0 } else { 2.0 };
            let factor = alpha[p] * alpha[q] - sigma_inv[(p, q)];
            let c_pq = corr[(sp, sq)];
            let process = v * a_pow[lag] * c_pq;

            g_z += weight * factor * dz_fac[lag] * c_pq;
            g_w += weight * factor * 2.0 * process;
            g_k += weight * factor * v * a_pow[lag] * dcorr_dk[(sp, sq)] * k;
            if p == q {
                g_e += factor * 2.0 * s2n;
            }
        }
    }
    grad[2] = 0.5 * g_z;
    grad[3] = 0.5 * g_w;
    grad[4] = 0.5 * g_k;
    grad[5] = 0.5 * g_e;

    if !loglik.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(CoreError::NonFinite {
            context: "dense log likelihood".into(),
        });
    }
    Ok((loglik, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;
    use crate::ggpm::simulate;
    use crate::rng::substream;
    use approx::assert_relative_eq;

    fn test_case(with_gaps: bool) -> (YearObservations, GgpmParams) {
        let sites: Vec<Point> = (0..6)
            .map(|i| Point {
                x: (i % 3) as f64 * 18.0,
                y: (i / 3) as f64 * 22.0,
            })
            .collect();
        let alt: Vec<f64> = vec![-1.2, -0.5, 0.1, 0.4, 0.9, 0.3];
        let params = GgpmParams {
            beta0: 28.0,
            beta_alt: -0.8,
            a: 0.55,
            sigma2_process: 1.8,
            scale: 0.04,
            sigma2_nugget: 0.4,
        };
        let mut rng = substream(11, "ggpm-lik-case");
        let mut data = simulate(&sites, &alt, 25, &params, 1.0, &mut rng).unwrap();
        if with_gaps {
            for d in 0..data.n_days {
                for i in 0..6 {
                    if (d * 6 + i) % 7 == 3 || d == 10 {
                        data.y[d * 6 + i] = None;
                    }
                }
            }
        }
        (data, params)
    }

    #[test]
    fn kalman_and_dense_forms_agree() {
        for gaps in [false, true] {
            let (data, truth) = test_case(gaps);
            for params in [
                truth.clone(),
                GgpmParams {
                    a: 0.2,
                    sigma2_process: 3.0,
                    ..truth.clone()
                },
                GgpmParams {
                    a: -0.4,
                    beta0: 26.0,
                    ..truth.clone()
                },
            ] {
                let kal = kalman_loglik(&data, &params, 1.0).unwrap();
                let (den, _) = dense_loglik_grad(&data, &params, 1.0).unwrap();
                assert_relative_eq!(kal, den, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let (data, truth) = test_case(true);
        let theta0 = to_transformed(&GgpmParams {
            a: 0.35,
            sigma2_process: 1.2,
            ..truth
        });
        let (_, grad) = dense_loglik_grad(&data, &from_transformed(&theta0), 1.0).unwrap();
        for j in 0..N_PARAMS {
            let h = 1e-5 * (1.0 + theta0[j].abs());
            let mut up = theta0;
            up[j] += h;
            let mut dn = theta0;
            dn[j] -= h;
            let (lu, _) = dense_loglik_grad(&data, &from_transformed(&up), 1.0).unwrap();
            let (ld, _) = dense_loglik_grad(&data, &from_transformed(&dn), 1.0).unwrap();
            let fd = (lu - ld) / (2.0 * h);
            assert_relative_eq!(grad[j], fd, max_relative = 1e-5, epsilon = 1e-7);
        }
    }

    #[test]
    fn transform_roundtrip() {
        let p = GgpmParams {
            beta0: 27.5,
            beta_alt: -0.8,
            a: 0.6,
            sigma2_process: 2.5,
            scale: 0.07,
            sigma2_nugget: 0.3,
        };
        let q = from_transformed(&to_transformed(&p));
        assert_relative_eq!(p.a, q.a, max_relative = 1e-12);
        assert_relative_eq!(p.sigma2_process, q.sigma2_process, max_relative = 1e-12);
        assert_relative_eq!(p.scale, q.scale, max_relative = 1e-12);
        assert_relative_eq!(p.sigma2_nugget, q.sigma2_nugget, max_relative = 1e-12);
    }

    #[test]
    fn gap_day_drops_contribution() {
        // A fully missing day must not change the likelihood of other days
        // beyond propagation, i.e. the filter must run through it silently.
        let (mut data, params) = test_case(false);
        for i in 0..6 {
            data.y[5 * 6 + i] = None;
        }
        let ll = kalman_loglik(&data, &params, 1.0).unwrap();
        let (dd, _) = dense_loglik_grad(&data, &params, 1.0).unwrap();
        assert_relative_eq!(ll, dd, max_relative = 1e-9);
    }
}
