//! Posterior maximisation and Laplace intervals for the per-year model.
//!
//! The objective is the Kalman-filter log likelihood plus log priors, in
//! transformed coordinates where every parameter is unconstrained: normal
//! priors on the coefficients and on `artanh(a)`, exponential priors on the
//! two standard deviations, and a lognormal prior on the Matérn scale
//! centred at the heuristic `sqrt(8 nu) / median pairwise distance`.

use super::likelihood::{from_transformed, kalman_loglik, N_PARAMS};
use super::{GgpmConfig, GgpmParams, YearObservations};
use crate::error::{CoreError, Result};
use crate::geometry::Point;
use crate::optim::{central_gradient, central_hessian, minimize_bfgs, BfgsOptions};

/// Fitted per-year model with Laplace uncertainty.
#[derive(Debug, Clone)]
pub struct GgpmFit {
    /// Posterior mode on the natural scale.
    pub params: GgpmParams,
    /// Posterior mode in transformed coordinates.
    pub theta: [f64; N_PARAMS],
    /// Laplace standard errors in transformed coordinates.
    pub se_theta: [f64; N_PARAMS],
    /// 95% intervals on the natural scale, ordered as the fields of
    /// [`GgpmParams`]: beta0, beta_alt, a, sigma2_process, scale,
    /// sigma2_nugget.
    pub intervals: [(f64, f64); N_PARAMS],
    /// Log likelihood (not the posterior) at the mode.
    pub loglik: f64,
    pub n_obs: usize,
    pub iters: usize,
    pub converged: bool,
    /// Centre of the scale prior.
    pub scale_center: f64,
}

/// Median pairwise distance of a point set; prior centre for the Matérn
/// scale.
pub fn median_pairwise_distance(points: &[Point]) -> Result<f64> {
    let mut d = Vec::new();
    for i in 0..points.len() {
        for j in 0..i {
            d.push(points[i].dist(&points[j]));
        }
    }
    if d.is_empty() {
        return Err(CoreError::EmptySelection {
            rule: "median distance needs at least two points".into(),
        });
    }
    d.sort_by(|a, b| a.total_cmp(b));
    let mid = d.len() / 2;
    let med = if d.len() % 2 == 0 {
        0.5 * (d[mid - 1] + d[mid])
    } else {
        d[mid]
    };
    if !(med > 0.0) {
        return Err(CoreError::Geometry(
            "median pairwise distance is zero; sites coincide".into(),
        ));
    }
    Ok(med)
}

fn neg_log_prior(theta: &[f64], cfg: &GgpmConfig, log_scale_center: f64) -> f64 {
    let b_var = cfg.beta_sd * cfg.beta_sd;
    let mut nl = theta[0] * theta[0] / (2.0 * b_var) + theta[1] * theta[1] / (2.0 * b_var);
    nl += theta[2] * theta[2] / (2.0 * cfg.za_sd * cfg.za_sd);
    // sd = exp(w) with an exponential prior: rate * sd - log|d sd / d w|.
    nl += cfg.sd_process_rate * theta[3].exp() - theta[3];
    nl += cfg.sd_nugget_rate * theta[5].exp() - theta[5];
    let du = theta[4] - log_scale_center;
    nl += du * du / (2.0 * cfg.log_scale_sd * cfg.log_scale_sd);
    nl
}

fn initial_theta(data: &YearObservations, scale_center: f64) -> [f64; N_PARAMS] {
    // Per-site means regressed on the covariate seed the coefficients; the
    // residual spread is split between process and nugget.
    let n = data.n_sites();
    let mut site_mean = vec![0.0; n];
    let mut site_cnt = vec![0usize; n];
    for d in 0..data.n_days {
        for i in 0..n {
            if let Some(v) = data.y[d * n + i] {
                site_mean[i] += v;
                site_cnt[i] += 1;
            }
        }
    }
    let used: Vec<usize> = (0..n).filter(|&i| site_cnt[i] > 0).collect();
    for &i in &used {
        site_mean[i] /= site_cnt[i] as f64;
    }
    let m = used.len() as f64;
    let xbar = used.iter().map(|&i| data.alt[i]).sum::<f64>() / m;
    let ybar = used.iter().map(|&i| site_mean[i]).sum::<f64>() / m;
    let sxx: f64 = used.iter().map(|&i| (data.alt[i] - xbar).powi(2)).sum();
    let sxy: f64 = used
        .iter()
        .map(|&i| (data.alt[i] - xbar) * (site_mean[i] - ybar))
        .sum();
    let b1 = if sxx > 1e-12 { sxy / sxx } else { 0.0 };
    let b0 = ybar - b1 * xbar;

    let mut ss = 0.0;
    let mut cnt = 0usize;
    for d in 0..data.n_days {
        for i in 0..n {
            if let Some(v) = data.y[d * n + i] {
                let r = v - b0 - b1 * data.alt[i];
                ss += r * r;
                cnt += 1;
            }
        }
    }
    let sd = (ss / cnt.max(1) as f64).sqrt().max(0.1);

    [
        b0,
        b1,
        0.3f64.atanh(),
        (0.7 * sd).ln(),
        scale_center.ln(),
        (0.5 * sd).ln(),
    ]
}

/// Maximise the posterior and attach a Laplace approximation.
pub fn fit(data: &YearObservations, cfg: &GgpmConfig) -> Result<GgpmFit> {
    data.validate()?;
    if data.n_sites() > cfg.max_state_dim {
        return Err(CoreError::SolveTooLarge {
            context: "per-year fit state".into(),
            dim: data.n_sites(),
            cap: cfg.max_state_dim,
        });
    }
    let med = median_pairwise_distance(&data.sites)?;
    let scale_center = (8.0 * cfg.nu).sqrt() / med;
    let log_center = scale_center.ln();

    let objective = |t: &[f64]| -> Result<f64> {
        let params = from_transformed(t);
        let ll = kalman_loglik(data, &params, cfg.nu)?;
        Ok(-ll + neg_log_prior(t, cfg, log_center))
    };

    let t0 = initial_theta(data, scale_center);
    let res = minimize_bfgs(
        &t0,
        objective,
        |t| central_gradient(t, 1e-6, objective),
        &BfgsOptions {
            max_iters: 150,
            grad_tol: 5e-4,
            f_tol: 1e-11,
        },
        "per-year posterior",
    )?;

    let mut theta = [0.0; N_PARAMS];
    theta.copy_from_slice(&res.x);
    let params = from_transformed(&theta);
    params.validate()?;
    let loglik = kalman_loglik(data, &params, cfg.nu)?;

    let hess = central_hessian(&theta, 1e-4, objective)?;
    let cov = super::jittered_cholesky(hess, "posterior curvature")?.inverse();
    let mut se = [0.0; N_PARAMS];
    for j in 0..N_PARAMS {
        se[j] = cov[(j, j)].max(0.0).sqrt();
    }

    // Transformed-scale endpoints mapped through the monotone transforms.
    let z = 1.959_963_984_540_054;
    let lo = |j: usize| theta[j] - z * se[j];
    let hi = |j: usize| theta[j] + z * se[j];
    let intervals = [
        (lo(0), hi(0)),
        (lo(1), hi(1)),
        (lo(2).tanh(), hi(2).tanh()),
        ((2.0 * lo(3)).exp(), (2.0 * hi(3)).exp()),
        (lo(4).exp(), hi(4).exp()),
        ((2.0 * lo(5)).exp(), (2.0 * hi(5)).exp()),
    ];

    Ok(GgpmFit {
        params,
        theta,
        se_theta: se,
        intervals,
        loglik,
        n_obs: data.n_observed(),
        iters: res.iters,
        converged: res.converged,
        scale_center,
    })
}
