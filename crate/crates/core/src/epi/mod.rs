//! Conditional Poisson inference for case-crossover strata.
//!
//! Within each stratum (one event day plus its matched controls) the event
//! intensity follows a log-linear model
//!
//! ```text
//! log mu = b0 + f(bin(x)) + b_hol holiday + b_hw heatwave + u_j
//! ```
//!
//! where `f` is a curve over equal-width exposure bins carrying a
//! second-order random-walk smoothness prior, the fixed effects get wide
//! normal priors, and `u_j` is a per-stratum effect with prior `N(0, 100)`.
//! The random-walk precision is given a penalized-complexity prior through
//! the implied standard deviation and integrated over a log-spaced grid with
//! Laplace weights; see [`fit`]. Since every stratum contains exactly one
//! event, the per-stratum likelihood also collapses to a multinomial form in
//! which `b0` and `u_j` cancel. That path ([`conditional_loglik`]) is kept
//! alongside the default as an exact cross-check.

pub mod design;
pub mod fit;

use serde::{Deserialize, Serialize};

pub use design::{Binning, EpiDataset, EpiRow, Stratum};
pub use fit::{
    fit, fit_heatwave_models, neg_log_posterior, neg_log_posterior_grad, risk_curve_from,
    CoefSummary, EpiFit, EpiOptions, FitMode, HeatwaveModelResult, RiskCurve, RrInterval,
};

use crate::error::{CoreError, Result};

/// Configuration of the binned exposure effect and its smoothness prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rw2EffectSpec {
    /// Equal-width bins over the pooled observed exposure range.
    pub n_bins: usize,
    /// Tail point of the complexity prior: P(sd > pc_u) = pc_alpha.
    pub pc_u: f64,
    pub pc_alpha: f64,
    /// The curve is constrained to sum to zero; the intercept is explicit.
    pub sum_to_zero: bool,
}

impl Default for Rw2EffectSpec {
    fn default() -> Self {
        Self {
            n_bins: 100,
            pc_u: 0.1,
            pc_alpha: 0.01,
            sum_to_zero: true,
        }
    }
}

impl Rw2EffectSpec {
    /// Pipeline-level validation; fitting itself only needs `n_bins >= 2`.
    pub fn validate(&self) -> Result<()> {
        if self.n_bins < 10 {
            return Err(CoreError::InvalidConfig(format!(
                "exposure curve wants at least 10 bins, got {}",
                self.n_bins
            )));
        }
        if !(self.pc_u > 0.0) {
            return Err(CoreError::InvalidConfig(
                "complexity prior scale must be positive".into(),
            ));
        }
        if !(self.pc_alpha > 0.0 && self.pc_alpha < 1.0) {
            return Err(CoreError::InvalidConfig(
                "complexity prior tail probability must lie in (0, 1)".into(),
            ));
        }
        if !self.sum_to_zero {
            return Err(CoreError::Unsupported(
                "the exposure curve is only identified with the sum-to-zero constraint".into(),
            ));
        }
        Ok(())
    }
}

/// A single point in parameter space: fixed effects, the binned curve, the
/// stratum effects and the curve precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpiModelState {
    /// Intercept; zero under the conditional path where it cancels.
    pub beta0: f64,
    pub beta_holiday: f64,
    pub beta_heatwave: Option<f64>,
    /// Per-bin log rate ratio, sum-to-zero.
    pub f: Vec<f64>,
    /// Per-stratum effects; empty under the conditional path.
    pub stratum_effects: Vec<f64>,
    /// Random-walk precision of the curve.
    pub tau_x: f64,
}

impl EpiModelState {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_x > 0.0) {
            return Err(CoreError::InvalidConfig(
                "curve precision must be positive".into(),
            ));
        }
        let scale = self.f.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        let sum: f64 = self.f.iter().sum();
        if sum.abs() > 1e-8 * scale * (1 + self.f.len()) as f64 {
            return Err(CoreError::InvalidConfig(format!(
                "curve violates the sum-to-zero constraint (sum {sum:.3e})"
            )));
        }
        Ok(())
    }
}

/// Rate of the exponential complexity prior on a standard deviation, chosen
/// so that `P(sd > u) = alpha`. Requires `u > 0` and `alpha` in `(0, 1)`.
pub fn pc_prior_rate(u: f64, alpha: f64) -> f64 {
    debug_assert!(u > 0.0 && alpha > 0.0 && alpha < 1.0);
    -alpha.ln() / u
}

/// Sum of squared second differences of `f`; zero for affine sequences.
pub fn rw2_quadratic(f: &[f64]) -> f64 {
    f.windows(3)
        .map(|w| {
            let d = w[2] - 2.0 * w[1] + w[0];
            d * d
        })
        .sum()
}

/// Negative log density of the intrinsic second-order random walk at
/// precision `tau`, up to the constant generalized determinant:
/// `(tau / 2) * quad(f) - ((b - 2) / 2) * ln(tau / (2 pi))` for `b >= 3`
/// bins, zero otherwise (the walk has rank `b - 2`).
pub fn rw2_neg_log_prior(f: &[f64], tau: f64) -> f64 {
    let rank = f.len().saturating_sub(2);
    0.5 * tau * rw2_quadratic(f) - 0.5 * rank as f64 * (tau / (2.0 * std::f64::consts::PI)).ln()
}

fn eta_shared(row: &EpiRow, state: &EpiModelState) -> f64 {
    let mut eta = state.f.get(row.bin).copied().unwrap_or(0.0);
    if row.holiday {
        eta += state.beta_holiday;
    }
    if row.heatwave {
        eta += state.beta_heatwave.unwrap_or(0.0);
    }
    eta
}

/// Log probability that the observed event row is the event, given that the
/// stratum contains exactly one: `eta_event - log sum_rows exp(eta)`. The
/// intercept and the stratum effect cancel and are ignored.
pub fn conditional_loglik(stratum: &Stratum, state: &EpiModelState) -> f64 {
    let etas: Vec<f64> = stratum.rows.iter().map(|r| eta_shared(r, state)).collect();
    let event = stratum
        .rows
        .iter()
        .position(|r| r.case)
        .expect("validated stratum has an event row");
    let m = etas.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    let lse = m + etas.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    etas[event] - lse
}

/// Gradient of [`conditional_loglik`] with respect to
/// `(f[0..b], beta_holiday, beta_heatwave)`, flattened in that order.
pub fn conditional_grad(stratum: &Stratum, state: &EpiModelState) -> Vec<f64> {
    let b = state.f.len();
    let etas: Vec<f64> = stratum.rows.iter().map(|r| eta_shared(r, state)).collect();
    let m = etas.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    let total: f64 = etas.iter().map(|&v| (v - m).exp()).sum();
    let mut g = vec![0.0; b + 2];
    for (row, &eta) in stratum.rows.iter().zip(&etas) {
        let p = (eta - m).exp() / total;
        let sign = if row.case { 1.0 - p } else { -p };
        g[row.bin] += sign;
        if row.holiday {
            g[b] += sign;
        }
        if row.heatwave {
            g[b + 1] += sign;
        }
    }
    g
}

/// Poisson log likelihood of the stratum with its effect `u_j` replaced by
/// the value maximizing it. The optimum satisfies `sum mu = 1`, giving
/// `eta_event - log sum exp(eta) - 1`: the multinomial form shifted by a
/// constant, which is what makes the two paths interchangeable.
pub fn profiled_poisson_loglik(stratum: &Stratum, state: &EpiModelState) -> f64 {
    let etas: Vec<f64> = stratum
        .rows
        .iter()
        .map(|r| state.beta0 + eta_shared(r, state))
        .collect();
    let m = etas.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    let log_total = m + etas.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    let u_star = -log_total;
    stratum
        .rows
        .iter()
        .zip(&etas)
        .map(|(row, &eta)| {
            let full = eta + u_star;
            let y = if row.case { 1.0 } else { 0.0 };
            y * full - full.exp()
        })
        .sum()
}

/// Gradient of [`profiled_poisson_loglik`] in the layout of
/// [`conditional_grad`]. The profiled effect is a function of the shared
/// parameters, but at its optimum the inner derivative vanishes, so this
/// differentiates at fixed `u_j` and the two gradients agree exactly.
pub fn profiled_poisson_grad(stratum: &Stratum, state: &EpiModelState) -> Vec<f64> {
    let b = state.f.len();
    let etas: Vec<f64> = stratum
        .rows
        .iter()
        .map(|r| state.beta0 + eta_shared(r, state))
        .collect();
    let m = etas.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    let log_total = m + etas.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    let mut g = vec![0.0; b + 2];
    for (row, &eta) in stratum.rows.iter().zip(&etas) {
        let mu = (eta - log_total).exp();
        let y = if row.case { 1.0 } else { 0.0 };
        let resid = y - mu;
        g[row.bin] += resid;
        if row.holiday {
            g[b] += resid;
        }
        if row.heatwave {
            g[b + 1] += resid;
        }
    }
    g
}
