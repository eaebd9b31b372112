//! Asymmetric Laplace density and its exponential-normal mixture.
//!
//! With `theta = (1 - 2 tau) / (tau (1 - tau))` and `kappa^2 = 2 / (tau (1 -
//! tau))`, an AL(0, sigma, tau) draw is `sigma (theta V + kappa sqrt(V) U)`
//! for `V ~ Exp(1)`, `U ~ N(0, 1)`. Conditional on a residual the latent
//! `V` is generalized inverse Gaussian with index 1/2, drawn through its
//! inverse-Gaussian reciprocal. A quadrature test pins the mixture to the
//! closed-form density.

use rand::Rng;
use rand_distr::{Distribution, Gamma, InverseGaussian, StandardNormal};

use crate::error::{CoreError, Result};

/// Quantile check loss `u (tau - 1{u < 0})`; non-negative, zero at zero.
pub fn checkloss(u: f64, tau: f64) -> f64 {
    u * (tau - if u < 0.0 { 1.0 } else { 0.0 })
}

pub fn theta(tau: f64) -> f64 {
    (1.0 - 2.0 * tau) / (tau * (1.0 - tau))
}

pub fn kappa2(tau: f64) -> f64 {
    2.0 / (tau * (1.0 - tau))
}

/// Log density of AL(0, sigma, tau) at `eps`.
pub fn al_log_density(eps: f64, sigma: f64, tau: f64) -> f64 {
    (tau * (1.0 - tau)).ln() - sigma.ln() - checkloss(eps / sigma, tau)
}

/// Draw the latent mixing variable given a residual.
///
/// The conditional is GIG(1/2, chi, psi) with `psi = 1 / (2 tau (1 - tau))`
/// and `chi = eps^2 / (sigma^2 kappa^2)`; its reciprocal is inverse
/// Gaussian, which is what gets sampled. A vanishing residual collapses the
/// conditional to a gamma.
pub fn draw_latent<R: Rng>(eps: f64, sigma: f64, tau: f64, rng: &mut R) -> Result<f64> {
    let psi = 1.0 / (2.0 * tau * (1.0 - tau));
    let chi = eps * eps / (sigma * sigma * kappa2(tau));
    let v = if chi < 1e-14 {
        let g = Gamma::new(0.5, 2.0 / psi).map_err(|e| {
            CoreError::InvalidConfig(format!("latent gamma parameters invalid: {e}"))
        })?;
        g.sample(rng)
    } else {
        // 1/V is inverse Gaussian with mean sqrt(psi/chi) and shape psi.
        let ig = InverseGaussian::new((psi / chi).sqrt(), psi).map_err(|e| {
            CoreError::InvalidConfig(format!("latent inverse-gaussian invalid: {e}"))
        })?;
        1.0 / ig.sample(rng)
    };
    // Guard the extreme tails so downstream weights stay finite.
    Ok(v.clamp(1e-12, 1e12))
}

/// Draw AL(0, sigma, tau) noise through the mixture.
pub fn draw_noise<R: Rng>(sigma: f64, tau: f64, rng: &mut R) -> f64 {
    let v: f64 = rand_distr::Exp1.sample(rng);
    let u: f64 = rng.sample(StandardNormal);
    sigma * (theta(tau) * v + kappa2(tau).sqrt() * v.sqrt() * u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use approx::assert_relative_eq;

    #[test]
    fn checkloss_basics() {
        assert_eq!(checkloss(0.0, 0.3), 0.0);
        assert_relative_eq!(checkloss(2.0, 0.3), 0.6);
        assert_relative_eq!(checkloss(-2.0, 0.3), 1.4);
        // Convexity along a few chords.
        for tau in [0.1, 0.5, 0.9] {
            for (a, b) in [(-3.0, 1.0), (-0.5, 2.5), (1.0, 4.0)] {
                let mid = checkloss(0.5 * (a + b), tau);
                assert!(mid <= 0.5 * (checkloss(a, tau) + checkloss(b, tau)) + 1e-12);
            }
        }
    }

    fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, steps: usize) -> f64 {
        let h = (b - a) / steps as f64;
        let mut total = 0.5 * (f(a) + f(b));
        for i in 1..steps {
            total += f(a + i as f64 * h);
        }
        total * h
    }

    #[test]
    fn density_integrates_to_one() {
        for tau in [0.1, 0.5, 0.9, 0.95] {
            let sigma = 1.3;
            // Tail rates differ by side: tau / sigma above zero and
            // (1 - tau) / sigma below, so the ranges must scale with them.
            let lo = -20.0 * sigma / (1.0 - tau);
            let hi = 20.0 * sigma / tau;
            let f = |x: f64| al_log_density(x, sigma, tau).exp();
            let total = trapezoid(f, lo, 0.0, 200_000) + trapezoid(f, 0.0, hi, 200_000);
            assert_relative_eq!(total, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn mixture_matches_closed_form_density() {
        // Integrate N(eps; sigma theta v, sigma^2 kappa^2 v) e^{-v} dv with
        // the substitution v = u^2, which removes the 1/sqrt(v) singularity.
        for tau in [0.2, 0.5, 0.9] {
            for eps in [-2.5, -0.4, 0.0, 0.7, 3.0] {
                let sigma = 0.8;
                let th = theta(tau);
                let k2 = kappa2(tau);
                let integrand = |u: f64| -> f64 {
                    let v = u * u;
                    if v == 0.0 {
                        // The 2u factor cancels the 1/sqrt(v) in the normal
                        // density, leaving a finite limit when eps is zero.
                        return if eps == 0.0 {
                            2.0 / (sigma * k2.sqrt() * (2.0 * std::f64::consts::PI).sqrt())
                        } else {
                            0.0
                        };
                    }
                    let var = sigma * sigma * k2 * v;
                    let mean = sigma * th * v;
                    let norm =
                        (-0.5 * (eps - mean).powi(2) / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
                    norm * (-v).exp() * 2.0 * u
                };
                let steps = 60_000;
                let hi = 9.0;
                let h = hi / steps as f64;
                let mut total = 0.0;
                for i in 0..=steps {
                    let u = i as f64 * h;
                    let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
                    total += w * integrand(u);
                }
                total *= h;
                let want = al_log_density(eps, sigma, tau).exp();
                assert_relative_eq!(total, want, max_relative = 1e-7);
            }
        }
    }

    #[test]
    fn latent_conditional_mean_matches_theory() {
        // E[V | eps] for GIG(1/2, chi, psi) is sqrt(chi/psi) (1 + 1 /
        // sqrt(chi psi)).
        let tau = 0.75;
        let sigma = 1.1;
        let eps = 1.8;
        let psi = 1.0 / (2.0 * tau * (1.0 - tau));
        let chi = eps * eps / (sigma * sigma * kappa2(tau));
        let want = (chi / psi).sqrt() * (1.0 + 1.0 / (chi * psi).sqrt());
        let mut rng = substream(9, "al-latent-mean");
        let n = 200_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let v = draw_latent(eps, sigma, tau, &mut rng).unwrap();
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let sd = ((sumsq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(
            (mean - want).abs() < 5.0 * sd + 1e-4,
            "mean {mean} want {want} mc-sd {sd}"
        );
    }

    #[test]
    fn noise_quantile_sits_at_zero() {
        for tau in [0.5, 0.9] {
            let mut rng = substream(4, "al-noise-q");
            let n = 100_000;
            let below = (0..n)
                .filter(|_| draw_noise(2.0, tau, &mut rng) <= 0.0)
                .count();
            let frac = below as f64 / n as f64;
            assert!((frac - tau).abs() < 0.01, "tau {tau} frac {frac}");
        }
    }

    #[test]
    fn zero_residual_latent_is_gamma() {
        // The chi -> 0 branch must still produce positive finite draws.
        let mut rng = substream(2, "al-latent-zero");
        for _ in 0..1000 {
            let v = draw_latent(0.0, 1.0, 0.5, &mut rng).unwrap();
            assert!(v > 0.0 && v.is_finite());
        }
    }
}
