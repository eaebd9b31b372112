//! Matérn correlation function and the modified Bessel function it needs.
//!
//! `matern(nu, k, h) = (1 / (Gamma(nu) 2^(nu-1))) (k h)^nu K_nu(k h)`, equal
//! to 1 at `h = 0` and strictly decreasing in `h`. Smoothness is restricted
//! to integer and half-integer orders, which covers the whole configured
//! range: half-integer orders use the exact finite-sum form of `K_{n+1/2}`,
//! integer orders a logarithmic series for `x <= 2` and Steed's continued
//! fraction for `x > 2` (relative accuracy near machine precision; spot
//! values are pinned in tests against 40-digit references).

use crate::error::{CoreError, Result};

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

fn near(v: f64, target: f64) -> bool {
    (v - target).abs() < 1e-9
}

fn classify_order(nu: f64) -> Result<(bool, usize)> {
    if !(nu >= 0.0) || !nu.is_finite() {
        return Err(CoreError::InvalidConfig(format!(
            "bessel order must be non-negative, got {nu}"
        )));
    }
    let n = nu.round();
    if near(nu, n) {
        return Ok((false, n as usize));
    }
    let half = (nu - 0.5).round();
    if near(nu - 0.5, half) && half >= 0.0 {
        return Ok((true, half as usize));
    }
    Err(CoreError::Unsupported(format!(
        "order {nu} not supported; use an integer or half-integer"
    )))
}

/// `K_{n+1/2}(x)` via the exact finite sum.
fn bessel_k_half(n: usize, x: f64) -> f64 {
    let pref = (std::f64::consts::PI / (2.0 * x)).sqrt() * (-x).exp();
    // sum_j (n+j)! / (j! (n-j)!) (2x)^{-j}
    let mut term = 1.0;
    let mut sum = 1.0;
    for j in 1..=n {
        term *= ((n + j) as f64) * ((n - j + 1) as f64) / (j as f64) / (2.0 * x);
        sum += term;
    }
    pref * sum
}

/// `K_0` and `K_1` from the logarithmic series; accurate for `x <= 2`.
fn bessel_k01_series(x: f64) -> (f64, f64) {
    let q = 0.25 * x * x;
    let lg = (0.5 * x).ln();

    let mut i0 = 1.0;
    let mut i1 = 1.0; // accumulates sum q^k / (k!(k+1)!), scaled by x/2 below
    let mut k0_sum = 0.0;
    let mut k1_sum = 0.0; // sum [psi(k+1)+psi(k+2)] q^k / (k!(k+1)!)
    let mut t0 = 1.0; // q^k / (k!)^2
    let mut t1 = 1.0; // q^k / (k!(k+1)!)
    let mut h = 0.0; // harmonic number H_k
    k1_sum += 2.0 * (-EULER_GAMMA) + 1.0; // psi(1) + psi(2)
    for k in 1..60 {
        let kf = k as f64;
        t0 *= q / (kf * kf);
        t1 *= q / (kf * (kf + 1.0));
        h += 1.0 / kf;
        i0 += t0;
        i1 += t1;
        k0_sum += h * t0;
        // psi(k+1) + psi(k+2) = -2 gamma + H_k + H_{k+1}
        k1_sum += (-2.0 * EULER_GAMMA + 2.0 * h + 1.0 / (kf + 1.0)) * t1;
        if t0 < 1e-19 * i0 && t1 < 1e-19 * i1 {
            break;
        }
    }
    i1 *= 0.5 * x;

    let k0 = -(lg + EULER_GAMMA) * i0 + k0_sum;
    let k1 = lg * i1 + 1.0 / x - 0.25 * x * k1_sum;
    (k0, k1)
}

/// `K_0` and `K_1` by Steed's evaluation of the second continued fraction;
/// accurate for `x > 2`.
fn bessel_k01_cf2(x: f64) -> (f64, f64) {
    let mu2 = 0.0; // integer orders enter at mu = 0
    let mut b = 2.0 * (1.0 + x);
    let mut d = 1.0 / b;
    let mut delh = d;
    let mut h = d;
    let mut q1 = 0.0;
    let mut q2 = 1.0;
    let a1 = 0.25 - mu2;
    let mut q = a1;
    let mut c = a1;
    let mut a = -a1;
    let mut s = 1.0 + q * delh;
    for i in 2..1000 {
        a -= 2.0 * (i as f64 - 1.0);
        c = -a * c / i as f64;
        let qnew = (q1 - b * q2) / a;
        q1 = q2;
        q2 = qnew;
        q += c * qnew;
        b += 2.0;
        d = 1.0 / (b + a * d);
        delh = (b * d - 1.0) * delh;
        h += delh;
        let dels = q * delh;
        s += dels;
        if (dels / s).abs() < 1e-16 {
            break;
        }
    }
    h = a1 * h;
    let k0 = (std::f64::consts::PI / (2.0 * x)).sqrt() * (-x).exp() / s;
    let k1 = k0 * (0.5 + x - h) / x;
    (k0, k1)
}

/// Modified Bessel function of the second kind for integer or half-integer
/// non-negative order.
pub fn bessel_k(nu: f64, x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(CoreError::InvalidConfig(format!(
            "bessel_k needs x > 0, got {x}"
        )));
    }
    let nu = nu.abs(); // K is symmetric in the order
    let (is_half, n) = classify_order(nu)?;
    if is_half {
        return Ok(bessel_k_half(n, x));
    }
    let (k0, k1) = if x <= 2.0 {
        bessel_k01_series(x)
    } else {
        bessel_k01_cf2(x)
    };
    Ok(match n {
        0 => k0,
        1 => k1,
        _ => {
            // Upward recurrence K_{m+1} = K_{m-1} + (2m/x) K_m (stable for K).
            let mut km1 = k0;
            let mut km = k1;
            for m in 1..n {
                let knext = km1 + (2.0 * m as f64 / x) * km;
                km1 = km;
                km = knext;
            }
            km
        }
    })
}

fn log_gamma_restricted(nu: f64) -> Result<f64> {
    if !(nu > 0.0) {
        return Err(CoreError::InvalidConfig(format!(
            "matern smoothness must be positive, got {nu}"
        )));
    }
    let (is_half, n) = classify_order(nu)?;
    if is_half {
        // Gamma(n + 1/2) = sqrt(pi) (2n)! / (4^n n!)
        let mut lg = 0.5 * std::f64::consts::PI.ln();
        for j in 1..=2 * n {
            lg += (j as f64).ln();
        }
        for j in 1..=n {
            lg -= (j as f64).ln();
        }
        lg -= n as f64 * 4.0f64.ln();
        Ok(lg)
    } else {
        let mut lg = 0.0;
        for j in 2..n {
            lg += (j as f64).ln();
        }
        Ok(lg)
    }
}

/// Matérn correlation at distance `h >= 0` with scale `k > 0`.
pub fn matern(nu: f64, k: f64, h: f64) -> Result<f64> {
    if !(k > 0.0) {
        return Err(CoreError::InvalidConfig(format!(
            "matern scale must be positive, got {k}"
        )));
    }
    if !(h >= 0.0) {
        return Err(CoreError::InvalidConfig(format!(
            "matern distance must be non-negative, got {h}"
        )));
    }
    let x = k * h;
    if x == 0.0 {
        log_gamma_restricted(nu)?;
        return Ok(1.0);
    }
    let lg = log_gamma_restricted(nu)?;
    let log_pref = -lg - (nu - 1.0) * std::f64::consts::LN_2;
    Ok((log_pref + nu * x.ln()).exp() * bessel_k(nu, x)?)
}

/// Derivative of [`matern`] with respect to the scale `k`:
/// `d/dk C = -(h / (Gamma(nu) 2^(nu-1))) (kh)^nu K_{nu-1}(kh)`.
pub fn matern_dk(nu: f64, k: f64, h: f64) -> Result<f64> {
    if !(k > 0.0) || !(h >= 0.0) {
        return Err(CoreError::InvalidConfig(
            "matern_dk needs k > 0, h >= 0".into(),
        ));
    }
    let x = k * h;
    if x == 0.0 {
        log_gamma_restricted(nu)?;
        return Ok(0.0);
    }
    let lg = log_gamma_restricted(nu)?;
    let log_pref = -lg - (nu - 1.0) * std::f64::consts::LN_2;
    Ok(-h * (log_pref + nu * x.ln()).exp() * bessel_k(nu - 1.0, x)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    // 40-digit reference values.
    const K0_REF: &[(f64, f64)] = &[
        (0.05, 3.1142340294719898387),
        (0.3, 1.3724600605442974106),
        (0.9, 0.48673030816290050567),
        (1.0, 0.42102443824070833334),
        (1.9999, 0.11390786025689361412),
        (2.0, 0.11389387274953343565),
        (2.0001, 0.11387988708044136641),
        (3.7, 0.015630659921626658481),
        (6.0, 0.0012439943280131230852),
        (10.0, 0.000017780062316167651811),
        (25.0, 3.4641615622131143554e-12),
        (80.0, 2.5251198425054718152e-36),
    ];
    const K1_REF: &[(f64, f64)] = &[
        (0.05, 19.909674325882505397),
        (0.3, 3.0559920334573251072),
        (0.9, 0.7165335787760190463),
        (1.0, 0.60190723019723457474),
        (1.9999, 0.13988426583169101715),
        (2.0, 0.13986588181652242728),
        (2.0001, 0.13984750046881139493),
        (3.7, 0.017628035102223263065),
        (6.0, 0.0013439197177355090057),
        (10.0, 0.000018648773453825584597),
        (25.0, 3.5327780731999337702e-12),
        (80.0, 2.5408531275211700109e-36),
    ];

    #[test]
    fn k0_and_k1_match_references() {
        for &(x, want) in K0_REF {
            assert_relative_eq!(bessel_k(0.0, x).unwrap(), want, max_relative = 1e-12);
        }
        for &(x, want) in K1_REF {
            assert_relative_eq!(bessel_k(1.0, x).unwrap(), want, max_relative = 1e-12);
        }
    }

    #[test]
    fn half_order_reduces_to_exponential() {
        for x in [0.05f64, 0.7, 1.0, 2.0, 5.0, 20.0] {
            let want = (std::f64::consts::PI / (2.0 * x)).sqrt() * (-x).exp();
            assert_relative_eq!(bessel_k(0.5, x).unwrap(), want, max_relative = 1e-14);
        }
        // matern(0.5, k, h) = exp(-k h)
        for (k, h) in [(1.0, 2.0), (0.3, 7.0), (2.0, 0.1)] {
            let got = matern(0.5, k, h).unwrap();
            assert!((got - (-k * h as f64).exp()).abs() < 1e-12);
        }
        assert_relative_eq!(
            matern(0.5, 1.0, 2.0).unwrap(),
            0.13533528323661269189,
            max_relative = 1e-13
        );
    }

    #[test]
    fn three_halves_matches_closed_form() {
        // matern(1.5, k, h) = (1 + kh) exp(-kh)
        for (k, h) in [(1.0f64, 1.0f64), (0.4, 3.0), (2.5, 0.6)] {
            let x = k * h;
            let want = (1.0 + x) * (-x).exp();
            assert_relative_eq!(matern(1.5, k, h).unwrap(), want, max_relative = 1e-10);
        }
        assert_relative_eq!(
            matern(1.5, 1.0, 1.0).unwrap(),
            0.73575888234288464319,
            max_relative = 1e-12
        );
    }

    #[test]
    fn integer_order_matern_matches_references() {
        let cases = [
            (1.0, 0.2, 5.0, 0.60190723019723455137),
            (1.0, 0.2, 0.5, 0.98538447808706061214),
            (1.0, 1.0, 1.0, 0.60190723019723457474),
            (1.0, 1.0, 3.0, 0.12046929338458255313),
            (2.0, 0.5, 2.0, 0.81241944931758874141),
            (3.0, 0.4, 1.5, 0.95683148377456713227),
            (2.5, 0.7, 2.0, 0.75294272990170513412),
        ];
        for (nu, k, h, want) in cases {
            assert_relative_eq!(matern(nu, k, h).unwrap(), want, max_relative = 1e-11);
        }
    }

    #[test]
    fn matern_is_one_at_origin_and_decreasing() {
        for nu in [0.5, 1.0, 1.5, 2.0, 2.5, 3.0] {
            assert_eq!(matern(nu, 0.7, 0.0).unwrap(), 1.0);
            let mut prev = 1.0;
            for i in 1..60 {
                let h = i as f64 * 0.25;
                let c = matern(nu, 0.7, h).unwrap();
                assert!(c < prev, "nu={nu} h={h}");
                assert!(c > 0.0);
                prev = c;
            }
        }
    }

    #[test]
    fn scale_derivative_matches_finite_differences() {
        for nu in [0.5, 1.0, 1.5, 2.0] {
            for (k, h) in [(0.3, 2.0), (1.2, 1.0), (0.8, 6.0)] {
                let eps = 1e-6;
                let fd = (matern(nu, k + eps, h).unwrap() - matern(nu, k - eps, h).unwrap())
                    / (2.0 * eps);
                let an = matern_dk(nu, k, h).unwrap();
                assert_relative_eq!(an, fd, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn unsupported_orders_error() {
        assert!(matern(0.75, 1.0, 1.0).is_err());
        assert!(matern(-1.0, 1.0, 1.0).is_err());
        assert!(matern(1.0, 0.0, 1.0).is_err());
        assert!(matern(1.0, 1.0, -0.5).is_err());
    }
}
