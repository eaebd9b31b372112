//! Chain quality summaries: effective sample sizes and acceptance rates.

use serde::Serialize;

use super::sampler::AcceptanceReport;
use super::GqrmSamples;

/// Effective sample size via paired autocovariance sums, truncated at the
/// first nonpositive pair and forced monotone. Degenerate series report
/// their length.
pub fn ess(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 4 {
        return n as f64;
    }
    let nf = n as f64;
    let mean = series.iter().sum::<f64>() / nf;
    let gamma = |k: usize| -> f64 {
        let mut acc = 0.0;
        for i in 0..n - k {
            acc += (series[i] - mean) * (series[i + k] - mean);
        }
        acc / nf
    };
    let g0 = gamma(0);
    if g0 <= 0.0 || !g0.is_finite() {
        return nf;
    }
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut m = 0usize;
    loop {
        let k = 2 * m;
        if k + 1 >= n {
            break;
        }
        let mut pair = gamma(k) + gamma(k + 1);
        if pair <= 0.0 {
            break;
        }
        if pair > prev {
            pair = prev;
        }
        sum += pair;
        prev = pair;
        m += 1;
    }
    let var = 2.0 * sum - g0;
    if var <= 0.0 {
        return nf;
    }
    (nf * g0 / var).clamp(1.0, nf)
}

/// Summary of a finished run suitable for serialization.
#[derive(Debug, Clone, Serialize)]
pub struct GqrmDiagnostics {
    pub n_kept: usize,
    pub ess_coef: [f64; 5],
    pub ess_zbar_rho: f64,
    pub ess_zbar_sigma: f64,
    pub ess_variances: [f64; 6],
    pub ess_decays: [f64; 5],
    /// Smallest effective size among the scalar series above.
    pub min_ess: f64,
    /// Posterior medians of the per-site autoregression coefficients.
    pub rho_median: Vec<f64>,
    pub accept: AcceptanceReport,
}

pub fn summarize(samples: &GqrmSamples, accept: &AcceptanceReport) -> GqrmDiagnostics {
    let pull = |f: &dyn Fn(usize) -> f64| -> Vec<f64> {
        (0..samples.n_kept()).map(f).collect()
    };
    let ess_coef: [f64; 5] =
        std::array::from_fn(|p| ess(&pull(&|i| samples.coef[i][p])));
    let ess_variances: [f64; 6] =
        std::array::from_fn(|p| ess(&pull(&|i| samples.variances[i][p])));
    let ess_decays: [f64; 5] =
        std::array::from_fn(|p| ess(&pull(&|i| samples.decays[i][p])));
    let ess_zbar_rho = ess(&samples.zbar_rho);
    let ess_zbar_sigma = ess(&samples.zbar_sigma);
    let min_ess = ess_coef
        .iter()
        .chain(ess_variances.iter())
        .chain(ess_decays.iter())
        .chain([ess_zbar_rho, ess_zbar_sigma].iter())
        .fold(f64::INFINITY, |a, &b| a.min(b));

    let mut rho_median = Vec::with_capacity(samples.n_sites);
    for s in 0..samples.n_sites {
        let mut rhos: Vec<f64> = samples
            .z_rho
            .iter()
            .map(|z| (z[s] / 2.0).tanh())
            .collect();
        rhos.sort_by(|a, b| a.total_cmp(b));
        let n = rhos.len();
        rho_median.push(if n == 0 {
            f64::NAN
        } else if n % 2 == 1 {
            rhos[n / 2]
        } else {
            0.5 * (rhos[n / 2 - 1] + rhos[n / 2])
        });
    }

    GqrmDiagnostics {
        n_kept: samples.n_kept(),
        ess_coef,
        ess_zbar_rho,
        ess_zbar_sigma,
        ess_variances,
        ess_decays,
        min_ess,
        rho_median,
        accept: accept.clone(),
    }
}
