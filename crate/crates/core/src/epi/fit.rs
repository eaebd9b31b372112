//! MAP fitting of the health model with precision-grid integration.
//!
//! For each candidate curve precision `tau` on a log-spaced grid, the
//! penalized Poisson posterior is maximized by Newton steps. The stratum
//! effects enter the Hessian as a diagonal block, so each step solves only
//! the small Schur complement over the shared parameters. A Laplace
//! approximation at each mode yields an evidence value; grid points are then
//! weighted by evidence times the complexity prior on the implied standard
//! deviation, and per-parameter summaries are moment matched across the
//! mixture. The conditional path drops the intercept and stratum effects
//! from the model entirely and maximizes the multinomial likelihood instead.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::design::{rw2_penalty_matrix, sum_to_zero_basis, Binning, EpiDataset, Stratum};
use super::{pc_prior_rate, EpiModelState, Rw2EffectSpec};
use crate::casecrossover::CcoRow;
use crate::error::{CoreError, Result};
use crate::exec;
use crate::ggpm::jittered_cholesky;

const LN_2PI: f64 = 1.837_877_066_409_345_3;
/// Two-sided 95% normal quantile.
const Z95: f64 = 1.959_963_984_540_054;

/// Which likelihood the optimizer targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitMode {
    /// Poisson rows with explicit per-stratum effects under `N(0, 100)`;
    /// the default, matching the generative model.
    Stratified,
    /// Multinomial event probability per stratum; intercept and stratum
    /// effects cancel exactly. Used as an oracle and cross-check.
    Conditional,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpiOptions {
    pub mode: FitMode,
    pub rw2: Rw2EffectSpec,
    /// When false the binned curve is dropped from the linear predictor
    /// (heatwave-only models); the dataset still carries its binning.
    pub include_temperature: bool,
    pub beta_prior_var: f64,
    pub stratum_prior_var: f64,
    /// Number of log-spaced curve-precision grid points.
    pub tau_grid: usize,
    pub log_tau_lo: f64,
    pub log_tau_hi: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for EpiOptions {
    fn default() -> Self {
        Self {
            mode: FitMode::Stratified,
            rw2: Rw2EffectSpec::default(),
            include_temperature: true,
            beta_prior_var: 1000.0,
            stratum_prior_var: 100.0,
            tau_grid: 25,
            log_tau_lo: 0.0,
            log_tau_hi: (1e8f64).ln(),
            max_iter: 200,
            grad_tol: 1e-8,
        }
    }
}

impl EpiOptions {
    fn validate(&self, data: &EpiDataset) -> Result<()> {
        if !(self.beta_prior_var > 0.0 && self.stratum_prior_var > 0.0) {
            return Err(CoreError::InvalidConfig(
                "prior variances must be positive".into(),
            ));
        }
        if !(self.rw2.pc_u > 0.0 && self.rw2.pc_alpha > 0.0 && self.rw2.pc_alpha < 1.0) {
            return Err(CoreError::InvalidConfig(
                "complexity prior wants pc_u > 0 and pc_alpha in (0, 1)".into(),
            ));
        }
        if !self.rw2.sum_to_zero {
            return Err(CoreError::Unsupported(
                "the exposure curve is only identified with the sum-to-zero constraint".into(),
            ));
        }
        if self.tau_grid == 0 || self.log_tau_hi < self.log_tau_lo {
            return Err(CoreError::InvalidConfig(
                "precision grid is empty or reversed".into(),
            ));
        }
        if self.include_temperature && data.binning().n_bins() != self.rw2.n_bins {
            return Err(CoreError::InvalidConfig(format!(
                "dataset was binned with {} bins but the model expects {}",
                data.binning().n_bins(),
                self.rw2.n_bins
            )));
        }
        Ok(())
    }
}

/// Moment-matched posterior summary of one scalar coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub lo: f64,
    pub hi: f64,
}

impl CoefSummary {
    pub fn covers(&self, value: f64) -> bool {
        self.lo <= value && value <= self.hi
    }
}

/// Completed fit: coefficient summaries, the mixed curve, and the grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpiFit {
    pub mode: FitMode,
    pub include_temperature: bool,
    pub binning: Binning,
    pub coefficients: Vec<CoefSummary>,
    pub f_mean: Vec<f64>,
    pub f_sd: Vec<f64>,
    pub f_lo: Vec<f64>,
    pub f_hi: Vec<f64>,
    pub tau_grid: Vec<f64>,
    pub tau_weights: Vec<f64>,
    /// Parameters at the highest-weight grid point.
    pub map_state: EpiModelState,
    /// Fixed effects whose magnitude suggests separation in the data.
    pub separation: Vec<String>,
    pub n_strata: usize,
    pub n_rows: usize,
    pub seed: u64,
}

impl EpiFit {
    pub fn coefficient(&self, name: &str) -> Option<&CoefSummary> {
        self.coefficients.iter().find(|c| c.name == name)
    }

    pub fn risk_curve(&self) -> Result<RiskCurve> {
        if !self.include_temperature {
            return Err(CoreError::Unsupported(
                "fit has no exposure curve to turn into a risk curve".into(),
            ));
        }
        risk_curve_from(&self.binning, &self.f_mean, &self.f_lo, &self.f_hi)
    }
}

/// Exposure-response curve on the rate-ratio scale, normalized so the
/// minimum-risk bin has ratio exactly one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskCurve {
    pub bin_mid: Vec<f64>,
    pub logrr_med: Vec<f64>,
    pub logrr_lo: Vec<f64>,
    pub logrr_hi: Vec<f64>,
    /// Bin midpoint minimizing the median curve.
    pub mmt: f64,
    /// `exp(logrr_med - logrr_med[argmin])`.
    pub rr_norm: Vec<f64>,
}

/// Builds a [`RiskCurve`] from per-bin posterior summaries.
pub fn risk_curve_from(
    binning: &Binning,
    f_med: &[f64],
    f_lo: &[f64],
    f_hi: &[f64],
) -> Result<RiskCurve> {
    let b = binning.n_bins();
    if f_med.len() != b || f_lo.len() != b || f_hi.len() != b {
        return Err(CoreError::LengthMismatch {
            context: "risk curve summaries".into(),
            got: f_med.len(),
            want: b,
        });
    }
    for i in 0..b {
        if !(f_lo[i] <= f_med[i] && f_med[i] <= f_hi[i]) {
            return Err(CoreError::InvalidConfig(format!(
                "bin {i}: interval [{}, {}] does not contain the median {}",
                f_lo[i], f_hi[i], f_med[i]
            )));
        }
    }
    let mmt_bin = f_med
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("n_bins >= 2");
    let at_min = f_med[mmt_bin];
    Ok(RiskCurve {
        bin_mid: binning.midpoints(),
        logrr_med: f_med.to_vec(),
        logrr_lo: f_lo.to_vec(),
        logrr_hi: f_hi.to_vec(),
        mmt: binning.midpoint(mmt_bin),
        rr_norm: f_med.iter().map(|&v| (v - at_min).exp()).collect(),
    })
}

/// Rate ratio with its 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RrInterval {
    pub rr: f64,
    pub lo: f64,
    pub hi: f64,
}

/// One row of the heatwave results table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeatwaveModelResult {
    pub spec_id: String,
    /// Fraction of rows carrying the linked flag.
    pub prevalence: f64,
    /// True when the flag column was constant and no model was fitted.
    pub skipped: bool,
    pub log_rr: Option<CoefSummary>,
    pub rr: Option<RrInterval>,
}

struct Engine<'a> {
    items: Vec<(usize, &'a Stratum)>,
    mode: FitMode,
    has_heatwave: bool,
    n_w: usize,
    b: usize,
    m: usize,
    n_g: usize,
    z: DMatrix<f64>,
    k_f: DMatrix<f64>,
    beta_var: f64,
    u_var: f64,
    max_iter: usize,
    grad_tol: f64,
}

/// Per-call accumulation over strata, in covariate space
/// (`n_w` fixed-effect columns then one column per bin).
struct Acc {
    a: DMatrix<f64>,
    c: DMatrix<f64>,
    g: DVector<f64>,
    v: DVector<f64>,
    g_u: Vec<f64>,
    d: Vec<f64>,
    h: Vec<Vec<(usize, f64)>>,
    logdet_d: f64,
    nll: f64,
}

impl Acc {
    fn zero(m: usize) -> Self {
        Self {
            a: DMatrix::zeros(m, m),
            c: DMatrix::zeros(m, m),
            g: DVector::zeros(m),
            v: DVector::zeros(m),
            g_u: Vec::new(),
            d: Vec::new(),
            h: Vec::new(),
            logdet_d: 0.0,
            nll: 0.0,
        }
    }

    fn merge(mut self, o: Self) -> Self {
        self.a += o.a;
        self.c += o.c;
        self.g += o.g;
        self.v += o.v;
        self.g_u.extend(o.g_u);
        self.d.extend(o.d);
        self.h.extend(o.h);
        self.logdet_d += o.logdet_d;
        self.nll += o.nll;
        self
    }
}

fn push_add(v: &mut Vec<(usize, f64)>, key: usize, x: f64) {
    if let Some(e) = v.iter_mut().find(|e| e.0 == key) {
        e.1 += x;
    } else {
        v.push((key, x));
    }
}

struct Curvature {
    /// Prior-augmented Hessian over shared parameters, covariate space,
    /// with stratum effects already folded out via their Schur term.
    m_mat: DMatrix<f64>,
    /// Prior-augmented gradient over shared parameters, covariate space.
    g_f: DVector<f64>,
    /// Schur correction to the Newton right-hand side.
    v_corr: DVector<f64>,
    g_u: Vec<f64>,
    d: Vec<f64>,
    h: Vec<Vec<(usize, f64)>>,
    logdet_d: f64,
}

struct GridFit {
    tau: f64,
    sd: f64,
    theta: DVector<f64>,
    u: Vec<f64>,
    w: Vec<f64>,
    w_var: Vec<f64>,
    f: Vec<f64>,
    f_var: Vec<f64>,
    log_evidence: f64,
}

impl<'a> Engine<'a> {
    fn new(data: &'a EpiDataset, opts: &EpiOptions) -> Self {
        let has_heatwave = data.has_heatwave();
        let n_w = match opts.mode {
            FitMode::Stratified => 2 + has_heatwave as usize,
            FitMode::Conditional => 1 + has_heatwave as usize,
        };
        let b = if opts.include_temperature {
            data.binning().n_bins()
        } else {
            0
        };
        let n_g = b.saturating_sub(1);
        Self {
            items: data.strata().iter().enumerate().collect(),
            mode: opts.mode,
            has_heatwave,
            n_w,
            b,
            m: n_w + b,
            n_g,
            z: sum_to_zero_basis(b),
            k_f: rw2_penalty_matrix(b),
            beta_var: opts.beta_prior_var,
            u_var: opts.stratum_prior_var,
            max_iter: opts.max_iter,
            grad_tol: opts.grad_tol,
        }
    }

    fn p(&self) -> usize {
        self.n_w + self.n_g
    }

    /// Rank of the curve penalty inside the constrained space; when zero the
    /// precision drops out of the model and one grid point suffices.
    fn penalty_rank(&self) -> usize {
        self.b.saturating_sub(2)
    }

    fn fill_w(&self, row: &super::design::EpiRow, buf: &mut [f64; 3]) {
        let mut k = 0;
        if self.mode == FitMode::Stratified {
            buf[0] = 1.0;
            k = 1;
        }
        buf[k] = row.holiday as u8 as f64;
        if self.has_heatwave {
            buf[k + 1] = row.heatwave as u8 as f64;
        }
    }

    fn split(&self, theta: &DVector<f64>) -> (Vec<f64>, DVector<f64>) {
        let w = theta.as_slice()[..self.n_w].to_vec();
        let f = if self.b > 0 {
            &self.z * theta.rows(self.n_w, self.n_g)
        } else {
            DVector::zeros(0)
        };
        (w, f)
    }

    fn eta(&self, row: &super::design::EpiRow, w: &[f64], f: &DVector<f64>, u_j: f64) -> f64 {
        let mut buf = [0.0; 3];
        self.fill_w(row, &mut buf);
        let mut e = u_j;
        for k in 0..self.n_w {
            e += w[k] * buf[k];
        }
        if self.b > 0 {
            e += f[row.bin];
        }
        e
    }

    /// Negative log posterior, all normalizing constants included.
    fn nlp(&self, theta: &DVector<f64>, u: &[f64], tau: f64) -> f64 {
        let (w, f) = self.split(theta);
        let like = match self.mode {
            FitMode::Stratified => exec::chunked_fold(
                &self.items,
                0.0,
                |chunk| {
                    let mut s = 0.0;
                    for &(idx, st) in chunk {
                        for row in &st.rows {
                            let eta = self.eta(row, &w, &f, u[idx]);
                            let y = row.case as u8 as f64;
                            s += eta.exp() - y * eta;
                        }
                    }
                    s
                },
                |a, b| a + b,
            ),
            FitMode::Conditional => exec::chunked_fold(
                &self.items,
                0.0,
                |chunk| {
                    let mut s = 0.0;
                    for &(_, st) in chunk {
                        let mut mx = f64::NEG_INFINITY;
                        let mut eta_event = 0.0;
                        let etas: Vec<f64> = st
                            .rows
                            .iter()
                            .map(|row| {
                                let e = self.eta(row, &w, &f, 0.0);
                                mx = mx.max(e);
                                if row.case {
                                    eta_event = e;
                                }
                                e
                            })
                            .collect();
                        let total: f64 = etas.iter().map(|&e| (e - mx).exp()).sum();
                        s += mx + total.ln() - eta_event;
                    }
                    s
                },
                |a, b| a + b,
            ),
        };
        let mut out = like;
        for &wk in &w {
            out += wk * wk / (2.0 * self.beta_var);
        }
        out += 0.5 * self.n_w as f64 * (2.0 * std::f64::consts::PI * self.beta_var).ln();
        if self.b > 0 {
            out += super::rw2_neg_log_prior(f.as_slice(), tau);
        }
        if self.mode == FitMode::Stratified {
            for &uj in u {
                out += uj * uj / (2.0 * self.u_var);
            }
            out += 0.5 * u.len() as f64 * (2.0 * std::f64::consts::PI * self.u_var).ln();
        }
        out
    }

    fn accumulate(&self, w: &[f64], f: &DVector<f64>, u: &[f64]) -> Acc {
        exec::chunked_fold(
            &self.items,
            Acc::zero(self.m),
            |chunk| {
                let mut acc = Acc::zero(self.m);
                for &(idx, st) in chunk {
                    match self.mode {
                        FitMode::Stratified => self.stratum_poisson(st, w, f, u[idx], &mut acc),
                        FitMode::Conditional => self.stratum_multinomial(st, w, f, &mut acc),
                    }
                }
                acc
            },
            Acc::merge,
        )
    }

    fn stratum_poisson(&self, st: &Stratum, w: &[f64], f: &DVector<f64>, u_j: f64, acc: &mut Acc) {
        let n_w = self.n_w;
        let mut h_w = [0.0; 3];
        let mut g_w = [0.0; 3];
        let mut mu_bins: Vec<(usize, f64)> = Vec::new();
        let mut g_bins: Vec<(usize, f64)> = Vec::new();
        let mut sum_mu = 0.0;
        let mut sum_resid = 0.0;
        for row in &st.rows {
            let mut buf = [0.0; 3];
            self.fill_w(row, &mut buf);
            let eta = self.eta(row, w, f, u_j);
            let mu = eta.exp();
            let y = row.case as u8 as f64;
            let resid = mu - y;
            acc.nll += mu - y * eta;
            sum_mu += mu;
            sum_resid += resid;
            for k in 0..n_w {
                g_w[k] += resid * buf[k];
                h_w[k] += mu * buf[k];
                for l in 0..n_w {
                    acc.a[(k, l)] += mu * buf[k] * buf[l];
                }
            }
            if self.b > 0 {
                let col = n_w + row.bin;
                acc.a[(col, col)] += mu;
                for k in 0..n_w {
                    let v = mu * buf[k];
                    acc.a[(k, col)] += v;
                    acc.a[(col, k)] += v;
                }
                push_add(&mut mu_bins, row.bin, mu);
                push_add(&mut g_bins, row.bin, resid);
            }
        }
        let g_u_j = sum_resid + u_j / self.u_var;
        let d_jj = sum_mu + 1.0 / self.u_var;
        let mut h: Vec<(usize, f64)> = (0..n_w).map(|k| (k, h_w[k])).collect();
        for &(bin, v) in &mu_bins {
            h.push((n_w + bin, v));
        }
        for &(i, vi) in &h {
            acc.v[i] += vi * g_u_j / d_jj;
            for &(j, vj) in &h {
                acc.c[(i, j)] += vi * vj / d_jj;
            }
        }
        for k in 0..n_w {
            acc.g[k] += g_w[k];
        }
        for &(bin, v) in &g_bins {
            acc.g[n_w + bin] += v;
        }
        acc.g_u.push(g_u_j);
        acc.d.push(d_jj);
        acc.h.push(h);
        acc.logdet_d += d_jj.ln();
    }

    fn stratum_multinomial(&self, st: &Stratum, w: &[f64], f: &DVector<f64>, acc: &mut Acc) {
        let n_w = self.n_w;
        let etas: Vec<f64> = st.rows.iter().map(|r| self.eta(r, w, f, 0.0)).collect();
        let mx = etas.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let total: f64 = etas.iter().map(|&e| (e - mx).exp()).sum();
        let mut r_w = [0.0; 3];
        let mut r_bins: Vec<(usize, f64)> = Vec::new();
        for (row, &eta) in st.rows.iter().zip(&etas) {
            let p = (eta - mx).exp() / total;
            let mut buf = [0.0; 3];
            self.fill_w(row, &mut buf);
            if row.case {
                acc.nll += mx + total.ln() - eta;
                for k in 0..n_w {
                    acc.g[k] -= buf[k];
                }
                if self.b > 0 {
                    acc.g[n_w + row.bin] -= 1.0;
                }
            }
            for k in 0..n_w {
                acc.g[k] += p * buf[k];
                r_w[k] += p * buf[k];
                for l in 0..n_w {
                    acc.a[(k, l)] += p * buf[k] * buf[l];
                }
            }
            if self.b > 0 {
                let col = n_w + row.bin;
                acc.g[col] += p;
                acc.a[(col, col)] += p;
                for k in 0..n_w {
                    let v = p * buf[k];
                    acc.a[(k, col)] += v;
                    acc.a[(col, k)] += v;
                }
                push_add(&mut r_bins, row.bin, p);
            }
        }
        let mut r: Vec<(usize, f64)> = (0..n_w).map(|k| (k, r_w[k])).collect();
        for &(bin, v) in &r_bins {
            r.push((n_w + bin, v));
        }
        for &(i, vi) in &r {
            for &(j, vj) in &r {
                acc.a[(i, j)] -= vi * vj;
            }
        }
    }

    fn grad_hess(&self, theta: &DVector<f64>, u: &[f64], tau: f64) -> Curvature {
        let (w, f) = self.split(theta);
        let acc = self.accumulate(&w, &f, u);
        let mut m_mat = acc.a - acc.c;
        let mut g_f = acc.g;
        for k in 0..self.n_w {
            m_mat[(k, k)] += 1.0 / self.beta_var;
            g_f[k] += w[k] / self.beta_var;
        }
        if self.b > 0 {
            let kf = &self.k_f * &f;
            for i in 0..self.b {
                g_f[self.n_w + i] += tau * kf[i];
                for j in 0..self.b {
                    m_mat[(self.n_w + i, self.n_w + j)] += tau * self.k_f[(i, j)];
                }
            }
        }
        Curvature {
            m_mat,
            g_f,
            v_corr: acc.v,
            g_u: acc.g_u,
            d: acc.d,
            h: acc.h,
            logdet_d: acc.logdet_d,
        }
    }

    /// Projects a covariate-space matrix onto the constrained parameters
    /// (fixed effects unchanged, curve through the sum-to-zero basis).
    fn project_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let (n_w, b, n_g, p) = (self.n_w, self.b, self.n_g, self.p());
        let mut s = DMatrix::zeros(p, p);
        s.view_mut((0, 0), (n_w, n_w))
            .copy_from(&m.view((0, 0), (n_w, n_w)).into_owned());
        if n_g > 0 {
            let wf = m.view((0, n_w), (n_w, b)) * &self.z;
            s.view_mut((0, n_w), (n_w, n_g)).copy_from(&wf);
            s.view_mut((n_w, 0), (n_g, n_w)).copy_from(&wf.transpose());
            let ff = self.z.transpose() * m.view((n_w, n_w), (b, b)) * &self.z;
            s.view_mut((n_w, n_w), (n_g, n_g)).copy_from(&ff);
        }
        s
    }

    fn project_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.p());
        for k in 0..self.n_w {
            out[k] = v[k];
        }
        if self.n_g > 0 {
            let fpart = self.z.transpose() * v.rows(self.n_w, self.b);
            out.rows_mut(self.n_w, self.n_g).copy_from(&fpart);
        }
        out
    }

    fn newton(&self, tau: f64, theta0: DVector<f64>, u0: Vec<f64>) -> Result<GridFit> {
        let mut theta = theta0;
        let mut u = u0;
        let mut nlp_cur = self.nlp(&theta, &u, tau);
        if !nlp_cur.is_finite() {
            return Err(CoreError::NonFinite {
                context: "health model objective at the starting point".into(),
            });
        }
        let mut cur = self.grad_hess(&theta, &u, tau);
        let mut iters = 0;
        loop {
            let g_theta = self.project_vec(&cur.g_f);
            let gnorm = g_theta
                .iter()
                .chain(cur.g_u.iter())
                .fold(0.0f64, |a, &v| a.max(v.abs()));
            if gnorm < self.grad_tol {
                break;
            }
            if iters >= self.max_iter {
                return Err(CoreError::NoConvergence {
                    context: format!("health model map at precision {tau:.3e}"),
                    iters,
                    grad_norm: gnorm,
                });
            }
            let rhs = &g_theta - self.project_vec(&cur.v_corr);
            let s = self.project_mat(&cur.m_mat);
            let chol = jittered_cholesky(s, "health model step")?;
            let d_theta = -chol.solve(&rhs);
            // Direction for the stratum effects follows from back-substitution.
            let mut d_fspace = DVector::zeros(self.m);
            for k in 0..self.n_w {
                d_fspace[k] = d_theta[k];
            }
            if self.n_g > 0 {
                let df = &self.z * d_theta.rows(self.n_w, self.n_g);
                d_fspace.rows_mut(self.n_w, self.b).copy_from(&df);
            }
            let d_u: Vec<f64> = (0..u.len())
                .map(|j| {
                    let coupling: f64 =
                        cur.h[j].iter().map(|&(i, v)| v * d_fspace[i]).sum();
                    -(cur.g_u[j] + coupling) / cur.d[j]
                })
                .collect();
            let decrement = g_theta.dot(&d_theta)
                + cur
                    .g_u
                    .iter()
                    .zip(&d_u)
                    .map(|(g, d)| g * d)
                    .sum::<f64>();
            // At extreme penalty precisions the assembled gradient carries
            // rounding noise above any absolute tolerance; once the predicted
            // improvement is at the floating-point floor the mode is found.
            if decrement > -1e-13 * (1.0 + nlp_cur.abs()) {
                break;
            }
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let theta_t = &theta + t * &d_theta;
                let u_t: Vec<f64> = u.iter().zip(&d_u).map(|(a, d)| a + t * d).collect();
                let nlp_t = self.nlp(&theta_t, &u_t, tau);
                if nlp_t.is_finite() && nlp_t <= nlp_cur + 1e-4 * t * decrement {
                    theta = theta_t;
                    u = u_t;
                    nlp_cur = nlp_t;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                return Err(CoreError::NoConvergence {
                    context: format!(
                        "health model line search stalled at precision {tau:.3e}"
                    ),
                    iters,
                    grad_norm: gnorm,
                });
            }
            iters += 1;
            cur = self.grad_hess(&theta, &u, tau);
        }

        let s = self.project_mat(&cur.m_mat);
        let chol = jittered_cholesky(s, "health model laplace")?;
        let logdet_s = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let cov = chol.inverse();
        let (w, f) = self.split(&theta);
        let w_var: Vec<f64> = (0..self.n_w).map(|k| cov[(k, k)]).collect();
        let f_var: Vec<f64> = if self.n_g > 0 {
            let cov_g = cov.view((self.n_w, self.n_w), (self.n_g, self.n_g));
            let zc = &self.z * cov_g.into_owned();
            (0..self.b)
                .map(|i| {
                    (0..self.n_g)
                        .map(|c| zc[(i, c)] * self.z[(i, c)])
                        .sum::<f64>()
                })
                .collect()
        } else {
            Vec::new()
        };
        let dim = self.p()
            + if self.mode == FitMode::Stratified {
                u.len()
            } else {
                0
            };
        let log_evidence =
            -self.nlp(&theta, &u, tau) - 0.5 * (logdet_s + cur.logdet_d) + 0.5 * dim as f64 * LN_2PI;
        Ok(GridFit {
            tau,
            sd: tau.powf(-0.5),
            theta,
            u,
            w: w.to_vec(),
            w_var,
            f: f.as_slice().to_vec(),
            f_var,
            log_evidence,
        })
    }

    fn coefficient_names(&self) -> Vec<&'static str> {
        let mut names = Vec::new();
        if self.mode == FitMode::Stratified {
            names.push("intercept");
        }
        names.push("holiday");
        if self.has_heatwave {
            names.push("heatwave");
        }
        names
    }
}

fn log_tau_grid(opts: &EpiOptions, rank: usize) -> Vec<f64> {
    if rank == 0 || opts.tau_grid == 1 {
        return vec![opts.log_tau_lo.exp()];
    }
    let n = opts.tau_grid;
    (0..n)
        .map(|i| {
            let frac = i as f64 / (n - 1) as f64;
            (opts.log_tau_lo + frac * (opts.log_tau_hi - opts.log_tau_lo)).exp()
        })
        .collect()
}

/// Fits the health model: Newton MAP per precision grid point, Laplace
/// evidence weighting against the complexity prior, moment-matched
/// summaries. Deterministic given identical inputs; the seed is recorded in
/// the output for provenance.
pub fn fit(data: &EpiDataset, opts: &EpiOptions, seed: u64) -> Result<EpiFit> {
    opts.validate(data)?;
    let engine = Engine::new(data, opts);
    let taus = log_tau_grid(opts, engine.penalty_rank());
    let rate = pc_prior_rate(opts.rw2.pc_u, opts.rw2.pc_alpha);

    let n_u = if opts.mode == FitMode::Stratified {
        data.strata().len()
    } else {
        0
    };
    let mut theta = DVector::zeros(engine.p());
    let mut u = vec![0.0; n_u];
    let mut points = Vec::with_capacity(taus.len());
    for &tau in &taus {
        let gp = engine.newton(tau, theta.clone(), u.clone())?;
        theta = gp.theta.clone();
        u = gp.u.clone();
        points.push(gp);
    }

    let log_w: Vec<f64> = if engine.penalty_rank() == 0 {
        vec![0.0; points.len()]
    } else {
        points
            .iter()
            .map(|p| p.log_evidence + rate.ln() - rate * p.sd + p.sd.ln())
            .collect()
    };
    let mx = log_w.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    if !mx.is_finite() {
        return Err(CoreError::NonFinite {
            context: "precision grid weights".into(),
        });
    }
    let total: f64 = log_w.iter().map(|&v| (v - mx).exp()).sum();
    let weights: Vec<f64> = log_w.iter().map(|&v| (v - mx).exp() / total).collect();

    let mix = |means: &dyn Fn(&GridFit) -> f64, vars: &dyn Fn(&GridFit) -> f64| -> (f64, f64) {
        let mut mean = 0.0;
        let mut second = 0.0;
        for (p, &wk) in points.iter().zip(&weights) {
            let m = means(p);
            mean += wk * m;
            second += wk * (vars(p) + m * m);
        }
        (mean, (second - mean * mean).max(0.0).sqrt())
    };

    let names = engine.coefficient_names();
    let coefficients: Vec<CoefSummary> = names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let (mean, sd) = mix(&|p| p.w[k], &|p| p.w_var[k]);
            CoefSummary {
                name: name.to_string(),
                mean,
                sd,
                lo: mean - Z95 * sd,
                hi: mean + Z95 * sd,
            }
        })
        .collect();

    let b = engine.b;
    let mut f_mean = Vec::with_capacity(b);
    let mut f_sd = Vec::with_capacity(b);
    let mut f_lo = Vec::with_capacity(b);
    let mut f_hi = Vec::with_capacity(b);
    for i in 0..b {
        let (mean, sd) = mix(&|p| p.f[i], &|p| p.f_var[i]);
        f_mean.push(mean);
        f_sd.push(sd);
        f_lo.push(mean - Z95 * sd);
        f_hi.push(mean + Z95 * sd);
    }

    let best = weights
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("grid is nonempty");
    let bp = &points[best];
    let hol_idx = if opts.mode == FitMode::Stratified { 1 } else { 0 };
    let map_state = EpiModelState {
        beta0: if opts.mode == FitMode::Stratified {
            bp.w[0]
        } else {
            0.0
        },
        beta_holiday: bp.w[hol_idx],
        beta_heatwave: engine.has_heatwave.then(|| bp.w[hol_idx + 1]),
        f: bp.f.clone(),
        stratum_effects: bp.u.clone(),
        tau_x: bp.tau,
    };

    let separation: Vec<String> = coefficients
        .iter()
        .filter(|c| c.mean.abs() > 15.0)
        .map(|c| c.name.clone())
        .collect();

    Ok(EpiFit {
        mode: opts.mode,
        include_temperature: opts.include_temperature,
        binning: data.binning().clone(),
        coefficients,
        f_mean,
        f_sd,
        f_lo,
        f_hi,
        tau_grid: taus,
        tau_weights: weights,
        map_state,
        separation,
        n_strata: data.strata().len(),
        n_rows: data.n_rows(),
        seed,
    })
}

/// Full negative log posterior at a flat parameter vector
/// `[fixed effects | curve coordinates | stratum effects]` (the last block
/// only under [`FitMode::Stratified`]). Exposed for derivative checks.
pub fn neg_log_posterior(
    data: &EpiDataset,
    opts: &EpiOptions,
    tau: f64,
    flat: &[f64],
) -> Result<f64> {
    opts.validate(data)?;
    let engine = Engine::new(data, opts);
    let n_u = if opts.mode == FitMode::Stratified {
        data.strata().len()
    } else {
        0
    };
    let want = engine.p() + n_u;
    if flat.len() != want {
        return Err(CoreError::LengthMismatch {
            context: "flat health model parameters".into(),
            got: flat.len(),
            want,
        });
    }
    let theta = DVector::from_column_slice(&flat[..engine.p()]);
    Ok(engine.nlp(&theta, &flat[engine.p()..], tau))
}

/// Analytic gradient of [`neg_log_posterior`] in the same flat layout.
pub fn neg_log_posterior_grad(
    data: &EpiDataset,
    opts: &EpiOptions,
    tau: f64,
    flat: &[f64],
) -> Result<Vec<f64>> {
    opts.validate(data)?;
    let engine = Engine::new(data, opts);
    let n_u = if opts.mode == FitMode::Stratified {
        data.strata().len()
    } else {
        0
    };
    let want = engine.p() + n_u;
    if flat.len() != want {
        return Err(CoreError::LengthMismatch {
            context: "flat health model parameters".into(),
            got: flat.len(),
            want,
        });
    }
    let theta = DVector::from_column_slice(&flat[..engine.p()]);
    let cur = engine.grad_hess(&theta, &flat[engine.p()..], tau);
    let mut out = engine.project_vec(&cur.g_f).as_slice().to_vec();
    out.extend(cur.g_u);
    Ok(out)
}

/// Fits one model per heatwave definition and tabulates `exp(b_hw)`.
/// Constant flag columns are skipped rather than fitted.
pub fn fit_heatwave_models(
    rows: &[CcoRow],
    exposure_key: &str,
    specs: &[String],
    include_temperature: bool,
    opts: &EpiOptions,
    seed: u64,
) -> Result<Vec<HeatwaveModelResult>> {
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut flagged = 0usize;
        for r in rows {
            let f = r.heatwave.get(spec).ok_or_else(|| {
                CoreError::MissingExposure(format!(
                    "row {} {} lacks heatwave flag {spec}",
                    r.stratum, r.date
                ))
            })?;
            flagged += *f as usize;
        }
        let prevalence = flagged as f64 / rows.len().max(1) as f64;
        if flagged == 0 || flagged == rows.len() {
            out.push(HeatwaveModelResult {
                spec_id: spec.clone(),
                prevalence,
                skipped: true,
                log_rr: None,
                rr: None,
            });
            continue;
        }
        let data = EpiDataset::from_cco_rows(rows, exposure_key, Some(spec), opts.rw2.n_bins)?;
        let mut o = opts.clone();
        o.include_temperature = include_temperature;
        let fitres = fit(&data, &o, seed)?;
        let coef = fitres
            .coefficient("heatwave")
            .expect("heatwave column was present")
            .clone();
        out.push(HeatwaveModelResult {
            spec_id: spec.clone(),
            prevalence,
            skipped: false,
            rr: Some(RrInterval {
                rr: coef.mean.exp(),
                lo: coef.lo.exp(),
                hi: coef.hi.exp(),
            }),
            log_rr: Some(coef),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::epi::design::EpiRow;
    use chrono::NaiveDate;
    use rand::Rng;
    use std::collections::BTreeMap;

    struct Truth {
        slope: f64,
        kink: f64,
        hol: f64,
        hw: f64,
    }

    impl Truth {
        fn null() -> Self {
            Self {
                slope: 0.0,
                kink: 0.0,
                hol: 0.0,
                hw: 0.0,
            }
        }
    }

    fn quant(x: f64) -> f64 {
        (x * 256.0).round() / 256.0
    }

    /// Draws strata whose event row follows the conditional model exactly.
    /// `offset` shifts every exposure after quantization, so shifted and
    /// unshifted datasets differ by an exact constant.
    #[allow(clippy::too_many_arguments)]
    fn simulate(
        n_strata: usize,
        n_bins: usize,
        lo: f64,
        hi: f64,
        truth: &Truth,
        hol_p: f64,
        hw_p: f64,
        offset: f64,
        seed: u64,
        name: &str,
    ) -> EpiDataset {
        let mut rng = crate::rng::substream(seed, name);
        let mut raw: Vec<Vec<(f64, bool, bool)>> = Vec::with_capacity(n_strata);
        let mut xs = Vec::new();
        for _ in 0..n_strata {
            let n = rng.gen_range(3..=5);
            let rows: Vec<(f64, bool, bool)> = (0..n)
                .map(|_| {
                    let x = quant(rng.gen_range(lo..hi)) + offset;
                    let hol = hol_p > 0.0 && rng.gen_bool(hol_p);
                    let hw = hw_p > 0.0 && rng.gen_bool(hw_p);
                    (x, hol, hw)
                })
                .collect();
            xs.extend(rows.iter().map(|r| r.0));
            raw.push(rows);
        }
        let binning = Binning::from_observed(xs.iter().copied(), n_bins).unwrap();
        let has_hw = hw_p > 0.0;
        let strata = raw
            .into_iter()
            .enumerate()
            .map(|(i, rows)| {
                let etas: Vec<f64> = rows
                    .iter()
                    .map(|&(x, hol, hw)| {
                        truth.slope * (x - offset - truth.kink).max(0.0)
                            + truth.hol * hol as u8 as f64
                            + truth.hw * hw as u8 as f64
                    })
                    .collect();
                let mx = etas.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                let ws: Vec<f64> = etas.iter().map(|&e| (e - mx).exp()).collect();
                let total: f64 = ws.iter().sum();
                let mut pick = rng.gen_range(0.0..total);
                let mut event = ws.len() - 1;
                for (k, w) in ws.iter().enumerate() {
                    if pick < *w {
                        event = k;
                        break;
                    }
                    pick -= w;
                }
                Stratum {
                    id: format!("s{i:05}"),
                    rows: rows
                        .iter()
                        .enumerate()
                        .map(|(k, &(x, hol, hw))| EpiRow {
                            bin: binning.bin_of(x),
                            holiday: hol,
                            heatwave: hw,
                            case: k == event,
                        })
                        .collect(),
                }
            })
            .collect();
        EpiDataset::new(strata, binning, has_hw).unwrap()
    }

    fn opts_with_bins(mode: FitMode, n_bins: usize) -> EpiOptions {
        EpiOptions {
            mode,
            rw2: Rw2EffectSpec {
                n_bins,
                ..Rw2EffectSpec::default()
            },
            ..EpiOptions::default()
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let truth = Truth {
            slope: 0.02,
            kink: 20.0,
            hol: -0.1,
            hw: 0.05,
        };
        let data = simulate(40, 8, 10.0, 30.0, &truth, 0.2, 0.2, 0.0, 5, "epi-grad");
        for mode in [FitMode::Stratified, FitMode::Conditional] {
            let opts = opts_with_bins(mode, 8);
            let n_u = if mode == FitMode::Stratified {
                data.strata().len()
            } else {
                0
            };
            let n_w = if mode == FitMode::Stratified { 3 } else { 2 };
            let dim = n_w + 7 + n_u;
            let mut rng = crate::rng::substream(17, "epi-grad-points");
            let tau = 37.0;
            for _ in 0..5 {
                let flat: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.2..0.2)).collect();
                let analytic = neg_log_posterior_grad(&data, &opts, tau, &flat).unwrap();
                let h = 1e-5;
                for i in 0..dim {
                    let mut up = flat.clone();
                    up[i] += h;
                    let mut dn = flat.clone();
                    dn[i] -= h;
                    let fd = (neg_log_posterior(&data, &opts, tau, &up).unwrap()
                        - neg_log_posterior(&data, &opts, tau, &dn).unwrap())
                        / (2.0 * h);
                    let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
                    assert!(
                        rel < 1e-5,
                        "mode {mode:?} coord {i}: analytic {} fd {fd}",
                        analytic[i]
                    );
                }
            }
        }
    }

    #[test]
    fn two_bin_curve_matches_a_conditional_logit_oracle() {
        let truth = Truth {
            slope: 1.2,
            kink: 0.5,
            hol: -0.25,
            hw: 0.0,
        };
        let data = simulate(300, 2, 0.0, 1.0, &truth, 0.25, 0.0, 0.0, 21, "epi-twobin");
        let fit_res = fit(&data, &opts_with_bins(FitMode::Conditional, 2), 0).unwrap();

        // Direct two-parameter Newton on the same likelihood and priors:
        // a high-bin contrast with a flat prior (the two-bin walk carries no
        // penalty) plus the holiday effect under N(0, 1000).
        let mut delta = 0.0f64;
        let mut bh = 0.0f64;
        for _ in 0..100 {
            let mut g = [0.0f64; 2];
            let mut hmat = [[0.0f64; 2]; 2];
            for st in data.strata() {
                let xs: Vec<[f64; 2]> = st
                    .rows
                    .iter()
                    .map(|r| [(r.bin == 1) as u8 as f64, r.holiday as u8 as f64])
                    .collect();
                let etas: Vec<f64> = xs.iter().map(|x| delta * x[0] + bh * x[1]).collect();
                let mx = etas.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                let total: f64 = etas.iter().map(|&e| (e - mx).exp()).sum();
                let mut r = [0.0f64; 2];
                for ((x, &eta), row) in xs.iter().zip(&etas).zip(&st.rows) {
                    let p = (eta - mx).exp() / total;
                    for a in 0..2 {
                        g[a] += p * x[a];
                        r[a] += p * x[a];
                        for b in 0..2 {
                            hmat[a][b] += p * x[a] * x[b];
                        }
                    }
                    if row.case {
                        for a in 0..2 {
                            g[a] -= x[a];
                        }
                    }
                }
                for a in 0..2 {
                    for b in 0..2 {
                        hmat[a][b] -= r[a] * r[b];
                    }
                }
            }
            g[1] += bh / 1000.0;
            hmat[1][1] += 1.0 / 1000.0;
            let det = hmat[0][0] * hmat[1][1] - hmat[0][1] * hmat[1][0];
            let step = [
                (hmat[1][1] * g[0] - hmat[0][1] * g[1]) / det,
                (hmat[0][0] * g[1] - hmat[1][0] * g[0]) / det,
            ];
            delta -= step[0];
            bh -= step[1];
            if g[0].abs().max(g[1].abs()) < 1e-12 {
                break;
            }
        }

        let contrast = fit_res.f_mean[1] - fit_res.f_mean[0];
        assert!(
            (contrast - delta).abs() < 1e-6,
            "contrast {contrast} oracle {delta}"
        );
        let hol = fit_res.coefficient("holiday").unwrap();
        assert!((hol.mean - bh).abs() < 1e-6, "holiday {} oracle {bh}", hol.mean);
    }

    #[test]
    fn null_simulation_covers_zero_almost_everywhere() {
        let data = simulate(
            1500,
            15,
            15.0,
            35.0,
            &Truth::null(),
            0.05,
            0.1,
            0.0,
            33,
            "epi-null",
        );
        let fit_res = fit(&data, &opts_with_bins(FitMode::Stratified, 15), 0).unwrap();
        let covered = (0..15)
            .filter(|&b| fit_res.f_lo[b] <= 0.0 && 0.0 <= fit_res.f_hi[b])
            .count();
        assert!(covered as f64 >= 0.9 * 15.0, "only {covered}/15 bins cover zero");
        assert!(fit_res.coefficient("holiday").unwrap().covers(0.0));
        assert!(fit_res.coefficient("heatwave").unwrap().covers(0.0));
        assert!(fit_res.separation.is_empty());
    }

    #[test]
    fn slope_and_fixed_effects_are_recovered() {
        let truth = Truth {
            slope: 0.03,
            kink: 28.0,
            hol: 0.89f64.ln(),
            hw: 1.05f64.ln(),
        };
        let data = simulate(2500, 30, 16.0, 36.0, &truth, 0.08, 0.12, 0.0, 41, "epi-slope");
        let fit_res = fit(&data, &opts_with_bins(FitMode::Stratified, 30), 0).unwrap();

        let mids = data.binning().midpoints();
        let pts: Vec<(f64, f64)> = mids
            .iter()
            .zip(&fit_res.f_mean)
            .filter(|(m, _)| **m >= 28.0 && **m <= 34.0)
            .map(|(m, f)| (*m, *f))
            .collect();
        assert!(pts.len() >= 5);
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        assert!(
            (slope - 0.03).abs() <= 0.02,
            "fitted slope {slope} vs truth 0.03"
        );
        assert!(fit_res.coefficient("holiday").unwrap().covers(0.89f64.ln()));
        assert!(fit_res.coefficient("heatwave").unwrap().covers(1.05f64.ln()));

        let curve = fit_res.risk_curve().unwrap();
        let mmt_bin = curve
            .bin_mid
            .iter()
            .position(|&m| m == curve.mmt)
            .expect("mmt is a bin midpoint");
        assert_eq!(curve.rr_norm[mmt_bin], 1.0);
        for b in 0..30 {
            assert!(curve.logrr_lo[b] <= curve.logrr_med[b]);
            assert!(curve.logrr_med[b] <= curve.logrr_hi[b]);
            assert!(curve.rr_norm[b] >= 1.0);
        }
    }

    #[test]
    fn stratified_and_conditional_paths_agree() {
        let truth = Truth {
            slope: 0.0,
            kink: 0.0,
            hol: -0.2,
            hw: 0.0,
        };
        let data = simulate(800, 10, 20.0, 30.0, &truth, 0.2, 0.0, 0.0, 55, "epi-paths");
        let strat = fit(&data, &opts_with_bins(FitMode::Stratified, 10), 0).unwrap();
        let cond = fit(&data, &opts_with_bins(FitMode::Conditional, 10), 0).unwrap();
        let hs = strat.coefficient("holiday").unwrap().mean;
        let hc = cond.coefficient("holiday").unwrap().mean;
        assert!((hs - hc).abs() < 0.05, "stratified {hs} conditional {hc}");
        for b in 0..10 {
            assert!((strat.f_mean[b] - cond.f_mean[b]).abs() < 0.1);
        }
    }

    #[test]
    fn exposure_shift_moves_only_the_axis() {
        let truth = Truth {
            slope: 0.04,
            kink: 24.0,
            hol: -0.1,
            hw: 0.0,
        };
        let base = simulate(600, 12, 18.0, 30.0, &truth, 0.1, 0.0, 0.0, 61, "epi-shift");
        let moved = simulate(600, 12, 18.0, 30.0, &truth, 0.1, 0.0, 64.0, 61, "epi-shift");
        let fit_a = fit(&base, &opts_with_bins(FitMode::Stratified, 12), 0).unwrap();
        let fit_b = fit(&moved, &opts_with_bins(FitMode::Stratified, 12), 0).unwrap();
        for b in 0..12 {
            assert_eq!(fit_a.f_mean[b].to_bits(), fit_b.f_mean[b].to_bits());
        }
        let ca = fit_a.risk_curve().unwrap();
        let cb = fit_b.risk_curve().unwrap();
        for b in 0..12 {
            assert_eq!(ca.rr_norm[b].to_bits(), cb.rr_norm[b].to_bits());
            assert!((cb.bin_mid[b] - ca.bin_mid[b] - 64.0).abs() < 1e-9);
        }
        assert!((cb.mmt - ca.mmt - 64.0).abs() < 1e-9);
    }

    #[test]
    fn heatwave_tables_skip_degenerate_columns() {
        let mut rng = crate::rng::substream(71, "epi-hw-table");
        let mut rows = Vec::new();
        for j in 0..80 {
            for i in 0..4 {
                let base_flag = rng.gen_bool(0.3);
                let mut heatwave = BTreeMap::new();
                heatwave.insert("base".to_string(), base_flag);
                heatwave.insert("lag".to_string(), base_flag && i % 2 == 0);
                heatwave.insert("never".to_string(), false);
                let mut exposure = BTreeMap::new();
                exposure.insert("m".to_string(), rng.gen_range(15.0..35.0));
                rows.push(CcoRow {
                    stratum: format!("st{j:03}"),
                    case: i == 0,
                    date: NaiveDate::from_ymd_opt(2015, 7, 1 + i as u32).unwrap(),
                    municipality: crate::types::MunicipalityId::new("m1"),
                    exposure,
                    heatwave,
                    holiday: rng.gen_bool(0.05),
                });
            }
        }
        let specs = vec!["base".to_string(), "lag".to_string(), "never".to_string()];
        let opts = opts_with_bins(FitMode::Stratified, 10);
        let table = fit_heatwave_models(&rows, "m", &specs, false, &opts, 3).unwrap();
        assert_eq!(table.len(), 3);
        assert!(!table[0].skipped && table[0].rr.is_some());
        assert!(!table[1].skipped && table[1].rr.is_some());
        assert!(table[2].skipped && table[2].rr.is_none());
        assert!(table[0].prevalence >= table[1].prevalence);
        assert!(table[1].prevalence > table[2].prevalence);
        assert_eq!(table[2].prevalence, 0.0);
        let lr = table[0].log_rr.as_ref().unwrap();
        let rr = table[0].rr.as_ref().unwrap();
        assert!((rr.rr - lr.mean.exp()).abs() < 1e-12);
        assert!(rr.lo <= rr.rr && rr.rr <= rr.hi);
    }

    #[test]
    fn risk_curve_normalizes_at_the_minimum() {
        let binning = Binning::from_observed([0.0, 81.0], 81).unwrap();
        let f_med: Vec<f64> = (0..81).map(|b| 0.001 * ((b as f64) - 40.0).powi(2)).collect();
        let f_lo: Vec<f64> = f_med.iter().map(|v| v - 0.1).collect();
        let f_hi: Vec<f64> = f_med.iter().map(|v| v + 0.1).collect();
        let curve = risk_curve_from(&binning, &f_med, &f_lo, &f_hi).unwrap();
        assert_eq!(curve.mmt, binning.midpoint(40));
        assert_eq!(curve.rr_norm[40], 1.0);
        assert!(curve.rr_norm.iter().all(|&r| r >= 1.0));
        assert!(risk_curve_from(&binning, &f_med[..5], &f_lo[..5], &f_hi[..5]).is_err());
        let bad_hi: Vec<f64> = f_med.iter().map(|v| v - 1.0).collect();
        assert!(risk_curve_from(&binning, &f_med, &f_lo, &bad_hi).is_err());
    }

    #[test]
    fn option_validation_rejects_inconsistent_setups() {
        let data = simulate(
            20,
            6,
            0.0,
            10.0,
            &Truth::null(),
            0.1,
            0.0,
            0.0,
            81,
            "epi-opts",
        );
        let mut opts = opts_with_bins(FitMode::Stratified, 7);
        assert!(fit(&data, &opts, 0).is_err());
        opts.rw2.n_bins = 6;
        opts.tau_grid = 0;
        assert!(fit(&data, &opts, 0).is_err());
        opts.tau_grid = 25;
        opts.rw2.sum_to_zero = false;
        assert!(fit(&data, &opts, 0).is_err());
        opts.rw2.sum_to_zero = true;
        assert!(fit(&data, &opts, 0).is_ok());
    }
}
