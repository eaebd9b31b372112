//! Exposure binning and stratum layout for the health model.
//!
//! Continuous exposure is discretized to equal-width bins over the pooled
//! observed range; each case-crossover stratum becomes a small block of rows
//! (one event, its matched controls) carrying bin index, holiday flag and an
//! optional heatwave flag. The binned effect curve lives on the sum-to-zero
//! subspace, for which [`sum_to_zero_basis`] supplies an orthonormal basis.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::casecrossover::CcoRow;
use crate::error::{CoreError, Result};

/// Equal-width discretization of an observed exposure range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    lo: f64,
    width: f64,
    n_bins: usize,
}

impl Binning {
    /// Spans the min..max of `values` with `n_bins` equal-width bins.
    pub fn from_observed<I: IntoIterator<Item = f64>>(values: I, n_bins: usize) -> Result<Self> {
        if n_bins < 2 {
            return Err(CoreError::InvalidConfig(
                "exposure binning needs at least 2 bins".into(),
            ));
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut seen = 0usize;
        for v in values {
            if !v.is_finite() {
                return Err(CoreError::NonFinite {
                    context: "exposure binning".into(),
                });
            }
            lo = lo.min(v);
            hi = hi.max(v);
            seen += 1;
        }
        if seen == 0 {
            return Err(CoreError::EmptySelection {
                rule: "exposure binning over an empty series".into(),
            });
        }
        if hi <= lo {
            return Err(CoreError::InvalidConfig(
                "exposure range has zero width, cannot bin".into(),
            ));
        }
        Ok(Self {
            lo,
            width: (hi - lo) / n_bins as f64,
            n_bins,
        })
    }

    /// Bin index for `x`, clamped into `0..n_bins` so values at or beyond the
    /// range edges land in the outermost bins.
    pub fn bin_of(&self, x: f64) -> usize {
        let raw = ((x - self.lo) / self.width).floor();
        if raw < 0.0 {
            0
        } else {
            (raw as usize).min(self.n_bins - 1)
        }
    }

    pub fn midpoint(&self, bin: usize) -> f64 {
        self.lo + (bin as f64 + 0.5) * self.width
    }

    pub fn midpoints(&self) -> Vec<f64> {
        (0..self.n_bins).map(|b| self.midpoint(b)).collect()
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.lo + self.width * self.n_bins as f64
    }

    pub fn width(&self) -> f64 {
        self.width
    }
}

/// Orthonormal basis of the sum-to-zero subspace of `R^b` (Helmert columns),
/// returned as a `b x (b - 1)` matrix. Columns are mutually orthonormal and
/// each sums to zero, so `f = Z g` enumerates exactly the mean-zero curves.
pub(crate) fn sum_to_zero_basis(b: usize) -> DMatrix<f64> {
    let cols = b.saturating_sub(1);
    let mut z = DMatrix::zeros(b, cols);
    for k in 1..b {
        let norm = 1.0 / ((k * (k + 1)) as f64).sqrt();
        for i in 0..k {
            z[(i, k - 1)] = norm;
        }
        z[(k, k - 1)] = -(k as f64) * norm;
    }
    z
}

/// Second-difference penalty matrix `D' D` (`b x b`), zero when `b < 3`.
/// Quadratic form `f' K f` equals the sum of squared second differences.
pub(crate) fn rw2_penalty_matrix(b: usize) -> DMatrix<f64> {
    let mut k = DMatrix::zeros(b, b);
    if b < 3 {
        return k;
    }
    for r in 0..b - 2 {
        let stencil = [(r, 1.0), (r + 1, -2.0), (r + 2, 1.0)];
        for &(i, wi) in &stencil {
            for &(j, wj) in &stencil {
                k[(i, j)] += wi * wj;
            }
        }
    }
    k
}

/// One day in a stratum: bin of the lagged exposure, the two binary
/// covariates, and whether this row is the event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpiRow {
    pub bin: usize,
    pub holiday: bool,
    pub heatwave: bool,
    pub case: bool,
}

/// One event day plus its matched control days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub id: String,
    pub rows: Vec<EpiRow>,
}

/// A full case-crossover dataset, binned and grouped by stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpiDataset {
    strata: Vec<Stratum>,
    binning: Binning,
    has_heatwave: bool,
}

impl EpiDataset {
    /// Validates the stratum structure: at least one stratum, every stratum
    /// at least two rows with exactly one event, bin indices in range.
    pub fn new(strata: Vec<Stratum>, binning: Binning, has_heatwave: bool) -> Result<Self> {
        if strata.is_empty() {
            return Err(CoreError::EmptySelection {
                rule: "health model dataset with no strata".into(),
            });
        }
        for s in &strata {
            if s.rows.len() < 2 {
                return Err(CoreError::InvalidConfig(format!(
                    "stratum {} has {} rows, need at least 2",
                    s.id,
                    s.rows.len()
                )));
            }
            let cases = s.rows.iter().filter(|r| r.case).count();
            if cases != 1 {
                return Err(CoreError::InvalidConfig(format!(
                    "stratum {} has {cases} event rows, expected exactly 1",
                    s.id
                )));
            }
            if let Some(r) = s.rows.iter().find(|r| r.bin >= binning.n_bins()) {
                return Err(CoreError::InvalidConfig(format!(
                    "stratum {}: bin index {} out of range for {} bins",
                    s.id,
                    r.bin,
                    binning.n_bins()
                )));
            }
        }
        Ok(Self {
            strata,
            binning,
            has_heatwave,
        })
    }

    /// Groups prepared case-crossover rows into strata and bins the named
    /// lagged exposure over its pooled observed range. When `heatwave_key`
    /// is given, every row must carry that flag.
    pub fn from_cco_rows(
        rows: &[CcoRow],
        exposure_key: &str,
        heatwave_key: Option<&str>,
        n_bins: usize,
    ) -> Result<Self> {
        let mut exposures = Vec::with_capacity(rows.len());
        for r in rows {
            let x = r.exposure.get(exposure_key).ok_or_else(|| {
                CoreError::MissingExposure(format!(
                    "row {} {} lacks exposure column {exposure_key}",
                    r.stratum, r.date
                ))
            })?;
            exposures.push(*x);
        }
        let binning = Binning::from_observed(exposures.iter().copied(), n_bins)?;

        let mut grouped: BTreeMap<&str, Vec<EpiRow>> = BTreeMap::new();
        for (r, &x) in rows.iter().zip(&exposures) {
            let heatwave = match heatwave_key {
                Some(key) => *r.heatwave.get(key).ok_or_else(|| {
                    CoreError::MissingExposure(format!(
                        "row {} {} lacks heatwave flag {key}",
                        r.stratum, r.date
                    ))
                })?,
                None => false,
            };
            grouped.entry(&r.stratum).or_default().push(EpiRow {
                bin: binning.bin_of(x),
                holiday: r.holiday,
                heatwave,
                case: r.case,
            });
        }
        let strata = grouped
            .into_iter()
            .map(|(id, rows)| Stratum {
                id: id.to_string(),
                rows,
            })
            .collect();
        Self::new(strata, binning, heatwave_key.is_some())
    }

    pub fn strata(&self) -> &[Stratum] {
        &self.strata
    }

    pub fn binning(&self) -> &Binning {
        &self.binning
    }

    pub fn has_heatwave(&self) -> bool {
        self.has_heatwave
    }

    pub fn n_rows(&self) -> usize {
        self.strata.iter().map(|s| s.rows.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_cover_the_observed_range() {
        let b = Binning::from_observed([10.0, 20.0, 30.0], 4).unwrap();
        assert_eq!(b.n_bins(), 4);
        assert!((b.width() - 5.0).abs() < 1e-12);
        assert_eq!(b.bin_of(10.0), 0);
        assert_eq!(b.bin_of(14.999), 0);
        assert_eq!(b.bin_of(15.0), 1);
        assert_eq!(b.bin_of(30.0), 3);
        assert_eq!(b.bin_of(-5.0), 0);
        assert_eq!(b.bin_of(99.0), 3);
        assert!((b.midpoint(0) - 12.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_ranges_are_rejected() {
        assert!(Binning::from_observed(std::iter::empty(), 4).is_err());
        assert!(Binning::from_observed([7.0, 7.0], 4).is_err());
        assert!(Binning::from_observed([1.0, 2.0], 1).is_err());
        assert!(Binning::from_observed([1.0, f64::NAN], 4).is_err());
    }

    #[test]
    fn helmert_columns_are_orthonormal_and_mean_zero() {
        for b in [2usize, 5, 17] {
            let z = sum_to_zero_basis(b);
            assert_eq!(z.shape(), (b, b - 1));
            let ztz = z.transpose() * &z;
            for i in 0..b - 1 {
                for j in 0..b - 1 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((ztz[(i, j)] - want).abs() < 1e-12);
                }
            }
            for c in 0..b - 1 {
                assert!(z.column(c).sum().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn penalty_matrix_matches_direct_second_differences() {
        let b = 7;
        let k = rw2_penalty_matrix(b);
        let f: Vec<f64> = (0..b).map(|i| ((i * i) as f64).sin() + 0.3 * i as f64).collect();
        let quad: f64 = (2..b)
            .map(|i| {
                let d = f[i] - 2.0 * f[i - 1] + f[i - 2];
                d * d
            })
            .sum();
        let fv = nalgebra::DVector::from_vec(f);
        let via_k = (fv.transpose() * &k * &fv)[(0, 0)];
        assert!((quad - via_k).abs() < 1e-12);
        assert!(rw2_penalty_matrix(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stratum_validation_catches_malformed_groups() {
        let binning = Binning::from_observed([0.0, 1.0], 2).unwrap();
        let row = |case| EpiRow {
            bin: 0,
            holiday: false,
            heatwave: false,
            case,
        };
        let ok = Stratum {
            id: "a".into(),
            rows: vec![row(true), row(false)],
        };
        assert!(EpiDataset::new(vec![ok.clone()], binning.clone(), false).is_ok());
        let no_case = Stratum {
            id: "b".into(),
            rows: vec![row(false), row(false)],
        };
        assert!(EpiDataset::new(vec![no_case], binning.clone(), false).is_err());
        let single = Stratum {
            id: "c".into(),
            rows: vec![row(true)],
        };
        assert!(EpiDataset::new(vec![single], binning.clone(), false).is_err());
        assert!(EpiDataset::new(vec![], binning, false).is_err());
    }
}
