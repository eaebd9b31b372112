//! Observation table for the quantile autoregression.
//!
//! Each usable row pairs a day with its predecessor in the same site, year
//! and season; the first day of a season never forms a row of its own. The
//! response is shifted by the nearest integer to the panel mean so that
//! adding an integer constant to every observation changes nothing but the
//! reported intercept: with data on a dyadic grid both shifts are exact in
//! floating point, and the chain consumes bitwise-identical numbers.

use super::PanelData;
use crate::error::{CoreError, Result};
use std::ops::Range;

#[derive(Debug, Clone, Copy)]
pub struct ObsRow {
    pub site: u32,
    pub year: u32,
    /// 0-based day within the season; always >= 1.
    pub day: u32,
    /// Centered response and its previous-day value.
    pub y: f64,
    pub y_prev: f64,
}

#[derive(Debug)]
pub struct Design {
    /// Rows sorted by site, then year, then day.
    pub rows: Vec<ObsRow>,
    /// Row range of each site within `rows`.
    pub site_ranges: Vec<Range<usize>>,
    pub n_sites: usize,
    pub n_years: usize,
    pub season_len: usize,
    /// Standardized covariate per site.
    pub alt: Vec<f64>,
    /// Centered year index per year.
    pub year_centered: Vec<f64>,
    /// Seasonal harmonics per 0-based day.
    pub sin_day: Vec<f64>,
    pub cos_day: Vec<f64>,
    /// Integer shift subtracted from the response.
    pub center: f64,
    /// Pairwise site distances.
    pub dist: Vec<f64>,
    /// Decay prior support from the nonzero distances.
    pub decay_lo: f64,
    pub decay_hi: f64,
}

impl Design {
    pub fn dist_at(&self, i: usize, j: usize) -> f64 {
        self.dist[i * self.n_sites + j]
    }
}

pub fn build_design(data: &PanelData) -> Result<Design> {
    data.validate()?;
    let n = data.sites.len();

    let mut sum = 0.0;
    let mut count = 0usize;
    for v in data.y.iter().flatten() {
        sum += v;
        count += 1;
    }
    if count == 0 {
        return Err(CoreError::EmptySelection {
            rule: "panel has no observed values".into(),
        });
    }
    let center = (sum / count as f64).round();

    let mut rows = Vec::new();
    let mut site_ranges = Vec::with_capacity(n);
    for site in 0..n {
        let start = rows.len();
        for year in 0..data.n_years {
            for day in 1..data.season_len {
                let (Some(y), Some(y_prev)) =
                    (data.value(site, year, day), data.value(site, year, day - 1))
                else {
                    continue;
                };
                rows.push(ObsRow {
                    site: site as u32,
                    year: year as u32,
                    day: day as u32,
                    y: y - center,
                    y_prev: y_prev - center,
                });
            }
        }
        site_ranges.push(start..rows.len());
    }
    if rows.is_empty() {
        return Err(CoreError::EmptySelection {
            rule: "no consecutive-day pairs in panel".into(),
        });
    }

    let year_centered: Vec<f64> = (0..data.n_years)
        .map(|t| (t as f64 + 1.0) - (data.n_years as f64 + 1.0) / 2.0)
        .collect();

    // Harmonics use the 1-based day of season.
    let two_pi = 2.0 * std::f64::consts::PI;
    let sin_day: Vec<f64> = (0..data.season_len)
        .map(|d| (two_pi * (d as f64 + 1.0) / 365.0).sin())
        .collect();
    let cos_day: Vec<f64> = (0..data.season_len)
        .map(|d| (two_pi * (d as f64 + 1.0) / 365.0).cos())
        .collect();

    let mut dist = vec![0.0; n * n];
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = data.sites[i].dist(&data.sites[j]);
            dist[i * n + j] = d;
            if i != j {
                lo = lo.min(d);
                hi = hi.max(d);
            }
        }
    }

    Ok(Design {
        rows,
        site_ranges,
        n_sites: n,
        n_years: data.n_years,
        season_len: data.season_len,
        alt: data.alt.clone(),
        year_centered,
        sin_day,
        cos_day,
        center,
        dist,
        decay_lo: 3.0 / hi,
        decay_hi: 3.0 / lo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;

    fn panel() -> PanelData {
        let sites = vec![
            Point { x: 0.0, y: 0.0 },
            Point { x: 30.0, y: 0.0 },
            Point { x: 0.0, y: 40.0 },
        ];
        let mut y = Vec::new();
        for s in 0..3 {
            for t in 0..2 {
                for d in 0..5 {
                    let v = 20.0 + s as f64 + t as f64 * 0.5 + d as f64 * 0.1;
                    y.push(Some(v));
                }
            }
        }
        PanelData {
            sites,
            alt: vec![-0.5, 0.0, 0.5],
            n_years: 2,
            season_len: 5,
            y,
        }
    }

    #[test]
    fn rows_skip_first_day_and_gaps() {
        let mut p = panel();
        // Knock out day 2 of site 0 year 0: kills rows for days 2 and 3.
        p.y[2] = None;
        let d = build_design(&p).unwrap();
        // Full site-year contributes 4 rows; site 0 year 0 contributes 2.
        assert_eq!(d.rows.len(), 4 * 5 + 2);
        assert_eq!(d.site_ranges.len(), 3);
        assert_eq!(d.site_ranges[0], 0..6);
        for r in &d.rows[d.site_ranges[1].clone()] {
            assert_eq!(r.site, 1);
            assert!(r.day >= 1);
        }
    }

    #[test]
    fn centering_is_integer_and_reversible() {
        let p = panel();
        let d = build_design(&p).unwrap();
        assert_eq!(d.center, d.center.round());
        let raw = p.value(1, 0, 2).unwrap();
        let row = d.rows[d.site_ranges[1].clone()]
            .iter()
            .find(|r| r.year == 0 && r.day == 2)
            .copied()
            .unwrap();
        assert_eq!(row.y + d.center, raw);
    }

    #[test]
    fn year_centering_sums_to_zero() {
        let d = build_design(&panel()).unwrap();
        let s: f64 = d.year_centered.iter().sum();
        assert!(s.abs() < 1e-12);
    }

    #[test]
    fn decay_bounds_from_distances() {
        let d = build_design(&panel()).unwrap();
        // Distances are 30, 40, 50.
        assert!((d.decay_lo - 3.0 / 50.0).abs() < 1e-12);
        assert!((d.decay_hi - 3.0 / 30.0).abs() < 1e-12);
        assert!(d.decay_lo < d.decay_hi);
    }
}
