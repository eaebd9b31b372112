//! Station quality control, gap imputation, and reanalysis aggregation.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::calendar::StudyCalendar;
use crate::error::{CoreError, Result};
use crate::exec;
use crate::geometry::{overlap_area, Rect};
use crate::spline::SmoothingSpline;
use crate::types::{CellId, ExposureSurface, MethodTag, MunicipalityMap, Provenance, StationSeries};

/// Completeness rule applied per station over the study calendar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectionRule {
    /// Keep stations whose longest missing run within any single season is
    /// at most `limit` days.
    MaxConsecutiveMissing { limit: usize },
    /// Keep stations with a pooled missing fraction strictly below `limit`.
    MaxMissingFraction { limit: f64 },
}

impl std::fmt::Display for SelectionRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SelectionRule::MaxConsecutiveMissing { limit } => {
                write!(f, "max-consecutive-missing({limit})")
            }
            SelectionRule::MaxMissingFraction { limit } => {
                write!(f, "max-missing-fraction({limit})")
            }
        }
    }
}

impl SelectionRule {
    pub fn admits(&self, series: &StationSeries, calendar: &StudyCalendar) -> Result<bool> {
        if series.values.len() != calendar.len() {
            return Err(CoreError::LengthMismatch {
                context: format!("station {}", series.id),
                got: series.values.len(),
                want: calendar.len(),
            });
        }
        match *self {
            SelectionRule::MaxConsecutiveMissing { limit } => {
                for t in 1..=calendar.n_years() {
                    let (a, b) = calendar.year_bounds(t)?;
                    let mut run = 0usize;
                    for v in &series.values[a..b] {
                        if v.is_none() {
                            run += 1;
                            if run > limit {
                                return Ok(false);
                            }
                        } else {
                            run = 0;
                        }
                    }
                }
                Ok(true)
            }
            SelectionRule::MaxMissingFraction { limit } => {
                let frac = series.n_missing() as f64 / series.values.len() as f64;
                Ok(frac < limit)
            }
        }
    }
}

/// Filter stations by a completeness rule, preserving input order.
pub fn select_stations(
    stations: &[StationSeries],
    calendar: &StudyCalendar,
    rule: SelectionRule,
) -> Result<Vec<StationSeries>> {
    let mut out = Vec::new();
    for s in stations {
        if rule.admits(s, calendar)? {
            out.push(s.clone());
        }
    }
    if out.is_empty() {
        return Err(CoreError::EmptySelection {
            rule: rule.to_string(),
        });
    }
    Ok(out)
}

/// Minimum observed days per season for spline imputation.
pub const MIN_OBS_FOR_IMPUTATION: usize = 4;

/// Fill missing days with a per-(station, season) cubic smoothing spline over
/// day-of-season, smoothing chosen by generalized cross-validation. Observed
/// entries pass through bitwise unchanged.
pub fn impute_spline(
    series: &StationSeries,
    calendar: &StudyCalendar,
) -> Result<StationSeries> {
    if series.values.len() != calendar.len() {
        return Err(CoreError::LengthMismatch {
            context: format!("station {}", series.id),
            got: series.values.len(),
            want: calendar.len(),
        });
    }
    let mut values = series.values.clone();
    for t in 1..=calendar.n_years() {
        let (a, b) = calendar.year_bounds(t)?;
        let season = &series.values[a..b];
        if season.iter().all(|v| v.is_some()) {
            continue;
        }
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (i, v) in season.iter().enumerate() {
            if let Some(y) = v {
                xs.push((i + 1) as f64);
                ys.push(*y);
            }
        }
        if xs.len() < MIN_OBS_FOR_IMPUTATION {
            return Err(CoreError::TooSparseToImpute {
                station: series.id.to_string(),
                year: calendar.start_year() + (t as i32 - 1),
                observed: xs.len(),
                needed: MIN_OBS_FOR_IMPUTATION,
            });
        }
        let (sp, _) = SmoothingSpline::fit_gcv(&xs, &ys)?;
        for (i, v) in values[a..b].iter_mut().enumerate() {
            if v.is_none() {
                *v = Some(sp.eval((i + 1) as f64));
            }
        }
    }
    Ok(StationSeries {
        id: series.id.clone(),
        loc: series.loc,
        alt_m: series.alt_m,
        values,
    })
}

/// Collapse hourly records to daily maxima. Days are UTC calendar dates and
/// must carry all 24 hours; the error lists every incomplete day.
pub fn daily_max_from_hourly(records: &[(NaiveDate, u32, f64)]) -> Result<Vec<(NaiveDate, f64)>> {
    let mut by_day: BTreeMap<NaiveDate, (u32, f64)> = BTreeMap::new();
    for &(date, hour, temp) in records {
        if hour > 23 {
            return Err(CoreError::IncompleteHours(format!(
                "hour {hour} out of range on {date}"
            )));
        }
        let e = by_day.entry(date).or_insert((0u32, f64::NEG_INFINITY));
        if e.0 & (1 << hour) != 0 {
            return Err(CoreError::IncompleteHours(format!(
                "duplicate hour {hour} on {date}"
            )));
        }
        e.0 |= 1 << hour;
        e.1 = e.1.max(temp);
    }
    let incomplete: Vec<String> = by_day
        .iter()
        .filter(|(_, (mask, _))| *mask != (1 << 24) - 1)
        .map(|(d, (mask, _))| format!("{d} ({}h)", mask.count_ones()))
        .collect();
    if !incomplete.is_empty() {
        return Err(CoreError::IncompleteHours(format!(
            "days without 24 hourly values: {}",
            incomplete.join(", ")
        )));
    }
    Ok(by_day.into_iter().map(|(d, (_, m))| (d, m)).collect())
}

/// Rectangular reanalysis grid with a complete daily-maximum matrix.
#[derive(Debug, Clone)]
pub struct ReanalysisGrid {
    pub cells: Vec<(CellId, Rect)>,
    /// Row-major `cells.len() x calendar.len()`.
    values: Vec<f64>,
    n_days: usize,
}

impl ReanalysisGrid {
    pub fn new(cells: Vec<(CellId, Rect)>, values: Vec<f64>, n_days: usize) -> Result<Self> {
        if values.len() != cells.len() * n_days {
            return Err(CoreError::LengthMismatch {
                context: "reanalysis grid".into(),
                got: values.len(),
                want: cells.len() * n_days,
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite {
                context: "reanalysis grid".into(),
            });
        }
        for i in 0..cells.len() {
            for j in (i + 1)..cells.len() {
                if cells[i].1.intersects(&cells[j].1) {
                    return Err(CoreError::CellsOverlap {
                        a: cells[i].0.to_string(),
                        b: cells[j].0.to_string(),
                    });
                }
            }
        }
        Ok(ReanalysisGrid {
            cells,
            values,
            n_days,
        })
    }

    pub fn n_days(&self) -> usize {
        self.n_days
    }

    pub fn cell_row(&self, cell: usize) -> &[f64] {
        &self.values[cell * self.n_days..(cell + 1) * self.n_days]
    }
}

/// Area-weighted aggregation of cell values onto municipalities:
/// weight of cell k in municipality m is the overlap area, and the
/// municipal value is the weight-normalized average. Linear in the field.
pub fn aggregate_cells(
    grid: &ReanalysisGrid,
    map: &MunicipalityMap,
    calendar: &StudyCalendar,
    provenance: Provenance,
) -> Result<ExposureSurface> {
    if grid.n_days != calendar.len() {
        return Err(CoreError::LengthMismatch {
            context: "reanalysis grid days".into(),
            got: grid.n_days,
            want: calendar.len(),
        });
    }
    let rows: Vec<Result<Vec<f64>>> = exec::map_indices(map.len(), |mi| {
        let muni = map.get(mi);
        let mut weights: Vec<(usize, f64)> = Vec::new();
        for (ci, (_, rect)) in grid.cells.iter().enumerate() {
            let w = overlap_area(&muni.geometry, rect);
            if w > 0.0 {
                weights.push((ci, w));
            }
        }
        if weights.is_empty() {
            return Err(CoreError::NoCellOverlap {
                id: muni.id.to_string(),
            });
        }
        let w_sum: f64 = weights.iter().map(|(_, w)| w).sum();
        let mut row = vec![0.0; grid.n_days];
        for (ci, w) in &weights {
            let cell = grid.cell_row(*ci);
            for (acc, v) in row.iter_mut().zip(cell) {
                *acc += w * v;
            }
        }
        for v in &mut row {
            *v /= w_sum;
        }
        Ok(row)
    });
    let mut values = Vec::with_capacity(map.len() * grid.n_days);
    for row in rows {
        values.extend(row?);
    }
    ExposureSurface::new(
        MethodTag::Reanalysis,
        map.iter().map(|m| m.id.clone()).collect(),
        calendar.days().to_vec(),
        values,
        provenance,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calendar::SeasonWindow;
    use crate::geometry::{MultiPolygon, Point, Polygon, Ring};
    use crate::types::{MunicipalityId, SiteId};
    use approx::assert_relative_eq;

    fn cal() -> StudyCalendar {
        StudyCalendar::new(SeasonWindow::may_to_september(), 2020, 1).unwrap()
    }

    fn station(values: Vec<Option<f64>>) -> StationSeries {
        StationSeries {
            id: SiteId::new("s1"),
            loc: Point::new(0.0, 0.0),
            alt_m: 100.0,
            values,
        }
    }

    #[test]
    fn consecutive_missing_rule() {
        let c = cal();
        let mut v: Vec<Option<f64>> = (0..c.len()).map(|i| Some(20.0 + (i % 7) as f64)).collect();
        for i in 40..47 {
            v[i] = None; // exactly 7 missing
        }
        let rule = SelectionRule::MaxConsecutiveMissing { limit: 7 };
        assert!(rule.admits(&station(v.clone()), &c).unwrap());
        v[47] = None; // 8 in a row
        assert!(!rule.admits(&station(v), &c).unwrap());
    }

    #[test]
    fn missing_fraction_rule_is_strict() {
        let c = cal();
        let n = c.len();
        let n_miss = (0.19 * n as f64).round() as usize;
        let mut v: Vec<Option<f64>> = (0..n).map(|i| Some(i as f64)).collect();
        for slot in v.iter_mut().take(n_miss) {
            *slot = None;
        }
        let rule = SelectionRule::MaxMissingFraction { limit: 0.20 };
        assert!(rule.admits(&station(v), &c).unwrap());
        let all_missing: Vec<Option<f64>> = vec![None; n];
        assert!(!rule.admits(&station(all_missing), &c).unwrap());
    }

    #[test]
    fn empty_selection_is_an_error() {
        let c = cal();
        let v: Vec<Option<f64>> = vec![None; c.len()];
        let err = select_stations(
            &[station(v)],
            &c,
            SelectionRule::MaxMissingFraction { limit: 0.2 },
        )
        .unwrap_err();
        assert!(matches!(err, CoreError::EmptySelection { .. }));
    }

    #[test]
    fn selection_is_monotone_in_the_limit() {
        let c = cal();
        let mut rng_state = 12345u64;
        let mut stations = Vec::new();
        for k in 0..25 {
            let mut v: Vec<Option<f64>> = (0..c.len()).map(|i| Some(i as f64)).collect();
            for slot in v.iter_mut() {
                rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                if (rng_state >> 33) % 10 < (k % 5) as u64 {
                    *slot = None;
                }
            }
            let mut s = station(v);
            s.id = SiteId::new(format!("s{k}"));
            stations.push(s);
        }
        for (lo, hi) in [(3usize, 7usize), (7, 14)] {
            let keep = |lim| {
                select_stations(
                    &stations,
                    &c,
                    SelectionRule::MaxConsecutiveMissing { limit: lim },
                )
                .map(|v| v.iter().map(|s| s.id.clone()).collect::<Vec<_>>())
                .unwrap_or_default()
            };
            let a = keep(lo);
            let b = keep(hi);
            assert!(a.iter().all(|id| b.contains(id)), "limit {lo} not nested in {hi}");
        }
    }

    #[test]
    fn imputation_preserves_observed_and_fills_gaps() {
        let c = cal();
        // Locally linear stretch 20, 21(missing), 22 embedded in a smooth series.
        let mut v: Vec<Option<f64>> = (0..c.len())
            .map(|i| Some(20.0 + 2.0 * ((i as f64) / 40.0).sin()))
            .collect();
        v[60] = Some(20.0);
        v[61] = None;
        v[62] = Some(22.0);
        let s = station(v.clone());
        let filled = impute_spline(&s, &c).unwrap();
        for (i, orig) in v.iter().enumerate() {
            if let Some(o) = orig {
                assert_eq!(filled.values[i].unwrap().to_bits(), o.to_bits());
            }
        }
        let got = filled.values[61].unwrap();
        assert!((20.0..=22.0).contains(&got), "imputed {got}");
    }

    #[test]
    fn too_sparse_season_errors() {
        let c = cal();
        let mut v: Vec<Option<f64>> = vec![None; c.len()];
        v[0] = Some(20.0);
        v[1] = Some(21.0);
        v[2] = Some(20.5);
        let err = impute_spline(&station(v), &c).unwrap_err();
        assert!(matches!(err, CoreError::TooSparseToImpute { observed: 3, .. }));
    }

    #[test]
    fn hourly_to_daily_requires_full_days() {
        let d0 = NaiveDate::from_ymd_opt(2020, 7, 1).unwrap();
        let mut recs: Vec<(NaiveDate, u32, f64)> =
            (0..24).map(|h| (d0, h, 20.0 + (h as f64) * 0.3)).collect();
        let out = daily_max_from_hourly(&recs).unwrap();
        assert_eq!(out, vec![(d0, 20.0 + 23.0 * 0.3)]);
        // Permutation invariance.
        recs.reverse();
        assert_eq!(daily_max_from_hourly(&recs).unwrap(), out);
        recs.pop();
        let err = daily_max_from_hourly(&recs).unwrap_err();
        assert!(err.to_string().contains("2020-07-01"));
    }

    fn unit_muni(id: &str, x0: f64, y0: f64, w: f64, h: f64) -> (MunicipalityId, MultiPolygon, f64) {
        let ring = Ring::new(vec![
            Point::new(x0, y0),
            Point::new(x0 + w, y0),
            Point::new(x0 + w, y0 + h),
            Point::new(x0, y0 + h),
        ])
        .unwrap();
        (
            MunicipalityId::new(id),
            MultiPolygon::new(vec![Polygon::new(ring, vec![])]).unwrap(),
            50.0,
        )
    }

    #[test]
    fn quarter_three_quarter_split_aggregates_linearly() {
        let c = StudyCalendar::new(SeasonWindow::may_to_september(), 2020, 1).unwrap();
        let n = c.len();
        // Municipality [0,2]x[0,1]; cells [0,0.5]x[0,1] and [0.5,2]x[0,1]:
        // weights 0.5 and 1.5, i.e. 25% / 75%.
        let map = MunicipalityMap::new(vec![unit_muni("m1", 0.0, 0.0, 2.0, 1.0)]).unwrap();
        let cells = vec![
            (CellId::new("c1"), Rect::new(0.0, 0.0, 0.5, 1.0).unwrap()),
            (CellId::new("c2"), Rect::new(0.5, 0.0, 2.0, 1.0).unwrap()),
        ];
        let mut values = vec![20.0; n];
        values.extend(vec![24.0; n]);
        let grid = ReanalysisGrid::new(cells, values, n).unwrap();
        let surf = aggregate_cells(&grid, &map, &c, Provenance::new(1, "h", "test")).unwrap();
        for d in 0..n {
            assert_relative_eq!(surf.get(0, d), 23.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_field_aggregates_exactly() {
        let c = StudyCalendar::new(SeasonWindow::may_to_september(), 2020, 1).unwrap();
        let n = c.len();
        let map = MunicipalityMap::new(vec![
            unit_muni("m1", 0.0, 0.0, 1.7, 1.3),
            unit_muni("m2", 1.7, 0.0, 0.8, 1.3),
        ])
        .unwrap();
        let cells: Vec<(CellId, Rect)> = (0..4)
            .map(|i| {
                (
                    CellId::new(format!("c{i}")),
                    Rect::new(0.7 * i as f64, 0.0, 0.7 * (i + 1) as f64, 2.0).unwrap(),
                )
            })
            .collect();
        let values = vec![19.25; 4 * n];
        let grid = ReanalysisGrid::new(cells, values, n).unwrap();
        let surf = aggregate_cells(&grid, &map, &c, Provenance::new(1, "h", "test")).unwrap();
        for m in 0..2 {
            for d in 0..n {
                assert!((surf.get(m, d) - 19.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn no_overlap_is_an_error() {
        let c = StudyCalendar::new(SeasonWindow::may_to_september(), 2020, 1).unwrap();
        let map = MunicipalityMap::new(vec![unit_muni("far", 100.0, 100.0, 1.0, 1.0)]).unwrap();
        let cells = vec![(CellId::new("c"), Rect::new(0.0, 0.0, 1.0, 1.0).unwrap())];
        let grid = ReanalysisGrid::new(cells, vec![20.0; c.len()], c.len()).unwrap();
        let err = aggregate_cells(&grid, &map, &c, Provenance::new(1, "h", "t")).unwrap_err();
        assert!(matches!(err, CoreError::NoCellOverlap { .. }));
    }

    #[test]
    fn overlapping_cells_rejected() {
        let cells = vec![
            (CellId::new("a"), Rect::new(0.0, 0.0, 1.0, 1.0).unwrap()),
            (CellId::new("b"), Rect::new(0.5, 0.5, 1.5, 1.5).unwrap()),
        ];
        assert!(matches!(
            ReanalysisGrid::new(cells, vec![0.0; 4], 2).unwrap_err(),
            CoreError::CellsOverlap { .. }
        ));
    }
}
