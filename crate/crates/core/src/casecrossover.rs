//! Time-stratified case-crossover construction.
//!
//! Each qualifying death becomes one stratum: the event day plus every
//! other day in the same calendar month and year that falls on the same
//! weekday. That referent rule gives every stratum 3 or 4 controls and
//! removes confounding by season, long-term trend and day of week by
//! design. Exposure on each day is the mean over the three days strictly
//! before it, so the surfaces must start far enough ahead of the analysis
//! season to cover early-June lookback.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::calendar::controls_for;
use crate::error::{CoreError, Result};
use crate::heatwave::HeatwaveCalendar;
use crate::types::{ExposureSurface, MunicipalityId};

/// One death record as read from the register extract.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MortalityRecord {
    pub id: String,
    pub date: NaiveDate,
    pub municipality: MunicipalityId,
    pub age: u32,
    pub sex: String,
    pub icd10: String,
}

/// Outcome groups, each an ICD-10 chapter range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CauseGroup {
    /// Circulatory and respiratory codes, I00 through J99.
    Cardiorespiratory,
    /// Malignant neoplasms, C00 through C97; deaths with no plausible
    /// short-term heat response, kept as a negative control outcome.
    Cancer,
}

/// Classify a raw code by chapter letter and two-digit block.
pub fn cause_group(code: &str) -> Option<CauseGroup> {
    let bytes = code.as_bytes();
    if bytes.len() < 3 {
        return None;
    }
    let num: u32 = code.get(1..3)?.parse().ok()?;
    match bytes[0].to_ascii_uppercase() {
        b'I' | b'J' => Some(CauseGroup::Cardiorespiratory),
        b'C' if num <= 97 => Some(CauseGroup::Cancer),
        _ => None,
    }
}

/// One analysis row: a case day or one of its referent days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcoRow {
    pub stratum: String,
    pub case: bool,
    pub date: NaiveDate,
    pub municipality: MunicipalityId,
    /// Lagged exposure keyed by method label.
    pub exposure: BTreeMap<String, f64>,
    /// Linked heatwave flag keyed by run-shape id.
    pub heatwave: BTreeMap<String, bool>,
    pub holiday: bool,
}

#[derive(Debug, Clone)]
pub struct CcoOptions {
    pub cause: CauseGroup,
    pub min_age: u32,
}

impl Default for CcoOptions {
    fn default() -> Self {
        Self {
            cause: CauseGroup::Cardiorespiratory,
            min_age: 18,
        }
    }
}

struct SurfaceIndex<'a> {
    surface: &'a ExposureSurface,
    label: String,
    muni: HashMap<&'a MunicipalityId, usize>,
    day: HashMap<NaiveDate, usize>,
}

impl<'a> SurfaceIndex<'a> {
    fn new(surface: &'a ExposureSurface) -> Self {
        Self {
            label: surface.method.to_string(),
            muni: surface
                .municipalities
                .iter()
                .enumerate()
                .map(|(i, m)| (m, i))
                .collect(),
            day: surface
                .days
                .iter()
                .enumerate()
                .map(|(i, k)| (k.date, i))
                .collect(),
            surface,
        }
    }

    /// Mean exposure over the three days strictly before `date`.
    fn lagged(&self, muni: &MunicipalityId, date: NaiveDate) -> Result<f64> {
        let m = *self.muni.get(muni).ok_or_else(|| {
            CoreError::MissingExposure(format!("municipality {muni} absent from {}", self.label))
        })?;
        let mut total = 0.0;
        for back in 1..=3i64 {
            let d = date - chrono::Duration::days(back);
            let idx = self.day.get(&d).ok_or_else(|| {
                CoreError::MissingExposure(format!(
                    "{} surface does not cover {d}, needed for lookback from {date}",
                    self.label
                ))
            })?;
            total += self.surface.get(m, *idx);
        }
        Ok(total / 3.0)
    }
}

struct CalendarIndex<'a> {
    calendar: &'a HeatwaveCalendar,
    muni: HashMap<&'a MunicipalityId, usize>,
    day: HashMap<NaiveDate, usize>,
}

impl<'a> CalendarIndex<'a> {
    fn new(calendar: &'a HeatwaveCalendar) -> Self {
        Self {
            muni: calendar
                .municipalities
                .iter()
                .enumerate()
                .map(|(i, m)| (m, i))
                .collect(),
            day: calendar
                .days
                .iter()
                .enumerate()
                .map(|(i, k)| (k.date, i))
                .collect(),
            calendar,
        }
    }

    /// Event day or any of the three preceding days flagged; days outside
    /// the calendar (before the summer started) contribute nothing.
    fn linked(&self, muni: &MunicipalityId, date: NaiveDate) -> Result<bool> {
        let m = *self.muni.get(muni).ok_or_else(|| {
            CoreError::MissingExposure(format!(
                "municipality {muni} absent from heatwave calendar {}",
                self.calendar.spec.id
            ))
        })?;
        for back in 0..=3i64 {
            let d = date - chrono::Duration::days(back);
            if let Some(idx) = self.day.get(&d) {
                if self.calendar.get(m, *idx) {
                    return Ok(true);
                }
            }
        }
        Ok(false)
    }
}

/// Build all strata for one outcome group. Records outside June through
/// August, under the age floor, or in another outcome group are skipped;
/// everything else must be fully covered by every surface and calendar.
/// Rows come back sorted by event date, stratum id, then case first.
pub fn build_rows(
    records: &[MortalityRecord],
    surfaces: &[ExposureSurface],
    calendars: &[HeatwaveCalendar],
    holidays: &BTreeSet<NaiveDate>,
    opts: &CcoOptions,
) -> Result<Vec<CcoRow>> {
    if surfaces.is_empty() {
        return Err(CoreError::EmptySelection {
            rule: "case-crossover needs at least one exposure surface".into(),
        });
    }
    let surf_idx: Vec<SurfaceIndex> = surfaces.iter().map(SurfaceIndex::new).collect();
    let cal_idx: Vec<CalendarIndex> = calendars.iter().map(CalendarIndex::new).collect();

    let mut kept: Vec<&MortalityRecord> = records
        .iter()
        .filter(|r| {
            r.age >= opts.min_age
                && (6..=8).contains(&r.date.month())
                && cause_group(&r.icd10) == Some(opts.cause)
        })
        .collect();
    kept.sort_by(|a, b| (a.date, &a.id).cmp(&(b.date, &b.id)));

    let mut rows = Vec::with_capacity(kept.len() * 5);
    for rec in kept {
        let mut days = vec![(rec.date, true)];
        for c in controls_for(rec.date) {
            days.push((c, false));
        }
        for (date, is_case) in days {
            let mut exposure = BTreeMap::new();
            for s in &surf_idx {
                exposure.insert(s.label.clone(), s.lagged(&rec.municipality, date)?);
            }
            let mut heatwave = BTreeMap::new();
            for c in &cal_idx {
                heatwave.insert(
                    c.calendar.spec.id.clone(),
                    c.linked(&rec.municipality, date)?,
                );
            }
            rows.push(CcoRow {
                stratum: rec.id.clone(),
                case: is_case,
                date,
                municipality: rec.municipality.clone(),
                exposure,
                heatwave,
                holiday: holidays.contains(&date),
            });
        }
    }
    Ok(rows)
}

/// Controls per stratum: (smallest, largest, mean).
pub fn control_stats(rows: &[CcoRow]) -> (usize, usize, f64) {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in rows {
        if !r.case {
            *counts.entry(r.stratum.as_str()).or_insert(0) += 1;
        }
    }
    if counts.is_empty() {
        return (0, 0, 0.0);
    }
    let min = *counts.values().min().unwrap();
    let max = *counts.values().max().unwrap();
    let mean = counts.values().sum::<usize>() as f64 / counts.len() as f64;
    (min, max, mean)
}
