//! Study calendar: warm-season windows, day keys, and referent dates.
//!
//! A study runs over `n_years` consecutive calendar years, restricted each
//! year to a fixed month/day window (May 1 to September 30 by default). Days
//! are addressed either by calendar date or by the pair `(year index t,
//! day-of-season ell)`, both 1-based. Conversions are exact round trips and
//! reject dates outside the configured windows.

use std::collections::HashMap;

use chrono::{Datelike, Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Month/day window applied to every study year.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeasonWindow {
    pub start_month: u32,
    pub start_day: u32,
    pub end_month: u32,
    pub end_day: u32,
}

impl SeasonWindow {
    /// May 1 through September 30.
    pub fn may_to_september() -> Self {
        SeasonWindow {
            start_month: 5,
            start_day: 1,
            end_month: 9,
            end_day: 30,
        }
    }

    /// June 1 through August 31; the analysis window for mortality models.
    pub fn june_to_august() -> Self {
        SeasonWindow {
            start_month: 6,
            start_day: 1,
            end_month: 8,
            end_day: 31,
        }
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        let md = (date.month(), date.day());
        md >= (self.start_month, self.start_day) && md <= (self.end_month, self.end_day)
    }
}

/// A study day addressed both ways: `year` is the 1-based index of the
/// calendar year within the study, `day` the 1-based offset within that
/// year's season window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DayKey {
    pub year: u32,
    pub day: u32,
    pub date: NaiveDate,
}

/// Materialized list of all study days with index maps in both directions.
#[derive(Debug, Clone)]
pub struct StudyCalendar {
    window: SeasonWindow,
    start_year: i32,
    n_years: u32,
    days: Vec<DayKey>,
    year_offsets: Vec<usize>,
    by_date: HashMap<NaiveDate, usize>,
}

impl StudyCalendar {
    pub fn new(window: SeasonWindow, start_year: i32, n_years: u32) -> Result<Self> {
        if n_years == 0 {
            return Err(CoreError::Calendar("study needs at least one year".into()));
        }
        let mut days = Vec::new();
        let mut year_offsets = Vec::with_capacity(n_years as usize);
        for t in 0..n_years {
            let y = start_year + t as i32;
            let start = NaiveDate::from_ymd_opt(y, window.start_month, window.start_day)
                .ok_or_else(|| CoreError::Calendar(format!("invalid season start in {y}")))?;
            let end = NaiveDate::from_ymd_opt(y, window.end_month, window.end_day)
                .ok_or_else(|| CoreError::Calendar(format!("invalid season end in {y}")))?;
            if end < start {
                return Err(CoreError::Calendar(format!(
                    "season end precedes start in {y}"
                )));
            }
            year_offsets.push(days.len());
            let mut d = start;
            let mut ell = 1u32;
            while d <= end {
                days.push(DayKey {
                    year: t + 1,
                    day: ell,
                    date: d,
                });
                d += Duration::days(1);
                ell += 1;
            }
        }
        let by_date = days.iter().enumerate().map(|(i, k)| (k.date, i)).collect();
        Ok(StudyCalendar {
            window,
            start_year,
            n_years,
            days,
            year_offsets,
            by_date,
        })
    }

    pub fn window(&self) -> SeasonWindow {
        self.window
    }

    pub fn start_year(&self) -> i32 {
        self.start_year
    }

    pub fn n_years(&self) -> u32 {
        self.n_years
    }

    /// Total number of study days across all years.
    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }

    pub fn days(&self) -> &[DayKey] {
        &self.days
    }

    /// Season length of study year `t` (1-based).
    pub fn season_len(&self, t: u32) -> Result<usize> {
        let i = self.year_bounds(t)?;
        Ok(i.1 - i.0)
    }

    /// Flat index range `[start, end)` of study year `t` (1-based).
    pub fn year_bounds(&self, t: u32) -> Result<(usize, usize)> {
        if t == 0 || t > self.n_years {
            return Err(CoreError::Calendar(format!(
                "year index {t} outside 1..={}",
                self.n_years
            )));
        }
        let start = self.year_offsets[(t - 1) as usize];
        let end = if t == self.n_years {
            self.days.len()
        } else {
            self.year_offsets[t as usize]
        };
        Ok((start, end))
    }

    pub fn flat_index(&self, t: u32, ell: u32) -> Result<usize> {
        let (start, end) = self.year_bounds(t)?;
        let idx = start + (ell as usize).saturating_sub(1);
        if ell == 0 || idx >= end {
            return Err(CoreError::Calendar(format!(
                "day {ell} outside season of year {t}"
            )));
        }
        Ok(idx)
    }

    pub fn key(&self, t: u32, ell: u32) -> Result<DayKey> {
        Ok(self.days[self.flat_index(t, ell)?])
    }

    pub fn key_of(&self, date: NaiveDate) -> Result<DayKey> {
        self.by_date
            .get(&date)
            .map(|&i| self.days[i])
            .ok_or_else(|| CoreError::Calendar(format!("{date} outside study windows")))
    }

    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        self.by_date.get(&date).copied()
    }

    /// Centered year index `t - (n_years + 1)/2` used as the linear-trend
    /// covariate; zero-mean over the study years.
    pub fn centered_year(&self, t: u32) -> f64 {
        t as f64 - (self.n_years as f64 + 1.0) / 2.0
    }
}

/// Referent dates for a time-stratified design: every date in the same
/// calendar month and year sharing the event's weekday, the event itself
/// excluded. Always 3 or 4 dates.
pub fn controls_for(event: NaiveDate) -> Vec<NaiveDate> {
    let wd = event.weekday();
    let (y, m) = (event.year(), event.month());
    let mut out = Vec::with_capacity(4);
    let mut d = NaiveDate::from_ymd_opt(y, m, 1).expect("first of month");
    while d.month() == m {
        if d.weekday() == wd && d != event {
            out.push(d);
        }
        match d.succ_opt() {
            Some(n) => d = n,
            None => break,
        }
    }
    out
}
