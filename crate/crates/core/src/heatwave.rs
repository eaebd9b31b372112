//! Heatwave day detection on daily exposure series.
//!
//! A threshold is set either as a fixed value or as an empirical quantile
//! of all summer values pooled across years. A day is then a heatwave day
//! when it sits deep enough inside a run of consecutive exceedances:
//! `min_run` is the shortest run that counts and `excl` drops that many
//! days from the front of each run. Runs never cross a season boundary.
//! Exceedance is strict, so a day exactly at the threshold never counts.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::calendar::DayKey;
use crate::error::{CoreError, Result};
use crate::types::MunicipalityId;

/// Run-shape rule for flagging days inside an exceedance run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeatwaveSpec {
    pub id: String,
    /// Shortest exceedance run that produces any heatwave day.
    pub min_run: usize,
    /// Days dropped from the front of every qualifying run.
    pub excl: usize,
}

impl HeatwaveSpec {
    pub fn new(id: &str, min_run: usize, excl: usize) -> Result<Self> {
        if min_run == 0 {
            return Err(CoreError::InvalidConfig(
                "heatwave min_run must be positive".into(),
            ));
        }
        Ok(Self {
            id: id.to_string(),
            min_run,
            excl,
        })
    }
}

/// The three standard run shapes: every exceedance day, runs where only the
/// second day onward counts, and runs where only the third day onward
/// counts.
pub fn preset_specs() -> Vec<HeatwaveSpec> {
    vec![
        HeatwaveSpec {
            id: "base".into(),
            min_run: 1,
            excl: 0,
        },
        HeatwaveSpec {
            id: "1daylag".into(),
            min_run: 2,
            excl: 1,
        },
        HeatwaveSpec {
            id: "2dayslag".into(),
            min_run: 3,
            excl: 2,
        },
    ]
}

/// How the exceedance threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ThresholdRule {
    /// Empirical quantile of the pooled summer values.
    Quantile(f64),
    /// Fixed value in the units of the series.
    Fixed(f64),
}

/// Interpolated empirical quantile with index `(n - 1) q + 1` (1-based),
/// the convention that is continuous in `q` and exact at the order
/// statistics.
pub fn quantile_type7(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(CoreError::EmptySelection {
            rule: "quantile of an empty sample".into(),
        });
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(CoreError::InvalidConfig(format!(
            "quantile level must lie in [0, 1], got {q}"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let h = (n as f64 - 1.0) * q;
    let lo = h.floor() as usize;
    let frac = h - lo as usize as f64;
    if lo + 1 >= n {
        return Ok(sorted[n - 1]);
    }
    Ok(sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]))
}

pub fn threshold_for(pooled: &[f64], rule: ThresholdRule) -> Result<f64> {
    match rule {
        ThresholdRule::Fixed(v) => Ok(v),
        ThresholdRule::Quantile(q) => quantile_type7(pooled, q),
    }
}

/// Flag heatwave days. `season_id` must have the same length as `values`;
/// a change in id breaks runs, so consecutive indices only chain within
/// one season.
pub fn detect(
    values: &[f64],
    season_id: &[u32],
    threshold: f64,
    spec: &HeatwaveSpec,
) -> Result<Vec<bool>> {
    if values.len() != season_id.len() {
        return Err(CoreError::LengthMismatch {
            context: "heatwave season ids".into(),
            got: season_id.len(),
            want: values.len(),
        });
    }
    let n = values.len();
    let mut flags = vec![false; n];
    let mut i = 0;
    while i < n {
        if values[i] > threshold {
            let mut j = i;
            while j + 1 < n && season_id[j + 1] == season_id[j] && values[j + 1] > threshold {
                j += 1;
            }
            let run_len = j - i + 1;
            if run_len >= spec.min_run {
                for (pos, flag) in flags[i..=j].iter_mut().enumerate() {
                    if pos >= spec.excl {
                        *flag = true;
                    }
                }
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    Ok(flags)
}

/// Heatwave day flags for every municipality and summer day under one run
/// shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeatwaveCalendar {
    pub spec: HeatwaveSpec,
    pub threshold_rule: ThresholdRule,
    pub municipalities: Vec<MunicipalityId>,
    pub days: Vec<DayKey>,
    /// Row-major `municipalities.len() x days.len()`.
    flags: Vec<bool>,
}

impl HeatwaveCalendar {
    pub fn new(
        spec: HeatwaveSpec,
        threshold_rule: ThresholdRule,
        municipalities: Vec<MunicipalityId>,
        days: Vec<DayKey>,
        flags: Vec<bool>,
    ) -> Result<Self> {
        let want = municipalities.len() * days.len();
        if flags.len() != want {
            return Err(CoreError::LengthMismatch {
                context: "heatwave calendar".into(),
                got: flags.len(),
                want,
            });
        }
        Ok(Self {
            spec,
            threshold_rule,
            municipalities,
            days,
            flags,
        })
    }

    pub fn get(&self, muni: usize, day: usize) -> bool {
        self.flags[muni * self.days.len() + day]
    }

    pub fn flags(&self) -> &[bool] {
        self.flags.as_slice()
    }

    pub fn lookup(&self, id: &MunicipalityId, date: NaiveDate) -> Option<bool> {
        let m = self.municipalities.iter().position(|x| x == id)?;
        let d = self.days.iter().position(|k| k.date == date)?;
        Some(self.get(m, d))
    }
}

/// A day is exposure-linked when it or any of the three preceding days in
/// the same season is a heatwave day.
pub fn link_exposure(flags: &[bool], season_id: &[u32]) -> Vec<bool> {
    let n = flags.len();
    let mut linked = vec![false; n];
    for i in 0..n {
        for back in 0..=3usize {
            if back > i {
                break;
            }
            let j = i - back;
            if season_id[j] != season_id[i] {
                break;
            }
            if flags[j] {
                linked[i] = true;
                break;
            }
        }
    }
    linked
}
