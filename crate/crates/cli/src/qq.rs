//! Quantile-quantile comparison between raw station records and the
//! gridded product's nearest cell.
//!
//! For each station, the cell whose footprint is closest to the station is
//! selected, both series are restricted to the days the station actually
//! observed, and percentiles 1 through 99 of each are tabulated side by
//! side. Matching distributions put the points on the diagonal; an
//! additive bias shifts the whole line; variance compression in the
//! gridded product bends the tails toward the centre.

use heatmort::error::{CoreError, Result};
use heatmort::heatwave::quantile_type7;
use heatmort::io::{self, assemble_reanalysis_daily, assemble_reanalysis_hourly};
use serde::Serialize;

use crate::artifacts::Artifacts;
use crate::config::PipelineConfig;
use crate::logging;
use crate::pipeline::load_prepped;

#[derive(Debug, Serialize)]
struct QqRow {
    station_id: String,
    cell_id: String,
    q: u32,
    station_value: f64,
    cell_value: f64,
}

pub fn diagnose_qq(cfg: &PipelineConfig, arts: &Artifacts) -> Result<()> {
    let p = load_prepped(cfg, arts)?;

    // Raw records, not the imputed prep output: the diagnostic should see
    // the instrument as recorded, gaps included.
    let raw_path = cfg.stations_path();
    if !raw_path.exists() {
        return Err(CoreError::InvalidConfig(format!(
            "station file {} does not exist",
            raw_path.display()
        )));
    }
    let rows = io::read_station_csv(&raw_path)?;
    let stations = io::assemble_stations(&rows, &p.calendar, &p.proj)?;

    let rea_path = cfg.reanalysis_path();
    if !rea_path.exists() {
        return Err(CoreError::InvalidConfig(format!(
            "reanalysis file {} does not exist",
            rea_path.display()
        )));
    }
    let grid = if cfg.ingest.pre_aggregated {
        assemble_reanalysis_daily(
            &io::read_reanalysis_daily_csv(&rea_path)?,
            &p.calendar,
            &p.proj,
        )?
    } else {
        assemble_reanalysis_hourly(
            &io::read_reanalysis_hourly_csv(&rea_path)?,
            &p.calendar,
            &p.proj,
        )?
    };

    let mut table = Vec::with_capacity(stations.len() * 99);
    for s in &stations {
        let (cell_idx, _) = grid
            .cells
            .iter()
            .enumerate()
            .map(|(i, (_, rect))| (i, rect.dist_to_point(&s.loc)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .ok_or_else(|| CoreError::EmptySelection {
                rule: "gridded product has no cells".into(),
            })?;
        let cell_series = grid.cell_row(cell_idx);
        let mut sv = Vec::new();
        let mut cv = Vec::new();
        for (d, v) in s.values.iter().enumerate() {
            if let Some(x) = v {
                sv.push(*x);
                cv.push(cell_series[d]);
            }
        }
        if sv.is_empty() {
            return Err(CoreError::EmptySelection {
                rule: format!("station {} has no observed days to compare", s.id),
            });
        }
        for q in 1..=99u32 {
            let level = q as f64 / 100.0;
            table.push(QqRow {
                station_id: s.id.to_string(),
                cell_id: grid.cells[cell_idx].0.to_string(),
                q,
                station_value: quantile_type7(&sv, level)?,
                cell_value: quantile_type7(&cv, level)?,
            });
        }
    }

    let out = arts.qq_table();
    arts.prepare(&out)?;
    let mut wtr = csv::Writer::from_path(&out)?;
    for row in &table {
        wtr.serialize(row)?;
    }
    wtr.flush()?;
    arts.stamp(&out, &p.stamped(cfg, "diagnose-qq"))?;
    logging::event(
        "diagnose-qq",
        "written",
        &[("stations", stations.len().to_string())],
    );
    Ok(())
}
