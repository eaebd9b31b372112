//! Readers and writers for every file that crosses a pipeline stage
//! boundary.
//!
//! Tables are plain CSV with fixed headers so artifacts stay inspectable
//! with standard tools; reports are JSON. Every writer has a matching
//! reader that reproduces the in-memory value, and all float columns are
//! printed in shortest round-trip form, so write-read cycles are exact.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::Path;

use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::calendar::StudyCalendar;
use crate::casecrossover::{CcoRow, MortalityRecord};
use crate::epi::RiskCurve;
use crate::error::{CoreError, Result};
use crate::geometry::{MultiPolygon, Polygon, Projection, Rect, Ring};
use crate::heatwave::{HeatwaveCalendar, HeatwaveSpec, ThresholdRule};
use crate::ingest::{daily_max_from_hourly, ReanalysisGrid};
use crate::types::{
    CellId, ExposureSurface, MethodTag, MunicipalityId, Provenance, SiteId, StationSeries,
};

/// One long-format station observation; `tmax` empty means missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationRow {
    pub station_id: String,
    pub lon: f64,
    pub lat: f64,
    pub alt_m: f64,
    pub date: NaiveDate,
    pub tmax: Option<f64>,
}

pub fn read_station_csv(path: &Path) -> Result<Vec<StationRow>> {
    let mut rdr = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    rdr.deserialize().map(|r| r.map_err(Into::into)).collect()
}

pub fn write_station_csv(path: &Path, rows: &[StationRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for row in rows {
        wtr.serialize(row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Groups long rows into calendar-aligned per-station series. Stations come
/// out sorted by id; dates outside the calendar are dropped; inconsistent
/// coordinates or duplicate (station, date) pairs are rejected.
pub fn assemble_stations(
    rows: &[StationRow],
    calendar: &StudyCalendar,
    proj: &Projection,
) -> Result<Vec<StationSeries>> {
    let day_index: HashMap<NaiveDate, usize> = calendar
        .days()
        .iter()
        .enumerate()
        .map(|(i, k)| (k.date, i))
        .collect();
    let mut by_station: BTreeMap<String, (f64, f64, f64, Vec<Option<f64>>)> = BTreeMap::new();
    for row in rows {
        let entry = by_station
            .entry(row.station_id.clone())
            .or_insert_with(|| (row.lon, row.lat, row.alt_m, vec![None; calendar.len()]));
        if entry.0 != row.lon || entry.1 != row.lat || entry.2 != row.alt_m {
            return Err(CoreError::InvalidConfig(format!(
                "station {} has inconsistent metadata on {}",
                row.station_id, row.date
            )));
        }
        let Some(&i) = day_index.get(&row.date) else {
            continue;
        };
        if let Some(v) = row.tmax {
            if entry.3[i].is_some() {
                return Err(CoreError::InvalidConfig(format!(
                    "duplicate observation for station {} on {}",
                    row.station_id, row.date
                )));
            }
            entry.3[i] = Some(v);
        }
    }
    Ok(by_station
        .into_iter()
        .map(|(id, (lon, lat, alt_m, values))| StationSeries {
            id: SiteId::new(id),
            loc: proj.to_km(lon, lat),
            alt_m,
            values,
        })
        .collect())
}

/// One municipality as stored on disk: geographic coordinates, not yet
/// projected to the working plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawMunicipality {
    pub id: String,
    pub alt_m: f64,
    pub polygons: Vec<RawPolygon>,
}

/// Outer ring plus holes, each a list of (lon, lat) vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawPolygon {
    pub outer: Vec<(f64, f64)>,
    pub holes: Vec<Vec<(f64, f64)>>,
}

fn geojson_ring(value: &serde_json::Value, what: &str) -> Result<Vec<(f64, f64)>> {
    let arr = value
        .as_array()
        .ok_or_else(|| CoreError::Geometry(format!("{what}: ring is not an array")))?;
    let mut pts = Vec::with_capacity(arr.len());
    for pos in arr {
        let c = pos
            .as_array()
            .filter(|c| c.len() >= 2)
            .ok_or_else(|| CoreError::Geometry(format!("{what}: position is not [lon, lat]")))?;
        let lon = c[0]
            .as_f64()
            .ok_or_else(|| CoreError::Geometry(format!("{what}: non-numeric longitude")))?;
        let lat = c[1]
            .as_f64()
            .ok_or_else(|| CoreError::Geometry(format!("{what}: non-numeric latitude")))?;
        pts.push((lon, lat));
    }
    Ok(pts)
}

fn geojson_polygon(value: &serde_json::Value, what: &str) -> Result<RawPolygon> {
    let rings = value
        .as_array()
        .filter(|r| !r.is_empty())
        .ok_or_else(|| CoreError::Geometry(format!("{what}: polygon has no rings")))?;
    Ok(RawPolygon {
        outer: geojson_ring(&rings[0], what)?,
        holes: rings[1..]
            .iter()
            .map(|r| geojson_ring(r, what))
            .collect::<Result<_>>()?,
    })
}

/// Parses a GeoJSON FeatureCollection whose features carry `id` and `alt_m`
/// properties and Polygon or MultiPolygon geometry. Coordinate order is
/// (lon, lat); any extra position elements are ignored.
pub fn read_municipalities_geojson(path: &Path) -> Result<Vec<RawMunicipality>> {
    let root: serde_json::Value = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if root["type"] != "FeatureCollection" {
        return Err(CoreError::Geometry(
            "expected a GeoJSON FeatureCollection".into(),
        ));
    }
    let features = root["features"]
        .as_array()
        .ok_or_else(|| CoreError::Geometry("FeatureCollection has no features array".into()))?;
    let mut out = Vec::with_capacity(features.len());
    for (i, feature) in features.iter().enumerate() {
        let props = &feature["properties"];
        let id = match &props["id"] {
            serde_json::Value::String(s) => s.clone(),
            serde_json::Value::Number(n) => n.to_string(),
            _ => {
                return Err(CoreError::Geometry(format!(
                    "feature {i} has no usable id property"
                )))
            }
        };
        let alt_m = props["alt_m"]
            .as_f64()
            .ok_or_else(|| CoreError::Geometry(format!("feature {id} has no alt_m property")))?;
        let geom = &feature["geometry"];
        let coords = &geom["coordinates"];
        let polygons = match geom["type"].as_str() {
            Some("Polygon") => vec![geojson_polygon(coords, &id)?],
            Some("MultiPolygon") => coords
                .as_array()
                .ok_or_else(|| {
                    CoreError::Geometry(format!("{id}: MultiPolygon coordinates missing"))
                })?
                .iter()
                .map(|p| geojson_polygon(p, &id))
                .collect::<Result<_>>()?,
            other => {
                return Err(CoreError::Geometry(format!(
                    "feature {id} has unsupported geometry type {other:?}"
                )))
            }
        };
        out.push(RawMunicipality { id, alt_m, polygons });
    }
    Ok(out)
}

fn geojson_ring_value(pts: &[(f64, f64)]) -> serde_json::Value {
    // GeoJSON rings repeat the first vertex at the end.
    let mut arr: Vec<serde_json::Value> = pts
        .iter()
        .map(|&(lon, lat)| serde_json::json!([lon, lat]))
        .collect();
    if let Some(first) = pts.first() {
        if pts.last() != Some(first) {
            arr.push(serde_json::json!([first.0, first.1]));
        }
    }
    serde_json::Value::Array(arr)
}

pub fn write_municipalities_geojson(path: &Path, munis: &[RawMunicipality]) -> Result<()> {
    let features: Vec<serde_json::Value> = munis
        .iter()
        .map(|m| {
            let polys: Vec<serde_json::Value> = m
                .polygons
                .iter()
                .map(|p| {
                    let mut rings = vec![geojson_ring_value(&p.outer)];
                    rings.extend(p.holes.iter().map(|h| geojson_ring_value(h)));
                    serde_json::Value::Array(rings)
                })
                .collect();
            let geometry = if polys.len() == 1 {
                serde_json::json!({ "type": "Polygon", "coordinates": polys[0] })
            } else {
                serde_json::json!({ "type": "MultiPolygon", "coordinates": polys })
            };
            serde_json::json!({
                "type": "Feature",
                "properties": { "id": m.id, "alt_m": m.alt_m },
                "geometry": geometry,
            })
        })
        .collect();
    let doc = serde_json::json!({ "type": "FeatureCollection", "features": features });
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, &doc)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Projects raw municipalities onto the working plane, producing entries
/// ready for a registry.
pub fn project_municipalities(
    raw: &[RawMunicipality],
    proj: &Projection,
) -> Result<Vec<(MunicipalityId, MultiPolygon, f64)>> {
    raw.iter()
        .map(|m| {
            let parts = m
                .polygons
                .iter()
                .map(|p| {
                    let to_ring = |pts: &[(f64, f64)]| {
                        Ring::new(pts.iter().map(|&(lon, lat)| proj.to_km(lon, lat)).collect())
                    };
                    let outer = to_ring(&p.outer)?;
                    let holes = p.holes.iter().map(|h| to_ring(h)).collect::<Result<_>>()?;
                    Ok(Polygon::new(outer, holes))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((MunicipalityId::new(&*m.id), MultiPolygon::new(parts)?, m.alt_m))
        })
        .collect()
}

/// One hourly reanalysis value with its cell footprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReanalysisHourlyRow {
    pub cell_id: String,
    pub lon_min: f64,
    pub lat_min: f64,
    pub lon_max: f64,
    pub lat_max: f64,
    pub date: NaiveDate,
    pub hour: u32,
    pub temp: f64,
}

/// One pre-aggregated daily-maximum reanalysis value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReanalysisDailyRow {
    pub cell_id: String,
    pub lon_min: f64,
    pub lat_min: f64,
    pub lon_max: f64,
    pub lat_max: f64,
    pub date: NaiveDate,
    pub tmax: f64,
}

pub fn read_reanalysis_hourly_csv(path: &Path) -> Result<Vec<ReanalysisHourlyRow>> {
    let mut rdr = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    rdr.deserialize().map(|r| r.map_err(Into::into)).collect()
}

pub fn read_reanalysis_daily_csv(path: &Path) -> Result<Vec<ReanalysisDailyRow>> {
    let mut rdr = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    rdr.deserialize().map(|r| r.map_err(Into::into)).collect()
}

pub fn write_reanalysis_hourly_csv(path: &Path, rows: &[ReanalysisHourlyRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for row in rows {
        wtr.serialize(row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_reanalysis_daily_csv(path: &Path, rows: &[ReanalysisDailyRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for row in rows {
        wtr.serialize(row)?;
    }
    wtr.flush()?;
    Ok(())
}

struct CellSlot {
    bbox: (f64, f64, f64, f64),
    values: Vec<Option<f64>>,
}

fn finish_reanalysis(
    cells: BTreeMap<String, CellSlot>,
    calendar: &StudyCalendar,
    proj: &Projection,
) -> Result<ReanalysisGrid> {
    let mut ids = Vec::with_capacity(cells.len());
    let mut values = Vec::with_capacity(cells.len() * calendar.len());
    for (id, slot) in cells {
        let missing = slot.values.iter().filter(|v| v.is_none()).count();
        if missing > 0 {
            return Err(CoreError::Calendar(format!(
                "reanalysis cell {id} misses {missing} of {} study days",
                calendar.len()
            )));
        }
        let (lon_min, lat_min, lon_max, lat_max) = slot.bbox;
        let lo = proj.to_km(lon_min, lat_min);
        let hi = proj.to_km(lon_max, lat_max);
        ids.push((CellId::new(id), Rect::new(lo.x, lo.y, hi.x, hi.y)?));
        values.extend(slot.values.into_iter().map(|v| v.unwrap()));
    }
    ReanalysisGrid::new(ids, values, calendar.len())
}

fn cell_slot<'a>(
    cells: &'a mut BTreeMap<String, CellSlot>,
    id: &str,
    bbox: (f64, f64, f64, f64),
    n_days: usize,
) -> Result<&'a mut CellSlot> {
    let slot = cells.entry(id.to_string()).or_insert_with(|| CellSlot {
        bbox,
        values: vec![None; n_days],
    });
    if slot.bbox != bbox {
        return Err(CoreError::Geometry(format!(
            "reanalysis cell {id} has inconsistent bounds"
        )));
    }
    Ok(slot)
}

/// Builds the complete cell-by-day matrix from pre-aggregated rows. Every
/// study day must appear exactly once per cell; rows outside the calendar
/// are ignored.
pub fn assemble_reanalysis_daily(
    rows: &[ReanalysisDailyRow],
    calendar: &StudyCalendar,
    proj: &Projection,
) -> Result<ReanalysisGrid> {
    let day_index: HashMap<NaiveDate, usize> = calendar
        .days()
        .iter()
        .enumerate()
        .map(|(i, k)| (k.date, i))
        .collect();
    let mut cells: BTreeMap<String, CellSlot> = BTreeMap::new();
    for row in rows {
        let bbox = (row.lon_min, row.lat_min, row.lon_max, row.lat_max);
        let slot = cell_slot(&mut cells, &row.cell_id, bbox, calendar.len())?;
        let Some(&i) = day_index.get(&row.date) else {
            continue;
        };
        if slot.values[i].is_some() {
            return Err(CoreError::InvalidConfig(format!(
                "duplicate reanalysis value for cell {} on {}",
                row.cell_id, row.date
            )));
        }
        slot.values[i] = Some(row.tmax);
    }
    finish_reanalysis(cells, calendar, proj)
}

/// Collapses hourly rows to daily maxima per cell, then builds the matrix.
/// Only study days are aggregated, and each needs all 24 hours.
pub fn assemble_reanalysis_hourly(
    rows: &[ReanalysisHourlyRow],
    calendar: &StudyCalendar,
    proj: &Projection,
) -> Result<ReanalysisGrid> {
    let day_index: HashMap<NaiveDate, usize> = calendar
        .days()
        .iter()
        .enumerate()
        .map(|(i, k)| (k.date, i))
        .collect();
    let mut hourly: BTreeMap<String, ((f64, f64, f64, f64), Vec<(NaiveDate, u32, f64)>)> =
        BTreeMap::new();
    for row in rows {
        let bbox = (row.lon_min, row.lat_min, row.lon_max, row.lat_max);
        let entry = hourly
            .entry(row.cell_id.clone())
            .or_insert_with(|| (bbox, Vec::new()));
        if entry.0 != bbox {
            return Err(CoreError::Geometry(format!(
                "reanalysis cell {} has inconsistent bounds",
                row.cell_id
            )));
        }
        if day_index.contains_key(&row.date) {
            entry.1.push((row.date, row.hour, row.temp));
        }
    }
    let mut cells: BTreeMap<String, CellSlot> = BTreeMap::new();
    for (id, (bbox, recs)) in hourly {
        let slot = cell_slot(&mut cells, &id, bbox, calendar.len())?;
        for (date, tmax) in daily_max_from_hourly(&recs)? {
            slot.values[day_index[&date]] = Some(tmax);
        }
    }
    finish_reanalysis(cells, calendar, proj)
}

#[derive(Serialize, Deserialize)]
struct MortalityRow {
    id: String,
    date: NaiveDate,
    municipality_id: String,
    age: u32,
    sex: String,
    icd10: String,
}

pub fn read_mortality_csv(path: &Path) -> Result<Vec<MortalityRecord>> {
    let mut rdr = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    rdr.deserialize()
        .map(|r| {
            let row: MortalityRow = r?;
            Ok(MortalityRecord {
                id: row.id,
                date: row.date,
                municipality: MunicipalityId::new(row.municipality_id),
                age: row.age,
                sex: row.sex,
                icd10: row.icd10,
            })
        })
        .collect()
}

pub fn write_mortality_csv(path: &Path, records: &[MortalityRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for r in records {
        wtr.serialize(MortalityRow {
            id: r.id.clone(),
            date: r.date,
            municipality_id: r.municipality.as_str().to_string(),
            age: r.age,
            sex: r.sex.clone(),
            icd10: r.icd10.clone(),
        })?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes a surface as long-format `municipality_id,date,tmax,method` rows,
/// municipality-major in storage order.
pub fn write_surface_csv(path: &Path, surface: &ExposureSurface) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    wtr.write_record(["municipality_id", "date", "tmax", "method"])?;
    let method = surface.method.to_string();
    for (m, muni) in surface.municipalities.iter().enumerate() {
        for (d, day) in surface.days.iter().enumerate() {
            wtr.write_record([
                muni.as_str(),
                &day.date.to_string(),
                &surface.get(m, d).to_string(),
                &method,
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Rebuilds a surface from long rows. All rows must share one method tag,
/// dates must lie in the calendar, and the municipality-by-day matrix must
/// be complete. Provenance is supplied by the caller because the table does
/// not carry it; pipeline artifacts keep it in a sidecar.
pub fn read_surface_csv(
    path: &Path,
    calendar: &StudyCalendar,
    provenance: Provenance,
) -> Result<ExposureSurface> {
    #[derive(Deserialize)]
    struct Row {
        municipality_id: String,
        date: NaiveDate,
        tmax: f64,
        method: String,
    }
    let day_index: HashMap<NaiveDate, usize> = calendar
        .days()
        .iter()
        .enumerate()
        .map(|(i, k)| (k.date, i))
        .collect();
    let mut rdr = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let mut method: Option<MethodTag> = None;
    let mut muni_index: HashMap<String, usize> = HashMap::new();
    let mut munis: Vec<MunicipalityId> = Vec::new();
    let mut grid: Vec<Vec<Option<f64>>> = Vec::new();
    for rec in rdr.deserialize() {
        let row: Row = rec?;
        let tag = MethodTag::parse(&row.method)?;
        match method {
            None => method = Some(tag),
            Some(prev) if prev == tag => {}
            Some(prev) => {
                return Err(CoreError::InvalidConfig(format!(
                    "surface mixes method tags {prev} and {tag}"
                )))
            }
        }
        let &mut m = muni_index.entry(row.municipality_id.clone()).or_insert_with(|| {
            munis.push(MunicipalityId::new(row.municipality_id.clone()));
            grid.push(vec![None; calendar.len()]);
            munis.len() - 1
        });
        let Some(&d) = day_index.get(&row.date) else {
            return Err(CoreError::Calendar(format!(
                "surface date {} is outside the study calendar",
                row.date
            )));
        };
        if grid[m][d].is_some() {
            return Err(CoreError::InvalidConfig(format!(
                "duplicate surface value for {} on {}",
                row.municipality_id, row.date
            )));
        }
        grid[m][d] = Some(row.tmax);
    }
    let method = method.ok_or_else(|| CoreError::InvalidConfig("surface file is empty".into()))?;
    let mut values = Vec::with_capacity(munis.len() * calendar.len());
    for (m, row) in grid.iter().enumerate() {
        for (d, v) in row.iter().enumerate() {
            match v {
                Some(v) => values.push(*v),
                None => {
                    return Err(CoreError::Calendar(format!(
                        "surface misses {} on {}",
                        munis[m],
                        calendar.days()[d].date
                    )))
                }
            }
        }
    }
    ExposureSurface::new(method, munis, calendar.days().to_vec(), values, provenance)
}

fn parse_flag(s: &str, context: &str) -> Result<bool> {
    match s {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        other => Err(CoreError::InvalidConfig(format!(
            "{context}: expected 0/1 flag, got {other:?}"
        ))),
    }
}

/// Writes one run shape's calendar as `municipality_id,date,heatwave,spec_id`.
pub fn write_heatwave_csv(path: &Path, cal: &HeatwaveCalendar) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    wtr.write_record(["municipality_id", "date", "heatwave", "spec_id"])?;
    for (m, muni) in cal.municipalities.iter().enumerate() {
        for (d, day) in cal.days.iter().enumerate() {
            wtr.write_record([
                muni.as_str(),
                &day.date.to_string(),
                if cal.get(m, d) { "1" } else { "0" },
                &cal.spec.id,
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Rebuilds a flag calendar. The table only stores the spec id, so the full
/// run shape and threshold rule come from the caller's registry; a mismatch
/// between the file's spec_id column and `spec.id` is an error.
pub fn read_heatwave_csv(
    path: &Path,
    spec: HeatwaveSpec,
    threshold_rule: ThresholdRule,
    calendar: &StudyCalendar,
) -> Result<HeatwaveCalendar> {
    #[derive(Deserialize)]
    struct Row {
        municipality_id: String,
        date: NaiveDate,
        heatwave: String,
        spec_id: String,
    }
    let day_index: HashMap<NaiveDate, usize> = calendar
        .days()
        .iter()
        .enumerate()
        .map(|(i, k)| (k.date, i))
        .collect();
    let mut rdr = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let mut muni_index: HashMap<String, usize> = HashMap::new();
    let mut munis: Vec<MunicipalityId> = Vec::new();
    let mut grid: Vec<Vec<Option<bool>>> = Vec::new();
    for rec in rdr.deserialize() {
        let row: Row = rec?;
        if row.spec_id != spec.id {
            return Err(CoreError::InvalidConfig(format!(
                "calendar file is for run shape {:?}, expected {:?}",
                row.spec_id, spec.id
            )));
        }
        let &mut m = muni_index.entry(row.municipality_id.clone()).or_insert_with(|| {
            munis.push(MunicipalityId::new(row.municipality_id.clone()));
            grid.push(vec![None; calendar.len()]);
            munis.len() - 1
        });
        let Some(&d) = day_index.get(&row.date) else {
            return Err(CoreError::Calendar(format!(
                "calendar date {} is outside the study calendar",
                row.date
            )));
        };
        if grid[m][d].is_some() {
            return Err(CoreError::InvalidConfig(format!(
                "duplicate flag for {} on {}",
                row.municipality_id, row.date
            )));
        }
        grid[m][d] = Some(parse_flag(&row.heatwave, "heatwave column")?);
    }
    let mut flags = Vec::with_capacity(munis.len() * calendar.len());
    for (m, row) in grid.iter().enumerate() {
        for (d, v) in row.iter().enumerate() {
            match v {
                Some(v) => flags.push(*v),
                None => {
                    return Err(CoreError::Calendar(format!(
                        "calendar misses {} on {}",
                        munis[m],
                        calendar.days()[d].date
                    )))
                }
            }
        }
    }
    HeatwaveCalendar::new(spec, threshold_rule, munis, calendar.days().to_vec(), flags)
}

/// Writes referent rows as
/// `stratum,case,date,municipality_id,exposure_<method>...,hw_<spec>...,holiday`.
/// The exposure and flag columns are the (sorted) key sets of the first row;
/// every row must carry exactly those keys.
pub fn write_cco_csv(path: &Path, rows: &[CcoRow]) -> Result<()> {
    let Some(first) = rows.first() else {
        return Err(CoreError::InvalidConfig(
            "refusing to write an empty referent table".into(),
        ));
    };
    let methods: Vec<String> = first.exposure.keys().cloned().collect();
    let specs: Vec<String> = first.heatwave.keys().cloned().collect();
    let mut header = vec![
        "stratum".to_string(),
        "case".to_string(),
        "date".to_string(),
        "municipality_id".to_string(),
    ];
    header.extend(methods.iter().map(|m| format!("exposure_{m}")));
    header.extend(specs.iter().map(|s| format!("hw_{s}")));
    header.push("holiday".to_string());
    let mut wtr = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    wtr.write_record(&header)?;
    for row in rows {
        let mut rec = vec![
            row.stratum.clone(),
            (row.case as u8).to_string(),
            row.date.to_string(),
            row.municipality.as_str().to_string(),
        ];
        for m in &methods {
            let v = row.exposure.get(m).ok_or_else(|| {
                CoreError::MissingExposure(format!("row in {} lacks method {m}", row.stratum))
            })?;
            rec.push(v.to_string());
        }
        for s in &specs {
            let v = row.heatwave.get(s).ok_or_else(|| {
                CoreError::MissingExposure(format!("row in {} lacks run shape {s}", row.stratum))
            })?;
            rec.push((*v as u8).to_string());
        }
        rec.push((row.holiday as u8).to_string());
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_cco_csv(path: &Path) -> Result<Vec<CcoRow>> {
    let mut rdr = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let header = rdr.headers()?.clone();
    let fixed = ["stratum", "case", "date", "municipality_id"];
    for (i, want) in fixed.iter().enumerate() {
        if header.get(i) != Some(want) {
            return Err(CoreError::InvalidConfig(format!(
                "referent table column {i} should be {want}"
            )));
        }
    }
    if header.get(header.len() - 1) != Some("holiday") {
        return Err(CoreError::InvalidConfig(
            "referent table must end with a holiday column".into(),
        ));
    }
    let mut methods: Vec<(usize, String)> = Vec::new();
    let mut specs: Vec<(usize, String)> = Vec::new();
    for i in fixed.len()..header.len() - 1 {
        let col = header.get(i).unwrap();
        if let Some(m) = col.strip_prefix("exposure_") {
            methods.push((i, m.to_string()));
        } else if let Some(s) = col.strip_prefix("hw_") {
            specs.push((i, s.to_string()));
        } else {
            return Err(CoreError::InvalidConfig(format!(
                "unrecognized referent table column {col:?}"
            )));
        }
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let get = |i: usize| rec.get(i).unwrap_or("");
        let date: NaiveDate = get(2)
            .parse()
            .map_err(|_| CoreError::InvalidConfig(format!("bad date {:?}", get(2))))?;
        let mut exposure = BTreeMap::new();
        for (i, m) in &methods {
            let v: f64 = get(*i).parse().map_err(|_| {
                CoreError::InvalidConfig(format!("bad exposure value {:?}", get(*i)))
            })?;
            exposure.insert(m.clone(), v);
        }
        let mut heatwave = BTreeMap::new();
        for (i, s) in &specs {
            heatwave.insert(s.clone(), parse_flag(get(*i), "hw column")?);
        }
        out.push(CcoRow {
            stratum: get(0).to_string(),
            case: parse_flag(get(1), "case column")?,
            date,
            municipality: MunicipalityId::new(get(3)),
            exposure,
            heatwave,
            holiday: parse_flag(get(header.len() - 1), "holiday column")?,
        });
    }
    Ok(out)
}

/// Writes a risk curve as `bin_mid,logrr_med,logrr_lo,logrr_hi,rr_norm`.
pub fn write_curve_csv(path: &Path, curve: &RiskCurve) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    wtr.write_record(["bin_mid", "logrr_med", "logrr_lo", "logrr_hi", "rr_norm"])?;
    for i in 0..curve.bin_mid.len() {
        wtr.write_record([
            curve.bin_mid[i].to_string(),
            curve.logrr_med[i].to_string(),
            curve.logrr_lo[i].to_string(),
            curve.logrr_hi[i].to_string(),
            curve.rr_norm[i].to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a risk curve back. The reference bin is recovered as the median
/// column's argmin, and the stored ratio column must agree with the one the
/// median column implies.
pub fn read_curve_csv(path: &Path) -> Result<RiskCurve> {
    #[derive(Deserialize)]
    struct Row {
        bin_mid: f64,
        logrr_med: f64,
        logrr_lo: f64,
        logrr_hi: f64,
        rr_norm: f64,
    }
    let mut rdr = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let rows: Vec<Row> = rdr
        .deserialize()
        .collect::<std::result::Result<_, _>>()?;
    if rows.is_empty() {
        return Err(CoreError::InvalidConfig("curve file is empty".into()));
    }
    let argmin = rows
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.logrr_med.total_cmp(&b.1.logrr_med))
        .map(|(i, _)| i)
        .unwrap();
    let med0 = rows[argmin].logrr_med;
    for (i, row) in rows.iter().enumerate() {
        let implied = if i == argmin {
            1.0
        } else {
            (row.logrr_med - med0).exp()
        };
        if (row.rr_norm - implied).abs() > 1e-9 * implied.max(1.0) {
            return Err(CoreError::InvalidConfig(format!(
                "rr_norm column disagrees with the median column at bin {i}"
            )));
        }
    }
    Ok(RiskCurve {
        bin_mid: rows.iter().map(|r| r.bin_mid).collect(),
        logrr_med: rows.iter().map(|r| r.logrr_med).collect(),
        logrr_lo: rows.iter().map(|r| r.logrr_lo).collect(),
        logrr_hi: rows.iter().map(|r| r.logrr_hi).collect(),
        mmt: rows[argmin].bin_mid,
        rr_norm: rows.iter().map(|r| r.rr_norm).collect(),
    })
}

/// One model parameter with a central 95% interval, for fit-summary JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub parameter: String,
    pub estimate: f64,
    /// 2.5% bound.
    pub lo: f64,
    /// 97.5% bound.
    pub hi: f64,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calendar::{SeasonWindow, StudyCalendar};
    use crate::epi::risk_curve_from;
    use crate::types::MethodTag;

    fn cal() -> StudyCalendar {
        StudyCalendar::new(SeasonWindow::june_to_august(), 2001, 1).unwrap()
    }

    fn tmp(name: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(name);
        (dir, path)
    }

    #[test]
    fn station_rows_roundtrip_and_assemble() {
        let calendar = cal();
        let d0 = calendar.days()[0].date;
        let rows = vec![
            StationRow {
                station_id: "b".into(),
                lon: 11.0,
                lat: 46.2,
                alt_m: 300.0,
                date: d0,
                tmax: Some(27.25),
            },
            StationRow {
                station_id: "a".into(),
                lon: 11.4,
                lat: 46.0,
                alt_m: 900.0,
                date: d0,
                tmax: None,
            },
            StationRow {
                station_id: "a".into(),
                lon: 11.4,
                lat: 46.0,
                alt_m: 900.0,
                date: d0 + chrono::Duration::days(1),
                tmax: Some(19.5),
            },
            // outside the calendar, silently dropped
            StationRow {
                station_id: "a".into(),
                lon: 11.4,
                lat: 46.0,
                alt_m: 900.0,
                date: NaiveDate::from_ymd_opt(2001, 1, 15).unwrap(),
                tmax: Some(-3.0),
            },
        ];
        let (_dir, path) = tmp("stations.csv");
        write_station_csv(&path, &rows).unwrap();
        assert_eq!(read_station_csv(&path).unwrap(), rows);

        let proj = Projection::new(11.0, 46.0);
        let series = assemble_stations(&rows, &calendar, &proj).unwrap();
        assert_eq!(series.len(), 2);
        assert_eq!(series[0].id.as_str(), "a");
        assert_eq!(series[0].values[0], None);
        assert_eq!(series[0].values[1], Some(19.5));
        assert_eq!(series[1].values[0], Some(27.25));
        assert_eq!(series[1].n_missing(), calendar.len() - 1);

        let mut dup = rows.clone();
        dup.push(rows[0].clone());
        assert!(assemble_stations(&dup, &calendar, &proj).is_err());
    }

    #[test]
    fn geojson_roundtrip_and_projection() {
        let outer = vec![(11.0, 46.0), (11.4, 46.0), (11.4, 46.3), (11.0, 46.3)];
        let hole = vec![(11.1, 46.1), (11.2, 46.1), (11.2, 46.2), (11.1, 46.2)];
        let munis = vec![
            RawMunicipality {
                id: "m1".into(),
                alt_m: 250.0,
                polygons: vec![RawPolygon {
                    outer: outer.clone(),
                    holes: vec![hole],
                }],
            },
            RawMunicipality {
                id: "m2".into(),
                alt_m: 700.0,
                polygons: vec![
                    RawPolygon {
                        outer: vec![(11.5, 46.0), (11.7, 46.0), (11.7, 46.2)],
                        holes: vec![],
                    },
                    RawPolygon {
                        outer: vec![(11.8, 46.0), (11.9, 46.0), (11.9, 46.1)],
                        holes: vec![],
                    },
                ],
            },
        ];
        let (_dir, path) = tmp("munis.geojson");
        write_municipalities_geojson(&path, &munis).unwrap();
        let back = read_municipalities_geojson(&path).unwrap();
        // the writer closes rings, the reader keeps whatever it was given;
        // compare after normalizing
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].id, "m1");
        assert_eq!(back[1].polygons.len(), 2);
        assert_eq!(back[0].polygons[0].outer[..4], munis[0].polygons[0].outer[..]);

        let proj = Projection::new(11.4, 46.1);
        let entries = project_municipalities(&back, &proj).unwrap();
        assert_eq!(entries[0].0.as_str(), "m1");
        let hole_center = proj.to_km(11.15, 46.15);
        assert!(!entries[0].1.contains(&hole_center));
        let solid = proj.to_km(11.05, 46.05);
        assert!(entries[0].1.contains(&solid));
    }

    #[test]
    fn reanalysis_daily_roundtrip_and_assembly() {
        let calendar = cal();
        let mut rows = Vec::new();
        for (ci, (lon0, lon1)) in [(11.0f64, 11.5f64), (11.5, 12.0)].iter().enumerate() {
            for day in calendar.days() {
                rows.push(ReanalysisDailyRow {
                    cell_id: format!("c{ci}"),
                    lon_min: *lon0,
                    lat_min: 46.0,
                    lon_max: *lon1,
                    lat_max: 46.5,
                    date: day.date,
                    tmax: 20.0 + ci as f64 + day.day as f64 * 0.01,
                });
            }
        }
        let (_dir, path) = tmp("rea.csv");
        write_reanalysis_daily_csv(&path, &rows).unwrap();
        assert_eq!(read_reanalysis_daily_csv(&path).unwrap(), rows);

        let proj = Projection::new(11.5, 46.25);
        let grid = assemble_reanalysis_daily(&rows, &calendar, &proj).unwrap();
        assert_eq!(grid.cells.len(), 2);
        assert_eq!(grid.n_days(), calendar.len());
        assert_eq!(grid.cell_row(0)[0], 20.01);
        assert_eq!(grid.cell_row(1)[1], 21.02);

        let short = &rows[..rows.len() - 1];
        assert!(assemble_reanalysis_daily(short, &calendar, &proj).is_err());
    }

    #[test]
    fn reanalysis_hourly_daily_max_matches() {
        let calendar = cal();
        let proj = Projection::new(11.5, 46.25);
        let mut rows = Vec::new();
        for day in calendar.days() {
            for hour in 0..24u32 {
                rows.push(ReanalysisHourlyRow {
                    cell_id: "c0".into(),
                    lon_min: 11.0,
                    lat_min: 46.0,
                    lon_max: 11.5,
                    lat_max: 46.5,
                    date: day.date,
                    hour,
                    temp: 15.0 + (hour as f64 - 14.0).abs() * -0.5 + day.day as f64 * 0.01,
                });
            }
        }
        let grid = assemble_reanalysis_hourly(&rows, &calendar, &proj).unwrap();
        // hottest hour is 14:00
        assert_eq!(grid.cell_row(0)[0], 15.0 + 0.01);

        let short: Vec<_> = rows[..23].to_vec();
        let mut with_incomplete = rows.clone();
        with_incomplete.truncate(rows.len() - 1);
        assert!(assemble_reanalysis_hourly(&with_incomplete, &calendar, &proj).is_err());
        assert!(assemble_reanalysis_hourly(&short, &calendar, &proj).is_err());
    }

    #[test]
    fn mortality_rows_roundtrip() {
        let records = vec![
            MortalityRecord {
                id: "d1".into(),
                date: NaiveDate::from_ymd_opt(2001, 7, 14).unwrap(),
                municipality: MunicipalityId::new("m1"),
                age: 83,
                sex: "f".into(),
                icd10: "I21".into(),
            },
            MortalityRecord {
                id: "d2".into(),
                date: NaiveDate::from_ymd_opt(2001, 8, 2).unwrap(),
                municipality: MunicipalityId::new("m2"),
                age: 45,
                sex: "m".into(),
                icd10: "C34".into(),
            },
        ];
        let (_dir, path) = tmp("deaths.csv");
        write_mortality_csv(&path, &records).unwrap();
        let back = read_mortality_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].municipality, records[0].municipality);
        assert_eq!(back[1].icd10, "C34");
    }

    #[test]
    fn surface_roundtrip_is_exact() {
        let calendar = cal();
        let munis = vec![MunicipalityId::new("m1"), MunicipalityId::new("m2")];
        let values: Vec<f64> = (0..2 * calendar.len())
            .map(|i| 18.0 + (i as f64).sin() * 7.3)
            .collect();
        let surface = ExposureSurface::new(
            MethodTag::GqrmTau(0.5),
            munis,
            calendar.days().to_vec(),
            values,
            Provenance::new(7, "cfg", "test"),
        )
        .unwrap();
        let (_dir, path) = tmp("surface.csv");
        write_surface_csv(&path, &surface).unwrap();
        let back = read_surface_csv(&path, &calendar, Provenance::new(7, "cfg", "test")).unwrap();
        assert_eq!(back.method, surface.method);
        assert_eq!(back.municipalities, surface.municipalities);
        assert_eq!(back.values(), surface.values());
    }

    #[test]
    fn heatwave_calendar_roundtrip_checks_spec_id() {
        let calendar = cal();
        let spec = HeatwaveSpec::new("1daylag", 2, 1).unwrap();
        let munis = vec![MunicipalityId::new("m1")];
        let flags: Vec<bool> = (0..calendar.len()).map(|i| i % 7 == 3).collect();
        let hw = HeatwaveCalendar::new(
            spec.clone(),
            ThresholdRule::Quantile(0.95),
            munis,
            calendar.days().to_vec(),
            flags.clone(),
        )
        .unwrap();
        let (_dir, path) = tmp("hw.csv");
        write_heatwave_csv(&path, &hw).unwrap();
        let back = read_heatwave_csv(
            &path,
            spec.clone(),
            ThresholdRule::Quantile(0.95),
            &calendar,
        )
        .unwrap();
        assert_eq!(back.flags(), &flags[..]);

        let wrong = HeatwaveSpec::new("base", 1, 0).unwrap();
        assert!(read_heatwave_csv(&path, wrong, ThresholdRule::Quantile(0.95), &calendar).is_err());
    }

    #[test]
    fn referent_rows_roundtrip_with_dynamic_columns() {
        let mk = |stratum: &str, case: bool, day: u32| {
            let mut exposure = BTreeMap::new();
            exposure.insert("ggpm".to_string(), 24.5 + day as f64);
            exposure.insert("gqrm-0.5".to_string(), 25.0 + day as f64 * 0.5);
            let mut heatwave = BTreeMap::new();
            heatwave.insert("base".to_string(), day > 10);
            heatwave.insert("1daylag".to_string(), false);
            CcoRow {
                stratum: stratum.to_string(),
                case,
                date: NaiveDate::from_ymd_opt(2001, 7, day).unwrap(),
                municipality: MunicipalityId::new("m1"),
                exposure,
                heatwave,
                holiday: day == 15,
            }
        };
        let rows = vec![mk("s1", true, 12), mk("s1", false, 5), mk("s1", false, 19)];
        let (_dir, path) = tmp("cco.csv");
        write_cco_csv(&path, &rows).unwrap();
        assert_eq!(read_cco_csv(&path).unwrap(), rows);

        let mut bad = rows.clone();
        bad[2].exposure.remove("ggpm");
        assert!(write_cco_csv(&path, &bad).is_err());
    }

    #[test]
    fn curve_roundtrip_recovers_reference_bin() {
        let binning = crate::epi::Binning::from_observed([10.0, 30.0], 8).unwrap();
        let med: Vec<f64> = (0..8).map(|i| (i as f64 - 5.0).powi(2) * 0.01).collect();
        let lo: Vec<f64> = med.iter().map(|m| m - 0.3).collect();
        let hi: Vec<f64> = med.iter().map(|m| m + 0.3).collect();
        let curve = risk_curve_from(&binning, &med, &lo, &hi).unwrap();
        let (_dir, path) = tmp("curve.csv");
        write_curve_csv(&path, &curve).unwrap();
        let back = read_curve_csv(&path).unwrap();
        assert_eq!(back, curve);

        // tampered ratio column is caught
        let text = std::fs::read_to_string(&path).unwrap();
        let tampered = text.replace(",1\n", ",1.5\n");
        assert_ne!(text, tampered);
        std::fs::write(&path, tampered).unwrap();
        assert!(read_curve_csv(&path).is_err());
    }

    #[test]
    fn json_helpers_roundtrip() {
        let summaries = vec![ParamSummary {
            parameter: "alpha".into(),
            estimate: 0.61,
            lo: 0.4,
            hi: 0.82,
        }];
        let (_dir, path) = tmp("fit.json");
        write_json(&path, &summaries).unwrap();
        let back: Vec<ParamSummary> = read_json(&path).unwrap();
        assert_eq!(back, summaries);
    }
}
