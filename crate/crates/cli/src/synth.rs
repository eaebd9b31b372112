//! Synthetic end-to-end scenario with known ground truth.
//!
//! One generative temperature field drives everything: station records are
//! noisy samples of it, the gridded product is a smoothed, biased and
//! variance-compressed copy of it, and mortality is drawn from a Poisson
//! model whose log rate carries a piecewise-linear effect of the lagged
//! field plus holiday and heatwave terms. Every injected value lands in
//! the truth manifest so recovery can be checked.

use std::collections::BTreeSet;

use chrono::{Datelike, NaiveDate};
use heatmort::error::{CoreError, Result};
use heatmort::geometry::{Point, Projection};
use heatmort::ggpm::{self, GgpmParams};
use heatmort::heatwave::{detect, link_exposure, threshold_for};
use heatmort::io;
use heatmort::rng::substream;
use heatmort::types::AltitudeTransform;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::artifacts::{provenance, Artifacts};
use crate::config::PipelineConfig;
use crate::logging;
use crate::pipeline::{summer_calendar, surface_calendar};

const REGION_LON0: f64 = 11.0;
const REGION_LAT0: f64 = 46.0;
const CELL_DLON: f64 = 0.1;
const CELL_DLAT: f64 = 0.08;
/// Weight of a cell's own value when blurring the gridded product.
const REA_SMOOTHING: f64 = 0.6;
/// Diurnal amplitude of the emitted hourly curve; the 14:00 value is the
/// daily maximum exactly.
const DIURNAL_AMP: f64 = 6.0;
const PEAK_HOUR: f64 = 14.0;
/// Fraction of deaths assigned to causes outside both outcome groups.
const OTHER_FRAC: f64 = 0.05;

const CARDIO_CODES: [&str; 5] = ["I21", "I50", "I63", "J18", "J44"];
const CANCER_CODES: [&str; 3] = ["C34", "C50", "C18"];
const OTHER_CODES: [&str; 3] = ["K70", "V89", "X59"];

/// Everything injected into the scenario, written next to the inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthManifest {
    pub params: GgpmParams,
    pub nu: f64,
    pub alt_mean: f64,
    pub alt_sd: f64,
    pub lon0: f64,
    pub lat0: f64,
    pub holiday_rr: f64,
    pub heatwave_rr: f64,
    pub slope_per_degree: f64,
    pub kink_celsius: f64,
    pub heatwave_effect_id: String,
    pub population: f64,
    pub expected_records: f64,
    pub n_records: usize,
    pub n_summer_adult_cardio: usize,
    pub rea_compress: f64,
    pub rea_bias: f64,
    pub rea_smoothing: f64,
    pub missing_frac: f64,
    pub n_stations: usize,
    pub n_municipalities: usize,
}

fn altitude_at(lon: f64, lat: f64, nx: usize, ny: usize) -> f64 {
    let u = (lon - REGION_LON0) / (CELL_DLON * nx as f64);
    let v = (lat - REGION_LAT0) / (CELL_DLAT * ny as f64);
    200.0 + 1200.0 * (0.5 + 0.5 * (1.3 * u + 0.7).sin() * (1.1 * v - 0.4).cos())
}

fn truth_params(cfg: &PipelineConfig) -> GgpmParams {
    let s = &cfg.synth;
    GgpmParams {
        beta0: s.beta0,
        beta_alt: s.beta_alt,
        a: s.ar_coef,
        sigma2_process: s.sigma2_process,
        scale: s.matern_scale,
        sigma2_nugget: s.sigma2_nugget,
    }
}

/// Small-rate Poisson draw by inverse-exponential accumulation.
fn poisson<R: Rng>(rng: &mut R, lambda: f64) -> u32 {
    let limit = (-lambda).exp();
    let mut prod = rng.gen::<f64>();
    let mut k = 0u32;
    while prod > limit {
        prod *= rng.gen::<f64>();
        k += 1;
    }
    k
}

pub fn simulate(cfg: &PipelineConfig, arts: &Artifacts) -> Result<()> {
    let s = &cfg.synth;
    let (nx, ny) = (s.grid_nx, s.grid_ny);
    let n_m = nx * ny;
    if n_m == 0 || s.n_stations < 2 {
        return Err(CoreError::InvalidConfig(
            "synthetic scenario needs a municipality grid and at least two stations".into(),
        ));
    }
    let wide = surface_calendar(cfg)?;
    let summer = summer_calendar(cfg)?;
    let lon_span = CELL_DLON * nx as f64;
    let lat_span = CELL_DLAT * ny as f64;
    let (lon0, lat0) = (REGION_LON0 + lon_span / 2.0, REGION_LAT0 + lat_span / 2.0);
    let proj = Projection::new(lon0, lat0);

    // Municipality squares with a smooth altitude field over the region.
    let mut munis = Vec::with_capacity(n_m);
    for j in 0..ny {
        for i in 0..nx {
            let (lo_lon, lo_lat) = (
                REGION_LON0 + CELL_DLON * i as f64,
                REGION_LAT0 + CELL_DLAT * j as f64,
            );
            let (hi_lon, hi_lat) = (lo_lon + CELL_DLON, lo_lat + CELL_DLAT);
            let (c_lon, c_lat) = ((lo_lon + hi_lon) / 2.0, (lo_lat + hi_lat) / 2.0);
            munis.push(io::RawMunicipality {
                id: format!("M{:03}", j * nx + i + 1),
                alt_m: altitude_at(c_lon, c_lat, nx, ny),
                polygons: vec![io::RawPolygon {
                    outer: vec![
                        (lo_lon, lo_lat),
                        (hi_lon, lo_lat),
                        (hi_lon, hi_lat),
                        (lo_lon, hi_lat),
                    ],
                    holes: vec![],
                }],
            });
        }
    }

    // Stations: uniform over the region, plus one with a long gap that the
    // selection rule drops.
    let mut st_rng = substream(cfg.seed(), "synth-stations");
    let mut station_lonlat = Vec::with_capacity(s.n_stations + 1);
    for _ in 0..=s.n_stations {
        let lon = REGION_LON0 + lon_span * st_rng.gen::<f64>();
        let lat = REGION_LAT0 + lat_span * st_rng.gen::<f64>();
        station_lonlat.push((lon, lat));
    }
    let station_alt: Vec<f64> = station_lonlat
        .iter()
        .map(|&(lon, lat)| altitude_at(lon, lat, nx, ny))
        .collect();
    // Standardize with the stations that survive selection, matching what
    // the ingest stage will fit.
    let alt_tf = AltitudeTransform::fit(&station_alt[..s.n_stations])?;

    // One generative field over stations and municipality centres.
    let mut points: Vec<Point> = station_lonlat
        .iter()
        .map(|&(lon, lat)| proj.to_km(lon, lat))
        .collect();
    let mut point_alt: Vec<f64> = station_alt.iter().map(|&a| alt_tf.apply(a)).collect();
    let centroid_offset = points.len();
    for m in &munis {
        let p = &m.polygons[0].outer;
        let (c_lon, c_lat) = ((p[0].0 + p[2].0) / 2.0, (p[0].1 + p[2].1) / 2.0);
        points.push(proj.to_km(c_lon, c_lat));
        point_alt.push(alt_tf.apply(m.alt_m));
    }

    let params = truth_params(cfg);
    let n_pts = points.len();
    // truth[point][flat wide day]
    let mut truth = vec![vec![0.0f64; wide.len()]; n_pts];
    for t in 1..=cfg.calendar.n_years {
        let (start, end) = wide.year_bounds(t)?;
        let n_days = end - start;
        let mut rng = substream(cfg.seed(), &format!("synth-field-{t}"));
        let obs = ggpm::simulate(&points, &point_alt, n_days, &params, cfg.ggpm.nu, &mut rng)?;
        for d in 0..n_days {
            for p in 0..n_pts {
                truth[p][start + d] = obs.y[d * n_pts + p]
                    .expect("generative model produces complete series");
            }
        }
    }

    // Station records: truth plus dropout; the sparse station loses a run
    // far longer than the selection rule tolerates.
    let mut miss_rng = substream(cfg.seed(), "synth-missing");
    let mut station_rows = Vec::with_capacity((s.n_stations + 1) * wide.len());
    for k in 0..=s.n_stations {
        let sparse = k == s.n_stations;
        let id = if sparse {
            "S00-sparse".to_string()
        } else {
            format!("S{:02}", k + 1)
        };
        let (lon, lat) = station_lonlat[k];
        for (i, key) in wide.days().iter().enumerate() {
            let knocked_out = if sparse {
                i < 40
            } else {
                miss_rng.gen::<f64>() < s.missing_frac
            };
            station_rows.push(io::StationRow {
                station_id: id.clone(),
                lon,
                lat,
                alt_m: station_alt[k],
                date: key.date,
                tmax: if knocked_out { None } else { Some(truth[k][i]) },
            });
        }
    }

    // Gridded product: blur across neighbouring cells, compress around the
    // per-cell mean, shift, then emit an hourly curve peaking at 14:00.
    let cell_truth: Vec<&Vec<f64>> = (0..n_m).map(|m| &truth[centroid_offset + m]).collect();
    let mut rea = vec![vec![0.0f64; wide.len()]; n_m];
    for j in 0..ny {
        for i in 0..nx {
            let c = j * nx + i;
            let mut neighbours = Vec::new();
            for (di, dj) in [(0i64, 0i64), (-1, 0), (1, 0), (0, -1), (0, 1)] {
                let (ni, nj) = (i as i64 + di, j as i64 + dj);
                if (0..nx as i64).contains(&ni) && (0..ny as i64).contains(&nj) {
                    neighbours.push((nj * nx as i64 + ni) as usize);
                }
            }
            for d in 0..wide.len() {
                let own = cell_truth[c][d];
                let hood =
                    neighbours.iter().map(|&n| cell_truth[n][d]).sum::<f64>()
                        / neighbours.len() as f64;
                rea[c][d] = REA_SMOOTHING * own + (1.0 - REA_SMOOTHING) * hood;
            }
            let mean = rea[c].iter().sum::<f64>() / wide.len() as f64;
            for d in 0..wide.len() {
                rea[c][d] = mean + s.rea_compress * (rea[c][d] - mean) + s.rea_bias;
            }
        }
    }
    let mut rea_rows = Vec::with_capacity(n_m * wide.len() * 24);
    for (c, m) in munis.iter().enumerate() {
        let p = &m.polygons[0].outer;
        for (d, key) in wide.days().iter().enumerate() {
            let tmax = rea[c][d];
            for hour in 0..24u32 {
                let phase = 2.0 * std::f64::consts::PI * (hour as f64 - PEAK_HOUR) / 24.0;
                rea_rows.push(io::ReanalysisHourlyRow {
                    cell_id: format!("C{:03}", c + 1),
                    lon_min: p[0].0,
                    lat_min: p[0].1,
                    lon_max: p[2].0,
                    lat_max: p[2].1,
                    date: key.date,
                    hour,
                    temp: tmax - DIURNAL_AMP * (1.0 - phase.cos()) / 2.0,
                });
            }
        }
    }

    // Holidays that fall inside the analyzed summer.
    let mut holidays = BTreeSet::new();
    for t in 0..cfg.calendar.n_years {
        let y = cfg.calendar.start_year + t as i32;
        holidays.insert(NaiveDate::from_ymd_opt(y, 6, 2).expect("valid date"));
        holidays.insert(NaiveDate::from_ymd_opt(y, 8, 15).expect("valid date"));
    }

    // Heatwave flags on the true municipal series, linked with the event
    // window, for the injected rate effect.
    let effect = cfg
        .heatwave
        .registry()?
        .into_iter()
        .find(|e| e.id == s.heatwave_effect_id)
        .expect("validated config names a registry entry");
    let season_id: Vec<u32> = summer.days().iter().map(|k| k.year).collect();
    let summer_idx: Vec<usize> = summer
        .days()
        .iter()
        .map(|k| wide.index_of(k.date).expect("summer lies inside the wide season"))
        .collect();
    let mut linked = vec![vec![false; summer.len()]; n_m];
    for m in 0..n_m {
        let series: Vec<f64> = summer_idx.iter().map(|&i| cell_truth[m][i]).collect();
        let threshold = threshold_for(&series, effect.rule)?;
        let flags = detect(&series, &season_id, threshold, &effect.spec)?;
        linked[m] = link_exposure(&flags, &season_id);
    }

    // Mortality: Poisson counts per municipality and day; effects apply on
    // summer days through the lagged true exposure.
    let mut mort_rng = substream(cfg.seed(), "synth-mortality");
    let pop_m = s.population / n_m as f64;
    let base = s.events_per_person * pop_m / wide.len() as f64;
    let ln_hol = s.holiday_rr.ln();
    let ln_hw = s.heatwave_rr.ln();
    let mut records = Vec::new();
    let mut counter = 0usize;
    for m in 0..n_m {
        let muni_id = munis[m].id.clone();
        for (i, key) in wide.days().iter().enumerate() {
            let mut log_rate = base.ln();
            if holidays.contains(&key.date) {
                log_rate += ln_hol;
            }
            if let Some(sd) = summer.index_of(key.date) {
                let lagged =
                    (cell_truth[m][i - 1] + cell_truth[m][i - 2] + cell_truth[m][i - 3]) / 3.0;
                log_rate += s.slope_per_degree * (lagged - s.kink_celsius).max(0.0);
                if linked[m][sd] {
                    log_rate += ln_hw;
                }
            }
            let k = poisson(&mut mort_rng, log_rate.exp());
            for _ in 0..k {
                counter += 1;
                let cause = mort_rng.gen::<f64>();
                let icd10 = if cause < s.cancer_frac {
                    CANCER_CODES[mort_rng.gen_range(0..CANCER_CODES.len())]
                } else if cause < s.cancer_frac + OTHER_FRAC {
                    OTHER_CODES[mort_rng.gen_range(0..OTHER_CODES.len())]
                } else {
                    CARDIO_CODES[mort_rng.gen_range(0..CARDIO_CODES.len())]
                };
                let age = if mort_rng.gen::<f64>() < s.underage_frac {
                    mort_rng.gen_range(1..18)
                } else {
                    18 + (77.0 * mort_rng.gen::<f64>().sqrt()) as u32
                };
                records.push(heatmort::casecrossover::MortalityRecord {
                    id: format!("D{counter:06}"),
                    date: key.date,
                    municipality: heatmort::types::MunicipalityId::new(muni_id.clone()),
                    age: age.min(99),
                    sex: if mort_rng.gen::<f64>() < 0.5 { "F" } else { "M" }.to_string(),
                    icd10: icd10.to_string(),
                });
            }
        }
    }
    let n_summer_adult_cardio = records
        .iter()
        .filter(|r| {
            r.age >= cfg.cco.min_age
                && (6..=8).contains(&r.date.month())
                && heatmort::casecrossover::cause_group(&r.icd10)
                    == Some(heatmort::casecrossover::CauseGroup::Cardiorespiratory)
        })
        .count();

    let manifest = TruthManifest {
        params,
        nu: cfg.ggpm.nu,
        alt_mean: alt_tf.mean,
        alt_sd: alt_tf.sd,
        lon0,
        lat0,
        holiday_rr: s.holiday_rr,
        heatwave_rr: s.heatwave_rr,
        slope_per_degree: s.slope_per_degree,
        kink_celsius: s.kink_celsius,
        heatwave_effect_id: s.heatwave_effect_id.clone(),
        population: s.population,
        expected_records: s.events_per_person * s.population,
        n_records: records.len(),
        n_summer_adult_cardio,
        rea_compress: s.rea_compress,
        rea_bias: s.rea_bias,
        rea_smoothing: REA_SMOOTHING,
        missing_frac: s.missing_frac,
        n_stations: s.n_stations,
        n_municipalities: n_m,
    };

    let prov = provenance(cfg, "simulate");
    let stations_path = cfg.stations_path();
    arts.prepare(&stations_path)?;
    io::write_station_csv(&stations_path, &station_rows)?;
    arts.stamp(&stations_path, &prov)?;

    let polygons_path = cfg.polygons_path();
    arts.prepare(&polygons_path)?;
    io::write_municipalities_geojson(&polygons_path, &munis)?;
    arts.stamp(&polygons_path, &prov)?;

    let rea_path = cfg.reanalysis_path();
    arts.prepare(&rea_path)?;
    io::write_reanalysis_hourly_csv(&rea_path, &rea_rows)?;
    arts.stamp(&rea_path, &prov)?;

    let mort_path = cfg.mortality_path();
    arts.prepare(&mort_path)?;
    io::write_mortality_csv(&mort_path, &records)?;
    arts.stamp(&mort_path, &prov)?;

    let hol_path = cfg.holidays_path();
    arts.prepare(&hol_path)?;
    write_holiday_csv(&hol_path, &holidays)?;
    arts.stamp(&hol_path, &prov)?;

    let truths_path = arts.synth_truths();
    arts.prepare(&truths_path)?;
    io::write_json(&truths_path, &manifest)?;
    arts.stamp(&truths_path, &prov)?;

    logging::event(
        "simulate",
        "written",
        &[
            ("records", records.len().to_string()),
            ("summer_adult_cardio", n_summer_adult_cardio.to_string()),
        ],
    );
    Ok(())
}

fn write_holiday_csv(path: &std::path::Path, holidays: &BTreeSet<NaiveDate>) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["date"])?;
    for d in holidays {
        wtr.write_record([d.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}
