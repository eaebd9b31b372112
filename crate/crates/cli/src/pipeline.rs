//! Stage implementations behind the subcommands.
//!
//! Every stage reads its inputs from files under the output directory,
//! computes, and writes its artifacts plus provenance sidecars. Stages
//! share no process state, so any stage can be rerun alone, and the
//! fan-out inside a stage (per quantile level, per year, per heatwave
//! definition) runs on the worker pool with each job writing only its own
//! files.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::NaiveDate;
use heatmort::calendar::{SeasonWindow, StudyCalendar};
use heatmort::casecrossover::{build_rows, control_stats, CauseGroup, CcoOptions, CcoRow};
use heatmort::epi::{CoefSummary, EpiDataset, FitMode, HeatwaveModelResult};
use heatmort::error::{CoreError, Result};
use heatmort::exec;
use heatmort::geometry::{Point, Projection};
use heatmort::ggpm::{GgpmParams, YearObservations};
use heatmort::gqrm::design::build_design;
use heatmort::gqrm::{checkpoint, diagnostics, plugin, sampler, GqrmState, PanelData};
use heatmort::grid::{build_grid, interpolate_surface};
use heatmort::heatwave::{detect, threshold_for, HeatwaveCalendar};
use heatmort::ingest::{aggregate_cells, impute_spline, select_stations};
use heatmort::io::{
    self, assemble_reanalysis_daily, assemble_reanalysis_hourly, ParamSummary,
};
use heatmort::rng::substream;
use heatmort::types::{
    AltitudeTransform, ExposureSurface, MethodTag, MunicipalityMap, Provenance, StationSeries,
};
use serde::{Deserialize, Serialize};

use crate::artifacts::{provenance, Artifacts};
use crate::config::PipelineConfig;
use crate::logging;

/// Projection centre, altitude standardization, and selection outcome;
/// written by `prep`, read by everything downstream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrepMeta {
    pub lon0: f64,
    pub lat0: f64,
    pub alt_mean: f64,
    pub alt_sd: f64,
    pub n_candidates: usize,
    pub selected: Vec<String>,
    pub imputed_values: usize,
}

/// Per-year fit summary artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GgpmFitArtifact {
    pub year: u32,
    pub params: GgpmParams,
    pub summaries: Vec<ParamSummary>,
    pub loglik: f64,
    pub n_obs: usize,
    pub iters: usize,
    pub converged: bool,
    pub scale_center: f64,
}

/// Referent-table summary artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CcoSummary {
    pub n_rows: usize,
    pub n_strata: usize,
    pub controls_min: usize,
    pub controls_max: usize,
    pub controls_mean: f64,
    pub methods: Vec<String>,
    pub heatwave_specs: Vec<String>,
    pub cancer_rows: usize,
    pub cancer_strata: usize,
}

/// Health-model report artifact: headline numbers plus pointers to the
/// full fit and the curve table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpiReport {
    pub method: String,
    pub outcome: String,
    pub mode: FitMode,
    pub n_bins: usize,
    pub n_strata: usize,
    pub n_rows: usize,
    pub coefficients: Vec<CoefSummary>,
    /// Exposure value of lowest fitted risk.
    pub mmt: f64,
    pub curve_csv: String,
    pub heatwave_models: Vec<HeatwaveModelResult>,
    pub separation: Vec<String>,
}

/// Study calendar for surfaces: wide season, so event-day lookbacks near
/// the summer boundaries stay covered.
pub fn surface_calendar(cfg: &PipelineConfig) -> Result<StudyCalendar> {
    StudyCalendar::new(
        SeasonWindow::may_to_september(),
        cfg.calendar.start_year,
        cfg.calendar.n_years,
    )
}

/// Summer calendar: the days heatwave flags and mortality events live on.
pub fn summer_calendar(cfg: &PipelineConfig) -> Result<StudyCalendar> {
    StudyCalendar::new(
        SeasonWindow::june_to_august(),
        cfg.calendar.start_year,
        cfg.calendar.n_years,
    )
}

/// Everything downstream stages reconstruct from the `prep` artifacts.
pub struct Prepped {
    pub calendar: StudyCalendar,
    pub proj: Projection,
    pub alt_tf: AltitudeTransform,
    pub stations: Vec<StationSeries>,
    pub meta: PrepMeta,
}

impl Prepped {
    pub fn projection_label(&self) -> String {
        format!(
            "equirectangular lon0={} lat0={}",
            self.meta.lon0, self.meta.lat0
        )
    }

    pub fn stamped(&self, cfg: &PipelineConfig, stage: &str) -> Provenance {
        let mut prov = provenance(cfg, stage);
        prov.projection = Some(self.projection_label());
        prov
    }
}

fn load_raw_municipalities(cfg: &PipelineConfig) -> Result<Vec<io::RawMunicipality>> {
    let path = cfg.polygons_path();
    if !path.exists() {
        return Err(CoreError::InvalidConfig(format!(
            "polygon file {} does not exist",
            path.display()
        )));
    }
    io::read_municipalities_geojson(&path)
}

/// Projection centre: configured, or the polygon bounding box midpoint.
fn projection_centre(cfg: &PipelineConfig, raw: &[io::RawMunicipality]) -> Result<(f64, f64)> {
    if let (Some(lon0), Some(lat0)) = (cfg.projection.lon0, cfg.projection.lat0) {
        return Ok((lon0, lat0));
    }
    let mut lo = (f64::INFINITY, f64::INFINITY);
    let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for m in raw {
        for p in &m.polygons {
            for &(lon, lat) in &p.outer {
                lo = (lo.0.min(lon), lo.1.min(lat));
                hi = (hi.0.max(lon), hi.1.max(lat));
            }
        }
    }
    if !(lo.0.is_finite() && hi.0.is_finite()) {
        return Err(CoreError::Geometry(
            "cannot derive a projection centre from empty polygons".into(),
        ));
    }
    Ok(((lo.0 + hi.0) / 2.0, (lo.1 + hi.1) / 2.0))
}

pub fn load_prepped(cfg: &PipelineConfig, arts: &Artifacts) -> Result<Prepped> {
    arts.require(&arts.prep_meta(), "prep")?;
    arts.require(&arts.prep_stations(), "prep")?;
    let meta: PrepMeta = io::read_json(&arts.prep_meta())?;
    let calendar = surface_calendar(cfg)?;
    let proj = Projection::new(meta.lon0, meta.lat0);
    let rows = io::read_station_csv(&arts.prep_stations())?;
    let stations = io::assemble_stations(&rows, &calendar, &proj)?;
    for s in &stations {
        if s.n_missing() > 0 {
            return Err(CoreError::InvalidConfig(format!(
                "prepared station {} still has {} gaps; rerun `prep`",
                s.id,
                s.n_missing()
            )));
        }
    }
    if !(meta.alt_sd > 0.0) {
        return Err(CoreError::InvalidConfig(
            "prepared altitude standardization is degenerate; rerun `prep`".into(),
        ));
    }
    Ok(Prepped {
        calendar,
        proj,
        alt_tf: AltitudeTransform {
            mean: meta.alt_mean,
            sd: meta.alt_sd,
        },
        stations,
        meta,
    })
}

pub fn load_map(cfg: &PipelineConfig, proj: &Projection) -> Result<MunicipalityMap> {
    let raw = load_raw_municipalities(cfg)?;
    MunicipalityMap::new(io::project_municipalities(&raw, proj)?)
}

/// Station panel in year-major layout for the quantile model.
fn panel_from(p: &Prepped) -> Result<PanelData> {
    let n_years = p.calendar.n_years() as usize;
    let season_len = p.calendar.season_len(1)?;
    for t in 2..=p.calendar.n_years() {
        if p.calendar.season_len(t)? != season_len {
            return Err(CoreError::Calendar(
                "seasons must have equal length across years".into(),
            ));
        }
    }
    let mut y = Vec::with_capacity(p.stations.len() * p.calendar.len());
    for s in &p.stations {
        y.extend(s.values.iter().copied());
    }
    Ok(PanelData {
        sites: p.stations.iter().map(|s| s.loc).collect(),
        alt: p.stations.iter().map(|s| p.alt_tf.apply(s.alt_m)).collect(),
        n_years,
        season_len,
        y,
    })
}

/// One study year of station observations in day-major layout for the
/// per-year Gaussian process.
fn year_observations(p: &Prepped, t: u32) -> Result<YearObservations> {
    let (start, end) = p.calendar.year_bounds(t)?;
    let n_days = end - start;
    let n = p.stations.len();
    let mut y = vec![None; n_days * n];
    for (s, st) in p.stations.iter().enumerate() {
        for d in 0..n_days {
            y[d * n + s] = st.values[start + d];
        }
    }
    Ok(YearObservations {
        sites: p.stations.iter().map(|s| s.loc).collect(),
        alt: p.stations.iter().map(|s| p.alt_tf.apply(s.alt_m)).collect(),
        n_days,
        y,
    })
}

/// Ingest stage: read raw stations and polygons, fix the projection,
/// select stations by the missingness rule, fill the gaps, and write the
/// complete panel.
pub fn prep(cfg: &PipelineConfig, arts: &Artifacts) -> Result<()> {
    let stations_path = cfg.stations_path();
    if !stations_path.exists() {
        return Err(CoreError::InvalidConfig(format!(
            "station file {} does not exist",
            stations_path.display()
        )));
    }
    let raw_rows = io::read_station_csv(&stations_path)?;
    let raw_munis = load_raw_municipalities(cfg)?;
    let (lon0, lat0) = projection_centre(cfg, &raw_munis)?;
    let proj = Projection::new(lon0, lat0);
    let calendar = surface_calendar(cfg)?;

    let assembled = io::assemble_stations(&raw_rows, &calendar, &proj)?;
    let selected = select_stations(&assembled, &calendar, cfg.ingest.selection.clone())?;
    logging::event(
        "prep",
        "selected",
        &[
            ("candidates", assembled.len().to_string()),
            ("kept", selected.len().to_string()),
        ],
    );

    let imputed: Vec<StationSeries> = exec::map(&selected, |s| impute_spline(s, &calendar))
        .into_iter()
        .collect::<Result<_>>()?;
    let imputed_values: usize = selected
        .iter()
        .map(|s| s.n_missing())
        .sum();

    let alts: Vec<f64> = imputed.iter().map(|s| s.alt_m).collect();
    let alt_tf = AltitudeTransform::fit(&alts)?;

    let mut coords: BTreeMap<String, (f64, f64, f64)> = BTreeMap::new();
    for r in &raw_rows {
        coords
            .entry(r.station_id.clone())
            .or_insert((r.lon, r.lat, r.alt_m));
    }
    let mut out_rows = Vec::with_capacity(imputed.len() * calendar.len());
    for s in &imputed {
        let &(lon, lat, alt_m) = coords
            .get(s.id.as_str())
            .expect("selected station came from the raw rows");
        for (i, key) in calendar.days().iter().enumerate() {
            out_rows.push(io::StationRow {
                station_id: s.id.to_string(),
                lon,
                lat,
                alt_m,
                date: key.date,
                tmax: s.values[i],
            });
        }
    }

    let meta = PrepMeta {
        lon0,
        lat0,
        alt_mean: alt_tf.mean,
        alt_sd: alt_tf.sd,
        n_candidates: assembled.len(),
        selected: imputed.iter().map(|s| s.id.to_string()).collect(),
        imputed_values,
    };

    let mut prov = provenance(cfg, "prep");
    prov.projection = Some(format!("equirectangular lon0={lon0} lat0={lat0}"));
    let sp = arts.prep_stations();
    arts.prepare(&sp)?;
    io::write_station_csv(&sp, &out_rows)?;
    arts.stamp(&sp, &prov)?;
    let mp = arts.prep_meta();
    io::write_json(&mp, &meta)?;
    arts.stamp(&mp, &prov)?;
    logging::event(
        "prep",
        "written",
        &[("imputed_values", imputed_values.to_string())],
    );
    Ok(())
}

/// Fit the quantile chains, one per level, in parallel. A leftover
/// checkpoint resumes the interrupted chain; completed chains remove it.
pub fn fit_gqrm(cfg: &PipelineConfig, arts: &Artifacts, tau: Option<f64>) -> Result<()> {
    let p = load_prepped(cfg, arts)?;
    let panel = panel_from(&p)?;
    let taus: Vec<f64> = match tau {
        Some(t) => vec![t],
        None => cfg.gqrm.taus.levels().to_vec(),
    };
    exec::map(&taus, |&t| fit_one_gqrm(cfg, arts, &p, &panel, t))
        .into_iter()
        .collect::<Result<Vec<()>>>()?;
    Ok(())
}

fn fit_one_gqrm(
    cfg: &PipelineConfig,
    arts: &Artifacts,
    p: &Prepped,
    panel: &PanelData,
    tau: f64,
) -> Result<()> {
    let chain_cfg = cfg.gqrm.chain_config(tau);
    let ck_path = arts.gqrm_checkpoint(tau);
    arts.prepare(&ck_path)?;
    let resume = if ck_path.exists() {
        let snap = checkpoint::load(&ck_path)?;
        logging::event(
            "fit-gqrm",
            "resume",
            &[("tau", tau.to_string()), ("sweep", snap.sweep.to_string())],
        );
        Some(snap)
    } else {
        None
    };
    let rng = substream(cfg.seed(), &format!("gqrm-tau-{tau}"));
    let mut save = |snap: &sampler::ChainSnapshot| checkpoint::save(&ck_path, snap);
    let run = sampler::run_chain_with(panel, &chain_cfg, rng, resume, Some(&mut save))?;
    let state = plugin::median_state(&run.samples)?;
    let diag = diagnostics::summarize(&run.samples, &run.accept);

    let prov = p.stamped(cfg, "fit-gqrm");
    let state_path = arts.gqrm_state(tau);
    io::write_json(&state_path, &state)?;
    arts.stamp(&state_path, &prov)?;
    let diag_path = arts.gqrm_diagnostics(tau);
    io::write_json(&diag_path, &diag)?;
    arts.stamp(&diag_path, &prov)?;
    if ck_path.exists() {
        std::fs::remove_file(&ck_path)?;
    }
    logging::event("fit-gqrm", "done", &[("tau", tau.to_string())]);
    Ok(())
}

/// Build municipality exposure surfaces from fitted models.
pub fn surface(
    cfg: &PipelineConfig,
    arts: &Artifacts,
    method: &str,
    tau: Option<f64>,
) -> Result<()> {
    match method {
        "gqrm" => surface_gqrm(cfg, arts, tau),
        "ggpm" => surface_ggpm(cfg, arts),
        "reanalysis" => Err(CoreError::InvalidConfig(
            "the reanalysis surface is produced by `aggregate`, not `surface`".into(),
        )),
        other => Err(CoreError::InvalidConfig(format!(
            "unknown surface method {other:?}; expected gqrm, ggpm or reanalysis"
        ))),
    }
}

fn surface_gqrm(cfg: &PipelineConfig, arts: &Artifacts, tau: Option<f64>) -> Result<()> {
    let p = load_prepped(cfg, arts)?;
    let map = load_map(cfg, &p.proj)?;
    let panel = panel_from(&p)?;
    let design = build_design(&panel)?;
    let grid = build_grid(&map, cfg.surface.n_lattice, cfg.surface.spacing)?;
    let locs: Vec<Point> = p.stations.iter().map(|s| s.loc).collect();
    let taus: Vec<f64> = match tau {
        Some(t) => vec![t],
        None => cfg.gqrm.taus.levels().to_vec(),
    };
    let n_days = p.calendar.len();
    let season_len = design.season_len;
    let n_years = design.n_years;

    exec::map(&taus, |&t| -> Result<()> {
        let state_path = arts.gqrm_state(t);
        arts.require(&state_path, &format!("fit-gqrm --tau {t}"))?;
        let state: GqrmState = io::read_json(&state_path)?;
        if state.site_intercept.len() != design.n_sites {
            return Err(CoreError::LengthMismatch {
                context: format!("fitted state for tau {t} against the prepared panel"),
                got: state.site_intercept.len(),
                want: design.n_sites,
            });
        }
        let q = plugin::station_quantiles(&design, &state);
        let day_values: Vec<Vec<f64>> = (0..n_days)
            .map(|flat| {
                let (year, day) = (flat / season_len, flat % season_len);
                (0..design.n_sites)
                    .map(|s| q[(s * n_years + year) * season_len + day])
                    .collect()
            })
            .collect();
        let tag = MethodTag::GqrmTau(t);
        let surf = interpolate_surface(
            &locs,
            &day_values,
            p.calendar.days(),
            &grid,
            &map,
            cfg.surface.lambda,
            tag,
            p.stamped(cfg, "surface"),
        )?;
        let path = arts.surface(&tag.to_string());
        arts.prepare(&path)?;
        io::write_surface_csv(&path, &surf)?;
        arts.stamp(&path, &surf.provenance)?;
        logging::event("surface", "written", &[("method", tag.to_string())]);
        Ok(())
    })
    .into_iter()
    .collect::<Result<Vec<()>>>()?;
    Ok(())
}

fn surface_ggpm(cfg: &PipelineConfig, arts: &Artifacts) -> Result<()> {
    let p = load_prepped(cfg, arts)?;
    let map = load_map(cfg, &p.proj)?;
    let centroids: Vec<Point> = map.iter().map(|m| m.centroid).collect();
    let cent_alt: Vec<f64> = map.iter().map(|m| p.alt_tf.apply(m.alt_m)).collect();
    let muni_ids: Vec<_> = map.iter().map(|m| m.id.clone()).collect();
    let n_days = p.calendar.len();
    let mut values = vec![0.0; muni_ids.len() * n_days];

    for t in 1..=cfg.calendar.n_years {
        let fit_path = arts.ggpm_fit(t as usize);
        arts.require(&fit_path, &format!("fit-ggpm --year {t}"))?;
        let artifact: GgpmFitArtifact = io::read_json(&fit_path)?;
        let obs = year_observations(&p, t)?;
        let pred = heatmort::ggpm::predict::predict_points(
            &obs,
            &centroids,
            &cent_alt,
            &artifact.params,
            cfg.ggpm.nu,
            cfg.ggpm.max_state_dim,
        )?;
        let (start, _) = p.calendar.year_bounds(t)?;
        for d in 0..obs.n_days {
            for (m, _) in muni_ids.iter().enumerate() {
                values[m * n_days + start + d] = pred.mean[d * muni_ids.len() + m];
            }
        }
    }

    let surf = ExposureSurface::new(
        MethodTag::Ggpm,
        muni_ids,
        p.calendar.days().to_vec(),
        values,
        p.stamped(cfg, "surface"),
    )?;
    let path = arts.surface("ggpm");
    arts.prepare(&path)?;
    io::write_surface_csv(&path, &surf)?;
    arts.stamp(&path, &surf.provenance)?;
    logging::event("surface", "written", &[("method", "ggpm".to_string())]);
    Ok(())
}

/// Fit the per-year Gaussian process models in parallel.
pub fn fit_ggpm(cfg: &PipelineConfig, arts: &Artifacts, year: Option<u32>) -> Result<()> {
    let p = load_prepped(cfg, arts)?;
    let years: Vec<u32> = match year {
        Some(t) => {
            p.calendar.year_bounds(t)?;
            vec![t]
        }
        None => (1..=cfg.calendar.n_years).collect(),
    };
    exec::map(&years, |&t| -> Result<()> {
        let obs = year_observations(&p, t)?;
        let fit = heatmort::ggpm::fit::fit(&obs, &cfg.ggpm.model_config())?;
        let names = ["beta0", "beta_alt", "a", "sigma2_process", "scale", "sigma2_nugget"];
        let estimates = [
            fit.params.beta0,
            fit.params.beta_alt,
            fit.params.a,
            fit.params.sigma2_process,
            fit.params.scale,
            fit.params.sigma2_nugget,
        ];
        let summaries = names
            .iter()
            .zip(estimates.iter().zip(fit.intervals.iter()))
            .map(|(name, (est, (lo, hi)))| ParamSummary {
                parameter: (*name).to_string(),
                estimate: *est,
                lo: *lo,
                hi: *hi,
            })
            .collect();
        let artifact = GgpmFitArtifact {
            year: t,
            params: fit.params.clone(),
            summaries,
            loglik: fit.loglik,
            n_obs: fit.n_obs,
            iters: fit.iters,
            converged: fit.converged,
            scale_center: fit.scale_center,
        };
        let path = arts.ggpm_fit(t as usize);
        arts.prepare(&path)?;
        io::write_json(&path, &artifact)?;
        arts.stamp(&path, &p.stamped(cfg, "fit-ggpm"))?;
        logging::event(
            "fit-ggpm",
            "done",
            &[("year", t.to_string()), ("converged", fit.converged.to_string())],
        );
        Ok(())
    })
    .into_iter()
    .collect::<Result<Vec<()>>>()?;
    Ok(())
}

/// Aggregate the gridded product onto municipalities by overlap area.
pub fn aggregate(cfg: &PipelineConfig, arts: &Artifacts, pre_aggregated: bool) -> Result<()> {
    let p = load_prepped(cfg, arts)?;
    let map = load_map(cfg, &p.proj)?;
    let path = cfg.reanalysis_path();
    if !path.exists() {
        return Err(CoreError::InvalidConfig(format!(
            "reanalysis file {} does not exist",
            path.display()
        )));
    }
    let grid = if pre_aggregated || cfg.ingest.pre_aggregated {
        assemble_reanalysis_daily(&io::read_reanalysis_daily_csv(&path)?, &p.calendar, &p.proj)?
    } else {
        assemble_reanalysis_hourly(&io::read_reanalysis_hourly_csv(&path)?, &p.calendar, &p.proj)?
    };
    let surf = aggregate_cells(&grid, &map, &p.calendar, p.stamped(cfg, "aggregate"))?;
    let out = arts.surface("reanalysis");
    arts.prepare(&out)?;
    io::write_surface_csv(&out, &surf)?;
    arts.stamp(&out, &surf.provenance)?;
    logging::event("aggregate", "written", &[]);
    Ok(())
}

fn producing_command(tag: &str) -> String {
    match MethodTag::parse(tag) {
        Ok(MethodTag::Reanalysis) => "aggregate".to_string(),
        Ok(MethodTag::GqrmTau(t)) => format!("surface --method gqrm --tau {t}"),
        Ok(MethodTag::Ggpm) => "surface --method ggpm".to_string(),
        Err(_) => "surface".to_string(),
    }
}

fn read_surface_artifact(
    cfg: &PipelineConfig,
    arts: &Artifacts,
    tag: &str,
    calendar: &StudyCalendar,
    stage: &str,
) -> Result<ExposureSurface> {
    let path = arts.surface(tag);
    arts.require(&path, &producing_command(tag))?;
    let mut side = path.as_os_str().to_owned();
    side.push(".prov.json");
    let prov = io::read_json::<Provenance>(Path::new(&side))
        .unwrap_or_else(|_| provenance(cfg, stage));
    io::read_surface_csv(&path, calendar, prov)
}

/// Flag heatwave days on one surface under every configured definition.
pub fn heatwave(cfg: &PipelineConfig, arts: &Artifacts, method: Option<&str>) -> Result<()> {
    let tag = method.unwrap_or(&cfg.heatwave.method);
    MethodTag::parse(tag)?;
    let wide = surface_calendar(cfg)?;
    let summer = summer_calendar(cfg)?;
    let surf = read_surface_artifact(cfg, arts, tag, &wide, "heatwave")?;

    // Summer slice of the surface, per municipality, plus the year id of
    // every summer day so runs cannot chain across seasons.
    let day_of: Vec<usize> = summer
        .days()
        .iter()
        .map(|k| {
            surf.days
                .iter()
                .position(|d| d.date == k.date)
                .ok_or_else(|| {
                    CoreError::Calendar(format!("surface {tag} does not cover {}", k.date))
                })
        })
        .collect::<Result<_>>()?;
    let season_id: Vec<u32> = summer.days().iter().map(|k| k.year).collect();
    let series: Vec<Vec<f64>> = (0..surf.municipalities.len())
        .map(|m| day_of.iter().map(|&d| surf.get(m, d)).collect())
        .collect();
    for (m, s) in series.iter().enumerate() {
        if s.len() < 30 {
            return Err(CoreError::InvalidConfig(format!(
                "municipality {} has only {} summer days; thresholds need at least 30",
                surf.municipalities[m],
                s.len()
            )));
        }
    }

    let entries = cfg.heatwave.registry()?;
    exec::map(&entries, |entry| -> Result<()> {
        let mut flags = Vec::with_capacity(series.len() * summer.len());
        for s in &series {
            let threshold = threshold_for(s, entry.rule)?;
            flags.extend(detect(s, &season_id, threshold, &entry.spec)?);
        }
        let cal = HeatwaveCalendar::new(
            entry.spec.clone(),
            entry.rule,
            surf.municipalities.clone(),
            summer.days().to_vec(),
            flags,
        )?;
        let path = arts.heatwave_calendar(&entry.id);
        arts.prepare(&path)?;
        io::write_heatwave_csv(&path, &cal)?;
        let mut prov = provenance(cfg, "heatwave");
        prov.notes.insert("surface".to_string(), tag.to_string());
        arts.stamp(&path, &prov)?;
        logging::event("heatwave", "written", &[("spec", entry.id.clone())]);
        Ok(())
    })
    .into_iter()
    .collect::<Result<Vec<()>>>()?;
    Ok(())
}

fn read_holidays(path: &Path) -> Result<BTreeSet<NaiveDate>> {
    #[derive(Deserialize)]
    struct Row {
        date: NaiveDate,
    }
    if !path.exists() {
        return Err(CoreError::InvalidConfig(format!(
            "holiday file {} does not exist",
            path.display()
        )));
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = BTreeSet::new();
    for row in rdr.deserialize() {
        let row: Row = row?;
        out.insert(row.date);
    }
    Ok(out)
}

fn count_strata(rows: &[CcoRow]) -> usize {
    rows.iter()
        .map(|r| r.stratum.as_str())
        .collect::<BTreeSet<_>>()
        .len()
}

/// Assemble the referent table joining every configured exposure surface
/// and heatwave calendar onto case and control days.
pub fn build_cco(cfg: &PipelineConfig, arts: &Artifacts) -> Result<()> {
    let wide = surface_calendar(cfg)?;
    let summer = summer_calendar(cfg)?;
    let mortality_path = cfg.mortality_path();
    if !mortality_path.exists() {
        return Err(CoreError::InvalidConfig(format!(
            "mortality file {} does not exist",
            mortality_path.display()
        )));
    }

    let surfaces: Vec<ExposureSurface> = cfg
        .cco
        .methods
        .iter()
        .map(|m| read_surface_artifact(cfg, arts, m, &wide, "build-cco"))
        .collect::<Result<_>>()?;
    let calendars: Vec<HeatwaveCalendar> = cfg
        .heatwave
        .registry()?
        .into_iter()
        .map(|entry| {
            let path = arts.heatwave_calendar(&entry.id);
            arts.require(&path, "heatwave")?;
            io::read_heatwave_csv(&path, entry.spec, entry.rule, &summer)
        })
        .collect::<Result<_>>()?;
    let holidays = read_holidays(&cfg.holidays_path())?;
    let records = io::read_mortality_csv(&mortality_path)?;

    let opts = CcoOptions {
        cause: cfg.cause(),
        min_age: cfg.cco.min_age,
    };
    let rows = build_rows(&records, &surfaces, &calendars, &holidays, &opts)?;
    if rows.is_empty() {
        return Err(CoreError::EmptySelection {
            rule: "no qualifying deaths for the referent table".into(),
        });
    }
    let rows_path = arts.cco_rows();
    arts.prepare(&rows_path)?;
    io::write_cco_csv(&rows_path, &rows)?;
    let prov = provenance(cfg, "build-cco");
    arts.stamp(&rows_path, &prov)?;

    let (lo, hi, mean) = control_stats(&rows);
    let mut summary = CcoSummary {
        n_rows: rows.len(),
        n_strata: count_strata(&rows),
        controls_min: lo,
        controls_max: hi,
        controls_mean: mean,
        methods: rows.first().map(|r| r.exposure.keys().cloned().collect()).unwrap_or_default(),
        heatwave_specs: rows.first().map(|r| r.heatwave.keys().cloned().collect()).unwrap_or_default(),
        cancer_rows: 0,
        cancer_strata: 0,
    };

    if cfg.cco.negative_control {
        let cancer = build_rows(
            &records,
            &surfaces,
            &calendars,
            &holidays,
            &CcoOptions {
                cause: CauseGroup::Cancer,
                min_age: cfg.cco.min_age,
            },
        )?;
        if cancer.is_empty() {
            logging::event("build-cco", "no_negative_control_rows", &[]);
        } else {
            let cancer_path = arts.cco_rows_cancer();
            io::write_cco_csv(&cancer_path, &cancer)?;
            arts.stamp(&cancer_path, &prov)?;
            summary.cancer_rows = cancer.len();
            summary.cancer_strata = count_strata(&cancer);
        }
    }

    let sum_path = arts.cco_summary();
    io::write_json(&sum_path, &summary)?;
    arts.stamp(&sum_path, &prov)?;
    logging::event(
        "build-cco",
        "written",
        &[
            ("rows", summary.n_rows.to_string()),
            ("strata", summary.n_strata.to_string()),
        ],
    );
    Ok(())
}

/// Full exposure method tag from the subcommand's `--method`/`--tau` pair.
pub fn resolve_method_tag(method: &str, tau: Option<f64>) -> Result<String> {
    match method {
        "gqrm" => {
            let t = tau.ok_or_else(|| {
                CoreError::InvalidConfig("method gqrm needs --tau to pick the level".into())
            })?;
            Ok(MethodTag::GqrmTau(t).to_string())
        }
        other => {
            let tag = MethodTag::parse(other)?;
            Ok(tag.to_string())
        }
    }
}

/// Fit the dose-response and heatwave models for one exposure method.
pub fn fit_epi(cfg: &PipelineConfig, arts: &Artifacts, method: &str, tau: Option<f64>) -> Result<()> {
    let tag = resolve_method_tag(method, tau)?;
    // The exposure column in the referent table traces back to the surface
    // artifact; insist on it so a missing upstream stage is named even
    // after the table itself was built.
    arts.require(&arts.surface(&tag), &producing_command(&tag))?;
    arts.require(&arts.cco_rows(), "build-cco")?;

    let rows = io::read_cco_csv(&arts.cco_rows())?;
    let first = rows.first().ok_or_else(|| CoreError::EmptySelection {
        rule: "referent table is empty".into(),
    })?;
    if !first.exposure.contains_key(&tag) {
        let have: Vec<&str> = first.exposure.keys().map(|k| k.as_str()).collect();
        return Err(CoreError::MissingExposure(format!(
            "referent table has no column for {tag}; it carries [{}]; add the method to the \
             config and rerun `build-cco`",
            have.join(", ")
        )));
    }
    let spec_ids: Vec<String> = first.heatwave.keys().cloned().collect();

    fit_epi_outcome(cfg, arts, &tag, &rows, "cardiorespiratory", &spec_ids)?;

    let cancer_path = arts.cco_rows_cancer();
    if cancer_path.exists() {
        let cancer_rows = io::read_cco_csv(&cancer_path)?;
        fit_epi_outcome(cfg, arts, &tag, &cancer_rows, "cancer", &[])?;
    }
    Ok(())
}

fn fit_epi_outcome(
    cfg: &PipelineConfig,
    arts: &Artifacts,
    tag: &str,
    rows: &[CcoRow],
    outcome: &str,
    spec_ids: &[String],
) -> Result<()> {
    let file_tag = if outcome == "cancer" {
        format!("{tag}-cancer")
    } else {
        tag.to_string()
    };
    let opts = cfg.epi.options()?;
    let data = EpiDataset::from_cco_rows(rows, tag, None, opts.rw2.n_bins)?;
    let fit = heatmort::epi::fit(&data, &opts, cfg.seed())?;
    let curve = fit.risk_curve()?;

    let curve_path = arts.epi_curve(&file_tag);
    arts.prepare(&curve_path)?;
    io::write_curve_csv(&curve_path, &curve)?;
    let prov = provenance(cfg, "fit-epi");
    arts.stamp(&curve_path, &prov)?;

    let fit_path = arts.epi_fit(&file_tag);
    io::write_json(&fit_path, &fit)?;
    arts.stamp(&fit_path, &prov)?;

    let heatwave_models = if spec_ids.is_empty() {
        Vec::new()
    } else {
        heatmort::epi::fit_heatwave_models(
            rows,
            tag,
            spec_ids,
            cfg.epi.heatwave_with_temperature,
            &opts,
            cfg.seed(),
        )?
    };
    if !heatwave_models.is_empty() {
        let hw_path = arts.epi_heatwave_models(&file_tag);
        io::write_json(&hw_path, &heatwave_models)?;
        arts.stamp(&hw_path, &prov)?;
    }

    let report = EpiReport {
        method: tag.to_string(),
        outcome: outcome.to_string(),
        mode: fit.mode,
        n_bins: fit.binning.n_bins(),
        n_strata: fit.n_strata,
        n_rows: fit.n_rows,
        coefficients: fit.coefficients.clone(),
        mmt: curve.mmt,
        curve_csv: curve_path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        heatwave_models,
        separation: fit.separation.clone(),
    };
    let report_path = arts.epi_report(&file_tag);
    io::write_json(&report_path, &report)?;
    arts.stamp(&report_path, &prov)?;
    logging::event(
        "fit-epi",
        "written",
        &[
            ("method", tag.to_string()),
            ("outcome", outcome.to_string()),
            ("mmt", curve.mmt.to_string()),
        ],
    );
    Ok(())
}
