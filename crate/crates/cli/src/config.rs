//! Pipeline configuration: one TOML file holding every knob, with defaults
//! that run the bundled synthetic scenario end to end.
//!
//! Relative entries under `[paths]` resolve against the effective output
//! directory, so `simulate` followed by the analysis stages needs no path
//! edits and two output directories never share state. The config hash
//! excludes the output directory for the same reason: the same analysis in
//! two sandboxes must produce identical artifacts.

use std::path::{Path, PathBuf};

use heatmort::casecrossover::CauseGroup;
use heatmort::epi::{EpiOptions, FitMode, Rw2EffectSpec};
use heatmort::error::{CoreError, Result};
use heatmort::ggpm::GgpmConfig;
use heatmort::gqrm::{GqrmConfig, QuantileLevelSet};
use heatmort::heatwave::{HeatwaveSpec, ThresholdRule};
use heatmort::ingest::SelectionRule;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root seed; every random draw in every stage derives from it through
    /// a named substream. Mandatory: the file or `--seed` must supply it.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Output directory; artifacts land in per-stage subdirectories.
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub paths: PathsCfg,
    #[serde(default)]
    pub calendar: CalendarCfg,
    #[serde(default)]
    pub projection: ProjectionCfg,
    #[serde(default)]
    pub ingest: IngestCfg,
    #[serde(default)]
    pub gqrm: GqrmCfg,
    #[serde(default)]
    pub surface: SurfaceCfg,
    #[serde(default)]
    pub ggpm: GgpmCfg,
    #[serde(default)]
    pub heatwave: HeatwaveCfg,
    #[serde(default)]
    pub cco: CcoCfg,
    #[serde(default)]
    pub epi: EpiCfg,
    #[serde(default)]
    pub synth: SynthCfg,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: Some(0),
            out: PathBuf::from("out"),
            paths: PathsCfg::default(),
            calendar: CalendarCfg::default(),
            projection: ProjectionCfg::default(),
            ingest: IngestCfg::default(),
            gqrm: GqrmCfg::default(),
            surface: SurfaceCfg::default(),
            ggpm: GgpmCfg::default(),
            heatwave: HeatwaveCfg::default(),
            cco: CcoCfg::default(),
            epi: EpiCfg::default(),
            synth: SynthCfg::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsCfg {
    pub stations: PathBuf,
    pub polygons: PathBuf,
    pub reanalysis: PathBuf,
    pub mortality: PathBuf,
    pub holidays: PathBuf,
}

impl Default for PathsCfg {
    fn default() -> Self {
        PathsCfg {
            stations: "synth/stations.csv".into(),
            polygons: "synth/municipalities.geojson".into(),
            reanalysis: "synth/reanalysis.csv".into(),
            mortality: "synth/mortality.csv".into(),
            holidays: "synth/holidays.csv".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalendarCfg {
    pub start_year: i32,
    pub n_years: u32,
}

impl Default for CalendarCfg {
    fn default() -> Self {
        CalendarCfg {
            start_year: 2001,
            n_years: 2,
        }
    }
}

/// Equirectangular projection centre. When absent it is taken from the
/// polygon bounding box midpoint and recorded in every artifact's
/// provenance sidecar.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionCfg {
    pub lon0: Option<f64>,
    pub lat0: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestCfg {
    pub selection: SelectionRule,
    /// Reanalysis input carries daily maxima already instead of hourly
    /// temperatures.
    pub pre_aggregated: bool,
}

impl Default for IngestCfg {
    fn default() -> Self {
        IngestCfg {
            selection: SelectionRule::MaxConsecutiveMissing { limit: 7 },
            pre_aggregated: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GqrmCfg {
    pub taus: QuantileLevelSet,
    pub burn_in: usize,
    pub keep: usize,
    pub thin: usize,
    pub adapt_batch: usize,
    pub target_accept: f64,
    pub coef_prior_var: f64,
    pub ig_shape: f64,
    pub ig_scale: f64,
    pub checkpoint_every: usize,
}

impl Default for GqrmCfg {
    fn default() -> Self {
        let c = GqrmConfig::default();
        GqrmCfg {
            taus: QuantileLevelSet::default(),
            burn_in: c.burn_in,
            keep: c.keep,
            thin: c.thin,
            adapt_batch: c.adapt_batch,
            target_accept: c.target_accept,
            coef_prior_var: c.coef_prior_var,
            ig_shape: c.ig_shape,
            ig_scale: c.ig_scale,
            checkpoint_every: c.checkpoint_every,
        }
    }
}

impl GqrmCfg {
    pub fn chain_config(&self, tau: f64) -> GqrmConfig {
        GqrmConfig {
            tau,
            burn_in: self.burn_in,
            keep: self.keep,
            thin: self.thin,
            adapt_batch: self.adapt_batch,
            target_accept: self.target_accept,
            coef_prior_var: self.coef_prior_var,
            ig_shape: self.ig_shape,
            ig_scale: self.ig_scale,
            checkpoint_every: self.checkpoint_every,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurfaceCfg {
    /// Thin plate smoothing parameter on standardized coordinates.
    pub lambda: f64,
    /// Requested lattice point count on top of the centroids.
    pub n_lattice: usize,
    /// Fixed lattice spacing in km; overrides the count search.
    pub spacing: Option<f64>,
}

impl Default for SurfaceCfg {
    fn default() -> Self {
        SurfaceCfg {
            lambda: heatmort::tps::DEFAULT_LAMBDA,
            n_lattice: 1000,
            spacing: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GgpmCfg {
    pub nu: f64,
    pub max_state_dim: usize,
    pub beta_sd: f64,
    pub sd_process_rate: f64,
    pub sd_nugget_rate: f64,
    pub za_sd: f64,
    pub log_scale_sd: f64,
}

impl Default for GgpmCfg {
    fn default() -> Self {
        let c = GgpmConfig::default();
        GgpmCfg {
            nu: c.nu,
            max_state_dim: c.max_state_dim,
            beta_sd: c.beta_sd,
            sd_process_rate: c.sd_process_rate,
            sd_nugget_rate: c.sd_nugget_rate,
            za_sd: c.za_sd,
            log_scale_sd: c.log_scale_sd,
        }
    }
}

impl GgpmCfg {
    pub fn model_config(&self) -> GgpmConfig {
        GgpmConfig {
            nu: self.nu,
            max_state_dim: self.max_state_dim,
            beta_sd: self.beta_sd,
            sd_process_rate: self.sd_process_rate,
            sd_nugget_rate: self.sd_nugget_rate,
            za_sd: self.za_sd,
            log_scale_sd: self.log_scale_sd,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatwaveCfg {
    /// Surface whose series define the exceedance runs.
    pub method: String,
    /// Pooled summer quantiles used as thresholds.
    pub quantiles: Vec<f64>,
    /// Extra fixed thresholds in degrees.
    pub fixed: Vec<f64>,
    /// Run-shape preset ids to build.
    pub shapes: Vec<String>,
}

impl Default for HeatwaveCfg {
    fn default() -> Self {
        HeatwaveCfg {
            method: "reanalysis".into(),
            quantiles: vec![0.90, 0.925, 0.95],
            fixed: vec![],
            shapes: vec!["base".into(), "1daylag".into(), "2dayslag".into()],
        }
    }
}

/// One (run shape, threshold) pair with the id used for calendar files and
/// referent-table columns.
#[derive(Debug, Clone)]
pub struct CalendarEntry {
    pub id: String,
    pub spec: HeatwaveSpec,
    pub rule: ThresholdRule,
}

impl HeatwaveCfg {
    /// The calendars this configuration asks for, in a fixed order.
    pub fn registry(&self) -> Result<Vec<CalendarEntry>> {
        let presets = heatmort::heatwave::preset_specs();
        let mut rules: Vec<(String, ThresholdRule)> = Vec::new();
        for q in &self.quantiles {
            rules.push((format!("q{q}"), ThresholdRule::Quantile(*q)));
        }
        for v in &self.fixed {
            rules.push((format!("t{v}"), ThresholdRule::Fixed(*v)));
        }
        if rules.is_empty() {
            return Err(CoreError::InvalidConfig(
                "heatwave needs at least one threshold".into(),
            ));
        }
        let mut out = Vec::new();
        for shape in &self.shapes {
            let preset = presets
                .iter()
                .find(|p| &p.id == shape)
                .ok_or_else(|| {
                    CoreError::InvalidConfig(format!("unknown heatwave shape {shape:?}"))
                })?;
            for (tag, rule) in &rules {
                let id = format!("{shape}-{tag}");
                out.push(CalendarEntry {
                    spec: HeatwaveSpec::new(&id, preset.min_run, preset.excl)?,
                    id,
                    rule: *rule,
                });
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CcoCfg {
    /// Exposure surfaces joined onto the referent table, by method tag.
    pub methods: Vec<String>,
    pub min_age: u32,
    /// Also build a table for the cancer negative-control outcome.
    pub negative_control: bool,
}

impl Default for CcoCfg {
    fn default() -> Self {
        CcoCfg {
            methods: vec!["gqrm-0.5".into(), "ggpm".into(), "reanalysis".into()],
            min_age: 18,
            negative_control: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpiCfg {
    pub n_bins: usize,
    pub pc_u: f64,
    pub pc_alpha: f64,
    /// `stratified` fits stratum effects explicitly; `conditional` profiles
    /// them out.
    pub mode: String,
    pub tau_grid: usize,
    /// Adjust the heatwave-indicator models for the smooth temperature
    /// term.
    pub heatwave_with_temperature: bool,
}

impl Default for EpiCfg {
    fn default() -> Self {
        let rw2 = Rw2EffectSpec::default();
        EpiCfg {
            n_bins: rw2.n_bins,
            pc_u: rw2.pc_u,
            pc_alpha: rw2.pc_alpha,
            mode: "stratified".into(),
            tau_grid: 25,
            heatwave_with_temperature: true,
        }
    }
}

impl EpiCfg {
    pub fn options(&self) -> Result<EpiOptions> {
        let mode = match self.mode.as_str() {
            "stratified" => FitMode::Stratified,
            "conditional" => FitMode::Conditional,
            other => {
                return Err(CoreError::InvalidConfig(format!(
                    "epi mode must be stratified or conditional, got {other:?}"
                )))
            }
        };
        let mut opts = EpiOptions::default();
        opts.mode = mode;
        opts.rw2 = Rw2EffectSpec {
            n_bins: self.n_bins,
            pc_u: self.pc_u,
            pc_alpha: self.pc_alpha,
            sum_to_zero: true,
        };
        opts.rw2.validate()?;
        opts.tau_grid = self.tau_grid;
        Ok(opts)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthCfg {
    /// Municipality grid dimensions; population is spread over the cells.
    pub grid_nx: usize,
    pub grid_ny: usize,
    pub n_stations: usize,
    pub population: f64,
    /// Expected events per person over the whole study.
    pub events_per_person: f64,
    /// Fraction of station days knocked out.
    pub missing_frac: f64,
    /// Injected fixed effects on the rate-ratio scale.
    pub holiday_rr: f64,
    pub heatwave_rr: f64,
    /// Injected log rate-ratio slope per degree above the kink.
    pub slope_per_degree: f64,
    pub kink_celsius: f64,
    /// Calendar id whose linked flag carries the heatwave effect; must be
    /// in the heatwave registry.
    pub heatwave_effect_id: String,
    /// True field parameters for the generative temperature model.
    pub beta0: f64,
    pub beta_alt: f64,
    pub ar_coef: f64,
    pub sigma2_process: f64,
    pub matern_scale: f64,
    pub sigma2_nugget: f64,
    /// Reanalysis distortion: shrink toward the seasonal mean and shift.
    pub rea_compress: f64,
    pub rea_bias: f64,
    /// Fraction of deaths assigned to the cancer control outcome.
    pub cancer_frac: f64,
    /// Fraction of deaths below the age floor.
    pub underage_frac: f64,
}

impl Default for SynthCfg {
    fn default() -> Self {
        SynthCfg {
            grid_nx: 5,
            grid_ny: 5,
            n_stations: 12,
            population: 60_000.0,
            events_per_person: 0.08,
            missing_frac: 0.02,
            holiday_rr: 0.89,
            heatwave_rr: 1.05,
            slope_per_degree: 0.03,
            kink_celsius: 28.0,
            heatwave_effect_id: "base-q0.9".into(),
            beta0: 26.0,
            beta_alt: -1.2,
            ar_coef: 0.6,
            sigma2_process: 2.6,
            matern_scale: 0.08,
            sigma2_nugget: 0.4,
            rea_compress: 0.85,
            rea_bias: -0.4,
            cancer_frac: 0.15,
            underage_frac: 0.03,
        }
    }
}

impl PipelineConfig {
    /// Parse a TOML file and apply command-line overrides.
    pub fn load(
        path: &Path,
        seed: Option<u64>,
        out: Option<PathBuf>,
    ) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CoreError::InvalidConfig(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut cfg: PipelineConfig = toml::from_str(&text)
            .map_err(|e| CoreError::InvalidConfig(format!("{}: {e}", path.display())))?;
        if let Some(s) = seed {
            cfg.seed = Some(s);
        }
        if let Some(o) = out {
            cfg.out = o;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed.is_none() {
            return Err(CoreError::InvalidConfig(
                "seed is mandatory: set it in the config file or pass --seed".into(),
            ));
        }
        if self.calendar.n_years == 0 {
            return Err(CoreError::InvalidConfig("n_years must be positive".into()));
        }
        QuantileLevelSet::new(self.gqrm.taus.levels().to_vec())?;
        if !(self.surface.lambda >= 0.0) {
            return Err(CoreError::InvalidConfig("lambda must be >= 0".into()));
        }
        self.heatwave.registry()?;
        self.epi.options()?;
        if self.cco.methods.is_empty() {
            return Err(CoreError::InvalidConfig(
                "cco needs at least one exposure method".into(),
            ));
        }
        for m in &self.cco.methods {
            heatmort::types::MethodTag::parse(m)?;
        }
        let s = &self.synth;
        for (name, v) in [
            ("population", s.population),
            ("events_per_person", s.events_per_person),
            ("holiday_rr", s.holiday_rr),
            ("heatwave_rr", s.heatwave_rr),
        ] {
            if !(v > 0.0) {
                return Err(CoreError::InvalidConfig(format!("{name} must be > 0")));
            }
        }
        if !(0.0..0.5).contains(&s.missing_frac) {
            return Err(CoreError::InvalidConfig(
                "missing_frac must lie in [0, 0.5)".into(),
            ));
        }
        if self
            .heatwave
            .registry()?
            .iter()
            .all(|e| e.id != s.heatwave_effect_id)
        {
            return Err(CoreError::InvalidConfig(format!(
                "heatwave_effect_id {:?} is not in the heatwave registry",
                s.heatwave_effect_id
            )));
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("validated config carries a seed")
    }

    pub fn cause(&self) -> CauseGroup {
        CauseGroup::Cardiorespiratory
    }

    /// Resolve a `[paths]` entry: absolute stays, relative lands under the
    /// output directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    pub fn stations_path(&self) -> PathBuf {
        self.resolve(&self.paths.stations)
    }
    pub fn polygons_path(&self) -> PathBuf {
        self.resolve(&self.paths.polygons)
    }
    pub fn reanalysis_path(&self) -> PathBuf {
        self.resolve(&self.paths.reanalysis)
    }
    pub fn mortality_path(&self) -> PathBuf {
        self.resolve(&self.paths.mortality)
    }
    pub fn holidays_path(&self) -> PathBuf {
        self.resolve(&self.paths.holidays)
    }

    /// FNV-1a over the canonical serialization, output directory excluded
    /// so relocated runs hash alike.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.out = PathBuf::new();
        let text = toml::to_string(&canon).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    pub fn print_defaults() -> String {
        toml::to_string_pretty(&PipelineConfig::default()).expect("defaults serialize")
    }
}
