//! Artifact layout under the output directory, plus the provenance sidecar
//! written next to every file a stage produces.
//!
//! Stages communicate exclusively through these files, so the registry is
//! the single place that knows where anything lives. Each artifact `x.ext`
//! gets a sibling `x.ext.prov.json` recording the seed, the config hash,
//! the producing stage, and the checked-out revision; reruns with the same
//! seed and config rewrite both byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use heatmort::error::{CoreError, Result};
use heatmort::types::Provenance;

use crate::config::PipelineConfig;

#[derive(Debug, Clone)]
pub struct Artifacts {
    out: PathBuf,
}

impl Artifacts {
    pub fn new(out: &Path) -> Self {
        Artifacts {
            out: out.to_path_buf(),
        }
    }

    pub fn synth_truths(&self) -> PathBuf {
        self.out.join("synth").join("truths.json")
    }

    pub fn prep_stations(&self) -> PathBuf {
        self.out.join("prep").join("stations.csv")
    }

    /// Projection centre, altitude standardization, and the station
    /// selection outcome, serialized for downstream stages.
    pub fn prep_meta(&self) -> PathBuf {
        self.out.join("prep").join("prep.json")
    }

    pub fn gqrm_state(&self, tau: f64) -> PathBuf {
        self.out.join("gqrm").join(format!("state-tau-{tau}.json"))
    }

    pub fn gqrm_diagnostics(&self, tau: f64) -> PathBuf {
        self.out
            .join("gqrm")
            .join(format!("diagnostics-tau-{tau}.json"))
    }

    pub fn gqrm_checkpoint(&self, tau: f64) -> PathBuf {
        self.out
            .join("gqrm")
            .join(format!("checkpoint-tau-{tau}.json"))
    }

    pub fn surface(&self, tag: &str) -> PathBuf {
        self.out.join("surface").join(format!("surface-{tag}.csv"))
    }

    pub fn ggpm_fit(&self, year_index: usize) -> PathBuf {
        self.out
            .join("ggpm")
            .join(format!("fit-year-{year_index}.json"))
    }

    pub fn heatwave_calendar(&self, id: &str) -> PathBuf {
        self.out
            .join("heatwave")
            .join(format!("calendar-{id}.csv"))
    }

    pub fn cco_rows(&self) -> PathBuf {
        self.out.join("cco").join("rows.csv")
    }

    pub fn cco_rows_cancer(&self) -> PathBuf {
        self.out.join("cco").join("rows-cancer.csv")
    }

    pub fn cco_summary(&self) -> PathBuf {
        self.out.join("cco").join("summary.json")
    }

    pub fn epi_report(&self, tag: &str) -> PathBuf {
        self.out.join("epi").join(format!("report-{tag}.json"))
    }

    pub fn epi_curve(&self, tag: &str) -> PathBuf {
        self.out.join("epi").join(format!("curve-{tag}.csv"))
    }

    pub fn epi_fit(&self, tag: &str) -> PathBuf {
        self.out.join("epi").join(format!("fit-{tag}.json"))
    }

    pub fn epi_heatwave_models(&self, tag: &str) -> PathBuf {
        self.out
            .join("epi")
            .join(format!("heatwave-models-{tag}.json"))
    }

    pub fn qq_table(&self) -> PathBuf {
        self.out.join("qq").join("qq.csv")
    }

    /// Create the parent directory of an artifact about to be written.
    pub fn prepare(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        Ok(())
    }

    /// Fail with the artifact path and the stage that produces it when a
    /// required input has not been built yet.
    pub fn require(&self, path: &Path, produced_by: &str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(CoreError::InvalidConfig(format!(
                "missing artifact {}: run `{produced_by}` first",
                path.display()
            )))
        }
    }

    /// Write the `.prov.json` sidecar for an artifact that already exists.
    pub fn stamp(&self, path: &Path, prov: &Provenance) -> Result<()> {
        let mut side = path.as_os_str().to_owned();
        side.push(".prov.json");
        heatmort::io::write_json(Path::new(&side), prov)
    }
}

/// Provenance block for one stage's outputs. The revision is looked up
/// once per process; outside a checkout it reads `unknown`.
pub fn provenance(cfg: &PipelineConfig, stage: &str) -> Provenance {
    let mut notes = BTreeMap::new();
    notes.insert("revision".to_string(), git_revision());
    Provenance {
        seed: cfg.seed(),
        config_hash: cfg.hash(),
        source: stage.to_string(),
        projection: None,
        notes,
    }
}

pub fn git_revision() -> String {
    static REV: std::sync::OnceLock<String> = std::sync::OnceLock::new();
    REV.get_or_init(|| {
        Command::new("git")
            .args(["rev-parse", "HEAD"])
            .output()
            .ok()
            .filter(|o| o.status.success())
            .and_then(|o| String::from_utf8(o.stdout).ok())
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| "unknown".to_string())
    })
    .clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_lands_next_to_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let arts = Artifacts::new(dir.path());
        let path = arts.cco_summary();
        arts.prepare(&path).unwrap();
        std::fs::write(&path, "{}\n").unwrap();
        let cfg = PipelineConfig::default();
        arts.stamp(&path, &provenance(&cfg, "build-cco")).unwrap();
        assert!(dir.path().join("cco").join("summary.json.prov.json").exists());
    }

    #[test]
    fn require_names_the_producing_stage() {
        let dir = tempfile::tempdir().unwrap();
        let arts = Artifacts::new(dir.path());
        let err = arts
            .require(&arts.surface("ggpm"), "surface --method ggpm")
            .unwrap_err();
        let text = err.to_string();
        assert!(text.contains("surface-ggpm.csv"), "{text}");
        assert!(text.contains("surface --method ggpm"), "{text}");
    }
}
