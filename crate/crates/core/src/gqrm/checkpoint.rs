//! Snapshot persistence for long chains.
//!
//! Snapshots are JSON: every field is plain numeric data, and the shortest
//! round-trip float encoding restores each value bit for bit, so a resumed
//! chain continues exactly where the saved one stopped. Writes go through a
//! sibling temporary file and a rename so an interrupted save never leaves
//! a truncated checkpoint behind.

use std::fs;
use std::path::Path;

use super::sampler::ChainSnapshot;
use crate::error::{CoreError, Result};

pub fn save(path: &Path, snap: &ChainSnapshot) -> Result<()> {
    let bytes = serde_json::to_vec(snap)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ChainSnapshot> {
    let bytes = fs::read(path).map_err(|e| {
        CoreError::Checkpoint(format!("cannot read {}: {e}", path.display()))
    })?;
    let snap: ChainSnapshot = serde_json::from_slice(&bytes)
        .map_err(|e| CoreError::Checkpoint(format!("cannot parse {}: {e}", path.display())))?;
    Ok(snap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gqrm::sampler::run_chain_with;
    use crate::gqrm::{simulate_panel, GqrmConfig, PanelSim};
    use crate::rng::substream;

    #[test]
    fn snapshots_round_trip_through_disk() {
        let spec = PanelSim {
            n_sites: 4,
            n_years: 2,
            season_len: 15,
            ..Default::default()
        };
        let panel = simulate_panel(&spec, &mut substream(2, "ckpt-panel"));
        let cfg = GqrmConfig {
            burn_in: 30,
            keep: 30,
            checkpoint_every: 20,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.ckpt.json");
        let mut save_cb = |s: &ChainSnapshot| save(&path, s);
        let full = run_chain_with(
            &panel,
            &cfg,
            substream(9, "ckpt-chain"),
            None,
            Some(&mut save_cb),
        )
        .unwrap();

        let snap = load(&path).unwrap();
        assert!(snap.sweep > 0 && snap.sweep < 60);
        let resumed =
            run_chain_with(&panel, &cfg, substream(0, "unused"), Some(snap), None).unwrap();
        assert_eq!(full.samples.coef, resumed.samples.coef);
        assert_eq!(full.samples.decays, resumed.samples.decays);
    }

    #[test]
    fn missing_file_is_a_checkpoint_error() {
        let err = load(Path::new("/nonexistent/chain.json")).unwrap_err();
        assert!(matches!(err, CoreError::Checkpoint(_)));
    }
}
