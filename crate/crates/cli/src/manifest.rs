//! Run manifest: the config snapshot plus a content hash of the trained
//! parameters and the list of files the run produced.

use ifa_core::config::RunConfig;
use ifa_core::{checkpoint, Model};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub seed: u64,
    pub param_count: usize,
    pub param_sha256: String,
    pub finished_unix_ms: u64,
    pub artifacts: Vec<String>,
}

pub fn write(out: &Path, cfg: &RunConfig, param_count: usize) -> Result<(), String> {
    // hash what was actually written, not the in-memory weights
    let mut model = Model::new(cfg.clone()).map_err(|e| e.to_string())?;
    checkpoint::load_into(&mut model.store, out).map_err(|e| e.to_string())?;
    let manifest = RunManifest {
        config: cfg.clone(),
        seed: cfg.seed,
        param_count,
        param_sha256: checkpoint::param_hash(&model.store, cfg.precision),
        finished_unix_ms: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap_or_default()
            .as_millis() as u64,
        artifacts: vec![
            "checkpoint.json".into(),
            "checkpoint.bin".into(),
            "metrics.csv".into(),
        ],
    };
    let mut json = serde_json::to_vec_pretty(&manifest).map_err(|e| e.to_string())?;
    json.push(b'\n');
    std::fs::write(out.join("manifest.json"), json).map_err(|e| e.to_string())
}

pub fn read_config(run_dir: &Path) -> Result<RunConfig, String> {
    let path = run_dir.join("manifest.json");
    let bytes = std::fs::read(&path).map_err(|e| format!("reading {}: {e}", path.display()))?;
    let manifest: RunManifest =
        serde_json::from_slice(&bytes).map_err(|e| format!("parsing {}: {e}", path.display()))?;
    Ok(manifest.config)
}
