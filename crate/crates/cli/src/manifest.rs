//! `manifest.json`: what a run produced and how to reproduce it.

use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::report::{sha256_hex, ArtifactEntry};

pub const MANIFEST_FILE: &str = "manifest.json";

/// A parent grid and the grid obtained from it by splitting every noise cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub parent: [usize; 2],
    pub child: [usize; 2],
    /// (space, time) split factors.
    pub factors: [usize; 2],
    pub seeds: String,
    pub rule: String,
}

impl Coupling {
    pub fn new(parent: (usize, usize), factors: [usize; 2], seeds: &str) -> Self {
        Self {
            parent: [parent.0, parent.1],
            child: [parent.0 * factors[0], parent.1 * factors[1]],
            factors,
            seeds: seeds.to_string(),
            rule: "same seed; child increments are sampled conditionally on the parent cell and sum to it".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    /// sha256 of the resolved configuration as compact JSON.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seeds: String,
    pub artifacts: Vec<ArtifactEntry>,
    pub couplings: Vec<Coupling>,
    pub created_unix: u64,
}

impl Manifest {
    pub fn new(cfg: &RunConfig) -> Self {
        let config = serde_json::to_value(cfg).expect("config serializes");
        let config_hash = sha256_hex(config.to_string().as_bytes());
        let created_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Self {
            experiment: cfg.experiment.name().to_string(),
            config_hash,
            config,
            seeds: cfg.seeds.to_string(),
            artifacts: Vec::new(),
            couplings: Vec::new(),
            created_unix,
        }
    }

    /// Equal up to the creation time.
    pub fn same_run(&self, other: &Manifest) -> bool {
        Manifest { created_unix: 0, ..self.clone() } == Manifest { created_unix: 0, ..other.clone() }
    }
}

pub fn emit_manifest(output_dir: &Path, manifest: &Manifest) -> io::Result<PathBuf> {
    std::fs::create_dir_all(output_dir)?;
    let path = output_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).map_err(io::Error::other)?;
    std::fs::write(&path, text + "\n")?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> io::Result<Manifest> {
    serde_json::from_str(&std::fs::read_to_string(path)?).map_err(io::Error::other)
}
