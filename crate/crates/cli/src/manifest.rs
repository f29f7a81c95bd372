//! Run manifest written beside every run's outputs.

use std::path::{Path, PathBuf};

use matrix_lab::config::config_hash;
use matrix_lab::{LabError, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "run_manifest.json";
/// Effective configuration, loadable again with `--config`.
pub const CONFIG_FILE: &str = "run_config.toml";

#[derive(Serialize)]
struct OutputEntry {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    subcommand: &'a str,
    seed: u64,
    config_hash: String,
    versions: Versions,
    inputs: Vec<String>,
    outputs: Vec<OutputEntry>,
    config: &'a RunConfig,
}

#[derive(Serialize)]
struct Versions {
    matrix_lab: &'static str,
    cli: &'static str,
}

/// Tracks files a subcommand writes under `dir`.
pub struct Run {
    pub dir: PathBuf,
    subcommand: &'static str,
    inputs: Vec<String>,
    outputs: Vec<PathBuf>,
}

impl Run {
    pub fn start(dir: PathBuf, subcommand: &'static str) -> Result<Self> {
        std::fs::create_dir_all(&dir).map_err(|e| LabError::io(&dir, e))?;
        Ok(Self {
            dir,
            subcommand,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn input(&mut self, p: &Path) {
        self.inputs.push(p.display().to_string());
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Records a written file (relative to the run directory).
    pub fn output(&mut self, p: PathBuf) {
        self.outputs.push(p);
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| LabError::io(parent, e))?;
        }
        std::fs::write(&p, text).map_err(|e| LabError::io(&p, e))?;
        self.outputs.push(p.clone());
        Ok(p)
    }

    /// Writes `run_manifest.json`; the output root is omitted from the
    /// recorded config so identical runs in different directories match.
    pub fn finish(mut self, cfg: &RunConfig) -> Result<PathBuf> {
        let mut recorded = cfg.clone();
        recorded.out = None;
        self.write_text(CONFIG_FILE, &recorded.to_toml())?;
        self.outputs.sort();
        self.outputs.dedup();
        let mut outputs = Vec::with_capacity(self.outputs.len());
        for p in &self.outputs {
            let bytes = std::fs::read(p).map_err(|e| LabError::io(p, e))?;
            outputs.push(OutputEntry {
                path: p.strip_prefix(&self.dir).unwrap_or(p).display().to_string(),
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        let m = Manifest {
            subcommand: self.subcommand,
            seed: cfg.seed,
            config_hash: config_hash(&recorded),
            versions: Versions {
                matrix_lab: matrix_lab::VERSION,
                cli: env!("CARGO_PKG_VERSION"),
            },
            inputs: self.inputs,
            outputs,
            config: &recorded,
        };
        let path = self.dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&m)?)
            .map_err(|e| LabError::io(&path, e))?;
        Ok(path)
    }
}
