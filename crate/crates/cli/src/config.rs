//! Run configuration: a TOML file with `${VAR}` / `${VAR:-fallback}`
//! interpolation, overridden by command-line flags.

use std::path::{Path, PathBuf};

use matrix_lab::align_losses::TrainConfig;
use matrix_lab::analysis::AnalysisConfig;
use matrix_lab::curation::Thresholds;
use matrix_lab::guidance::GuidanceConfig;
use matrix_lab::{LabError, ModelConfig, Result};
use serde::{Deserialize, Serialize};

pub const OUT_ENV: &str = "MATRIX_LAB_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_clips: usize,
    pub inline_masks: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_clips: 16,
            inline_masks: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankConfig {
    pub top_k_per_video: usize,
    pub select_k: usize,
}

impl Default for RankConfig {
    fn default() -> Self {
        Self {
            top_k_per_video: 10,
            select_k: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub lambda: f64,
    pub stride: usize,
    /// Trailing clips of the dataset held out from training.
    pub held_out: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            lambda: matrix_lab::intergeneval::DEFAULT_LAMBDA,
            stride: matrix_lab::intergeneval::DEFAULT_STRIDE,
            held_out: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationConfig {
    pub sampled_frames: usize,
    pub slots: usize,
    pub thresholds: Thresholds,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            sampled_frames: 4,
            slots: 3,
            thresholds: Thresholds::default(),
        }
    }
}

/// Everything a run depends on; serialized into each run manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; model, training and analysis seeds derive from it.
    pub seed: u64,
    pub jobs: usize,
    pub out: Option<PathBuf>,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub analysis: AnalysisConfig,
    pub rank: RankConfig,
    pub train: TrainConfig,
    pub guidance: GuidanceConfig,
    pub eval: EvalConfig,
    pub curation: CurationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: 1,
            out: None,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            analysis: AnalysisConfig::default(),
            rank: RankConfig::default(),
            train: TrainConfig::default(),
            guidance: GuidanceConfig::default(),
            eval: EvalConfig::default(),
            curation: CurationConfig::default(),
        }
    }
}

/// Expands `${NAME}` and `${NAME:-fallback}` using `lookup`.
pub fn interpolate(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find('}')
            .ok_or_else(|| LabError::config("unterminated ${ in config"))?;
        let body = &after[..end];
        let (name, fallback) = match body.split_once(":-") {
            Some((n, f)) => (n, Some(f)),
            None => (body, None),
        };
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(LabError::config(format!(
                "bad variable name '{name}' in config"
            )));
        }
        match (lookup(name), fallback) {
            (Some(v), _) => out.push_str(&v),
            (None, Some(f)) => out.push_str(f),
            (None, None) => {
                return Err(LabError::config(format!(
                    "environment variable {name} is not set"
                )))
            }
        }
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let text = interpolate(text, |k| std::env::var(k).ok())?;
        toml::from_str(&text).map_err(|e| LabError::config(format!("config: {e}")))
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| LabError::io(p, e))?;
                Self::from_toml(&text)
            }
        }
    }

    /// Pushes the root seed into every seeded section and validates.
    pub fn finish(mut self) -> Result<Self> {
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.analysis.seed = self.seed;
        if self.jobs == 0 {
            return Err(LabError::config("--jobs must be >= 1"));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.guidance.validate(&self.model)?;
        Ok(self)
    }

    /// `--out`, then the config file, then `MATRIX_LAB_OUT`, then `./runs`.
    pub fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
