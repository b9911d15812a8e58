//! Run configuration and the metadata records written beside outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use wsi_attention::heatmap::{HeatmapParams, Scale};
use wsi_attention::metrics::{EvalConfig, MatchDirection};
use wsi_attention::prediction::BinSpec;
use wsi_attention::scanpath::{AlignmentScoring, OverlapRule};

pub const DEFAULT_OUTPUT_DIR: &str = "wsiattn-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub scale: Scale,
    /// Gaussian sigma in grid cells.
    pub sigma: f64,
    pub binspec: BinSpec,
    pub scoring: AlignmentScoring,
    pub match_direction: MatchDirection,
    pub overlap_rule: OverlapRule,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scale: Scale::SIXTEENTH,
            sigma: 16.0,
            binspec: BinSpec::default(),
            scoring: AlignmentScoring::default(),
            match_direction: MatchDirection::default(),
            overlap_rule: OverlapRule::default(),
            seed: 0,
            output_dir: PathBuf::from(DEFAULT_OUTPUT_DIR),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_slice(&bytes).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        anyhow::ensure!(self.sigma.is_finite() && self.sigma >= 0.0, "sigma must be non-negative, got {}", self.sigma);
        self.binspec.validate()?;
        self.scoring.validate()?;
        Ok(())
    }

    pub fn heatmap_params(&self) -> HeatmapParams {
        HeatmapParams {
            scale: self.scale,
            sigma: self.sigma,
            mag_filter: None,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            scale: self.scale,
            sigma: self.sigma,
            scoring: self.scoring,
            match_direction: self.match_direction,
            overlap_rule: self.overlap_rule,
        }
    }
}

/// What produced an output: enough to re-run the command identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub args: Vec<String>,
    pub inputs: Vec<String>,
    pub config: RunConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outputs: Vec<String>,
}

impl Metadata {
    pub fn new(command: &str, args: Vec<String>, inputs: Vec<String>, config: &RunConfig) -> Self {
        Self {
            tool: "wsiattn".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            args,
            inputs,
            config: config.clone(),
            outputs: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metadata serializes");
        s.push('\n');
        s
    }
}

/// `<path>.meta.json`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Writes `bytes` to `path` and its metadata record beside it.
pub fn write_with_metadata(path: &Path, bytes: impl AsRef<[u8]>, meta: &Metadata) -> Result<()> {
    write_file(path, bytes)?;
    write_file(&sidecar_path(path), meta.to_json())
}
