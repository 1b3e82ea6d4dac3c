//! Optional TOML run configuration. Values here override built-in defaults and
//! are themselves overridden by command-line flags.
//!
//! ```toml
//! [pipeline]
//! preset = "thumos"
//! window = 60
//! threshold = "fixed:0.4"
//!
//! [adapt]
//! steps = 60
//! k = 4
//!
//! [run]
//! jobs = 4
//! seed = 7
//! ```

use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::{CliError, NegArg, PosArg, Preset, ScoreArg};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub adapt: AdaptSection,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    pub preset: Option<Preset>,
    pub window: Option<usize>,
    pub gamma1: Option<f64>,
    pub gamma2: Option<f64>,
    pub eta: Option<f64>,
    pub dc_exclude: Option<bool>,
    pub threshold: Option<String>,
    pub score: Option<ScoreArg>,
    pub calibrate: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptSection {
    pub steps: Option<usize>,
    pub k: Option<usize>,
    pub beta: Option<f64>,
    pub lr: Option<f64>,
    pub wd: Option<f64>,
    pub pos: Option<PosArg>,
    pub neg: Option<NegArg>,
    pub carry_state: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub jobs: Option<usize>,
    pub seed: Option<u64>,
}

pub fn load(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))
}
