//! Optional TOML config; values here sit under command-line flags.

use std::path::Path;

use serde::Deserialize;

use crate::error::{Classify, CliResult};

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub jobs: Option<usize>,
    pub sigma: Option<f64>,
    pub screen: Option<String>,
    pub k: Option<usize>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub serve: ServeConfig,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    pub nss_std: Option<String>,
    pub kld_direction: Option<String>,
    pub kld_eps: Option<f64>,
    pub qa_mode: Option<String>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub w1: Option<f64>,
    pub w2: Option<f64>,
    pub w3: Option<f64>,
    pub w4: Option<f64>,
    pub epsilon: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeConfig {
    pub host: Option<String>,
    pub port: Option<u16>,
    pub token: Option<String>,
    pub data_dir: Option<String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> CliResult<FileConfig> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).invalid_ctx(format!("reading config {}", path.display()))?;
        toml::from_str(&text).invalid_ctx(format!("config {}", path.display()))
    }
}
