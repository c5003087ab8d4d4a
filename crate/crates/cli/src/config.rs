//! Layered configuration: command-line flags override the config file, which
//! overrides built-in defaults.
//!
//! The file comes from `--config` or `SCENEFUSE_CONFIG`. It is TOML; a file
//! that is not valid TOML but is valid JSON is accepted too.

use crate::CliError;
use scenefuse_core::metrics::EvalOptions;
use scenefuse_core::sim::ScenarioConfig;
use serde::Deserialize;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

pub const CONFIG_ENV: &str = "SCENEFUSE_CONFIG";

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub server: ServerSection,
    pub scenario: Option<ScenarioConfig>,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub listen: Option<SocketAddr>,
    pub operator_listen: Option<SocketAddr>,
    pub no_operator: Option<bool>,
    pub fusion_hz: Option<f64>,
    pub stale_ms: Option<f64>,
    pub sync_ms: Option<f64>,
    pub allow_list: Option<Vec<String>>,
    pub auto_register: Option<bool>,
    pub log: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub delta_s: Option<f64>,
    pub tolerance_ms: Option<f64>,
    pub max_lag_ms: Option<f64>,
    pub hold_lost: Option<bool>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        match toml::from_str(text) {
            Ok(c) => Ok(c),
            Err(toml_err) => serde_json::from_str(text).map_err(|json_err| {
                if text.trim_start().starts_with('{') {
                    json_err.to_string()
                } else {
                    toml_err.to_string()
                }
            }),
        }
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Input {
            path: path.to_owned(),
            detail: e.to_string(),
        })?;
        Self::parse(&text).map_err(|detail| CliError::Config {
            path: path.to_owned(),
            detail,
        })
    }

    /// `--config` first, then the environment variable, else empty.
    pub fn load(flag: Option<&Path>) -> Result<Self, CliError> {
        let env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        match flag.map(Path::to_path_buf).or(env) {
            Some(path) => Self::read(&path),
            None => Ok(Self::default()),
        }
    }

    pub fn scenario(&self) -> ScenarioConfig {
        self.scenario.clone().unwrap_or_default()
    }

    pub fn eval_options(&self) -> EvalOptions {
        let d = EvalOptions::default();
        EvalOptions {
            delta_s: self.eval.delta_s.unwrap_or(d.delta_s),
            tolerance_us: self.eval.tolerance_ms.map_or(d.tolerance_us, ms_to_us),
            max_lag_us: self.eval.max_lag_ms.map_or(d.max_lag_us, ms_to_us),
            hold_lost: self.eval.hold_lost.unwrap_or(d.hold_lost),
            ..d
        }
    }
}

pub fn ms_to_us(ms: f64) -> i64 {
    (ms * 1e3).round() as i64
}
