//! The merged run configuration and its precedence rules: a flag given on the
//! command line beats the config file, which beats the built-in default.

use std::path::{Path, PathBuf};

use lest::metrics::ProbeConfig;
use lest::nets::NetworkSpec;
use lest::phantoms::PhantomConfig;
use lest::sig::SigConfig;
use lest::sst::EbmConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Name of the resolved configuration written next to every run's outputs.
pub const RESOLVED_CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub probe: ProbeConfig,
    /// Pooling grid for the PCA embedding features.
    pub embed_grid: usize,
    /// Compare against classical histogram matching in the histogram task.
    pub hm_baseline: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            embed_grid: 8,
            hm_baseline: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub phantoms: PhantomConfig,
    pub network: NetworkSpec,
    pub sig: SigConfig,
    pub ebm: EbmConfig,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    /// Defaults, overlaid with `path` when given. Unknown keys are errors.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// Writes the resolved configuration into `dir`.
    pub fn persist(&self, dir: &Path) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| lest::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        let json = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(&path, json + "\n").map_err(|e| lest::Error::Io {
            path: path.clone(),
            source: e,
        })?;
        Ok(path)
    }
}

/// Overwrites `slot` when the flag was given.
pub fn overlay<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}
