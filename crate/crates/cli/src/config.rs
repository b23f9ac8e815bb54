use std::fs;
use std::path::{Path, PathBuf};

use lowdose::dosesim::DatasetPlan;
use lowdose::nets::NetConfig;
use lowdose::trainer::TrainConfig;
use lowdose::Error;
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

/// Everything a run depends on, read from one TOML file. Omitted tables take
/// their defaults; flags override individual fields afterwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub data: DatasetPlan,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub paths: Paths,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            data: DatasetPlan::default(),
            train: TrainConfig::default(),
            net: NetConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> lowdose::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> lowdose::Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.data.phantom.validate()?;
        self.train.validate()?;
        self.net.validate()?;
        if self.data.phantom.extent != self.net.volume_extent {
            return Err(Error::Config(format!(
                "phantom extent {} differs from network extent {}",
                self.data.phantom.extent, self.net.volume_extent
            )));
        }
        Ok(())
    }
}
