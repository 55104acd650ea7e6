//! Optional TOML config file. Each table mirrors the matching core config,
//! and omitted keys keep their defaults.

use std::path::Path;

use enroute_core::datagen::GenConfig;
use enroute_core::ftml::TrainConfig;
use enroute_core::service::ServiceConfig;
use enroute_core::simulator::{ServerModel, Strategy};
use enroute_core::ugd::RemainingMode;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub network: NetworkConfig,
    pub data: DataConfig,
    pub simulate: SimulateConfig,
    pub serve: ServiceConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden_width: usize,
    pub depth: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { hidden_width: 64, depth: 4 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub routes: usize,
    pub k: usize,
    pub strategies: Vec<Strategy>,
    pub congestion: f64,
    pub slowdown: f64,
    pub mean_gap_s: f64,
    pub mode: RemainingMode,
    pub seed: u64,
    pub server: ServerModel,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            routes: 100,
            k: 10,
            strategies: vec![Strategy::Ugd, Strategy::Random, Strategy::Greedy],
            congestion: 0.0,
            slowdown: 3.0,
            mean_gap_s: 30.0,
            mode: RemainingMode::Profile,
            seed: 0,
            server: ServerModel::default(),
        }
    }
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}
