use std::path::Path;

use lbsguard::dataset::{SplitRatios, SynthSpec};
use lbsguard::npe::NpeHyper;
use lbsguard::pipeline::{AnonymizeConfig, ExperimentConfig, PipelineConfig};
use lbsguard::poe::PoeHyper;
use lbsguard::pretrain::WalkConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Users with fewer records are dropped.
    pub min_user_records: usize,
    /// POIs with fewer visits are dropped.
    pub min_poi_visits: usize,
    pub split: SplitRatios,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            min_user_records: 10,
            min_poi_visits: 1,
            split: SplitRatios::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub synth: SynthSpec,
    pub data: DataConfig,
    pub anonymize: AnonymizeConfig,
    pub npe: NpeHyper,
    pub poe: PoeHyper,
    pub pretrain: WalkConfig,
    pub pipeline: PipelineConfig,
    pub experiment: ExperimentConfig,
}

pub struct LoadedConfig {
    pub config: Config,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads and parses `path`; errors carry `path:line`.
pub fn load(path: &Path) -> Result<LoadedConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let config: Config = toml::from_str(&text).map_err(|e| {
        let line = e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1);
        CliError::Data(format!("{}:{line}: {}", path.display(), e.message()))
    })?;
    Ok(LoadedConfig {
        config,
        sha256: sha256_hex(text.as_bytes()),
    })
}
