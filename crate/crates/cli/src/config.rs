//! The run configuration file: one TOML document whose sections house every
//! tunable of the pipeline. Unknown keys are rejected at every level.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ivif_rlhf::fusion_policy::{PolicyConfig, PretrainConfig};
use ivif_rlhf::grpo::GrpoConfig;
use ivif_rlhf::metrics::{PEAK_8BIT, PSNR_CAP};
use ivif_rlhf::reward_model::{RewardModelConfig, RewardTrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub reward: RewardSection,
    pub policy: PolicySection,
    pub grpo: GrpoConfig,
    pub metrics: MetricsConfig,
    pub service: ServiceConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dedup_threshold: f64,
    /// Side of the grayscale thumbnail embedding.
    pub embed_side: usize,
    /// Train, val, test.
    pub splits: [f64; 3],
    /// Pair ids removed by manual screening.
    pub exclusions: Vec<String>,
    /// `method -> directory of <pair_id>.png`, used when no flag is given.
    pub fused_dirs: BTreeMap<String, PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dedup_threshold: 0.85,
            embed_side: 8,
            splits: [0.786, 0.107, 0.107],
            exclusions: Vec::new(),
            fused_dirs: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSection {
    pub model: RewardModelConfig,
    pub train: RewardTrainConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub model: PolicyConfig,
    pub pretrain: PretrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub peak: f64,
    pub psnr_cap: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            peak: PEAK_8BIT,
            psnr_cap: PSNR_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    pub addr: String,
    pub store_dir: PathBuf,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
            store_dir: PathBuf::from("annotation_store"),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// The file at `path`, or all defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
