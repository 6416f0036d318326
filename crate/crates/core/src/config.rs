//! Content hashes of resolved configuration, embedded in every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rewards::RewardConfig;
use crate::scheduler::TrainConfig;
use crate::skill_learning::SkillLearnConfig;
use crate::skills::SkillConfig;
use crate::world::ScenarioSpec;
use crate::{Error, Result};

pub const RUN_FORMAT_VERSION: u32 = 1;

/// Hex SHA-256 of the canonical JSON form of `value`.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("configuration serializes");
    hex::encode(Sha256::digest(&bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Resolved settings of a pipeline run, read from TOML. Omitted fields take
/// their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub scenario: String,
    /// Master seed of data generation and training.
    pub seed: u64,
    /// Expert episodes attempted by gen-data.
    pub episodes: usize,
    pub eval_episodes: usize,
    /// First evaluation seed.
    pub eval_seed: u64,
    /// Output directory; not part of the content hash.
    pub out: PathBuf,
    pub skills: SkillConfig,
    pub reward: RewardConfig,
    pub train: TrainConfig,
    pub skill_learning: SkillLearnConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format_version: RUN_FORMAT_VERSION,
            scenario: "two_objects".into(),
            seed: 0,
            episodes: 1000,
            eval_episodes: 100,
            eval_seed: 0,
            out: PathBuf::from("out"),
            skills: SkillConfig::default(),
            reward: RewardConfig::default(),
            train: TrainConfig::default(),
            skill_learning: SkillLearnConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != RUN_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "format_version {} unsupported, expected {RUN_FORMAT_VERSION}",
                self.format_version
            )));
        }
        ScenarioSpec::builtin(&self.scenario)?;
        self.skills.validate()?;
        self.reward.validate()?;
        self.train.validate()?;
        self.skill_learning.validate()
    }

    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        content_hash(&c)
    }
}
