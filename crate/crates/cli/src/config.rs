use std::path::{Path, PathBuf};

use cpcr::data::{DatasetLayout, SyntheticSpec};
use cpcr::dbpnet::NetworkConfig;
use cpcr::trainer::TrainConfig;
use cpcr::{Error, Result};
use serde::{Deserialize, Serialize};

pub const DESK_PROFILE: &str = include_str!("../../../configs/desk.toml");
pub const PAPER_PROFILE: &str = include_str!("../../../configs/paper.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    pub layout: DatasetLayout,
    pub path: PathBuf,
}

/// Everything one run needs, from a single TOML document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub labeled_ratio: f64,
    pub out_dir: PathBuf,
    /// On-disk dataset; when absent the `synthetic` spec is generated in memory.
    #[serde(default)]
    pub dataset: Option<DatasetSource>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config {
            field: "config".into(),
            reason: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn profile(p: Profile) -> Self {
        Self::parse(match p {
            Profile::Desk => DESK_PROFILE,
            Profile::Paper => PAPER_PROFILE,
        })
        .expect("bundled profiles are valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            field: "config".into(),
            reason: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.labeled_ratio > 0.0 && self.labeled_ratio <= 1.0) {
            return Err(Error::Config {
                field: "labeled_ratio".into(),
                reason: format!("{} is outside (0, 1]", self.labeled_ratio),
            });
        }
        if self.dataset.is_none() && self.synthetic.is_none() {
            return Err(Error::Config {
                field: "dataset".into(),
                reason: "give either [dataset] or [synthetic]".into(),
            });
        }
        if let Some(s) = &self.synthetic {
            s.validate()?;
        }
        self.network.validate()?;
        self.train.validate()?;
        if self.network.input_size != self.train.batch.patch_size {
            return Err(Error::Config {
                field: "train.batch.patch_size".into(),
                reason: format!(
                    "{:?} differs from network.input_size {:?}",
                    self.train.batch.patch_size, self.network.input_size
                ),
            });
        }
        Ok(())
    }
}
