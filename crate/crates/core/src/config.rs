//! TOML run configuration shared by every subcommand.
//!
//! Every section is optional and falls back to the library defaults; unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::cnn::CnnConfig;
use crate::baselines::gbt::GbtConfig;
use crate::baselines::raster::DEFAULT_TILE_UM;
use crate::data::{FeatureSetId, SplitSpec};
use crate::error::{Error, Result};
use crate::gnn::GnnConfig;
use crate::graph::DEFAULT_THRESHOLD_UM;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Model family trained by `train`; `gnn.arch` picks the GNN variant.
    pub model: ModelKind,
    pub features: FeatureSetId,
    /// Proximity radius for graph edges (µm, Manhattan).
    pub threshold_um: f64,
    /// Tile edge for the CNN rasterization (µm).
    pub tile_um: f64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub split: SplitSpec,
    pub gnn: GnnConfig,
    pub gbt: GbtConfig,
    pub cnn: CnnConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gnn,
    Gbt,
    Cnn,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelKind::Gnn,
            features: FeatureSetId::SetB,
            threshold_um: DEFAULT_THRESHOLD_UM,
            tile_um: DEFAULT_TILE_UM,
            paths: Paths::default(),
            synth: SynthConfig::default(),
            split: SplitSpec::default(),
            gnn: GnnConfig::default(),
            gbt: GbtConfig::default(),
            cnn: CnnConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_um >= 0.0 && self.threshold_um.is_finite()) {
            return Err(Error::validation(format!("threshold_um must be >= 0, got {}", self.threshold_um)));
        }
        if !(self.tile_um > 0.0 && self.tile_um.is_finite()) {
            return Err(Error::validation(format!("tile_um must be positive, got {}", self.tile_um)));
        }
        self.synth.validate()?;
        self.split.validate()?;
        self.gnn.validate()?;
        self.gbt.validate()?;
        self.cnn.validate()
    }
}
