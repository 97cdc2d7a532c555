//! `train` configuration: TOML file, then flag overrides.

use std::path::{Path, PathBuf};

use ghostvlad::ghostnet::{DilationScheme, GhostCnnConfig};
use ghostvlad::model::ModelConfig;
use ghostvlad::retrieval::Split;
use ghostvlad::training::{SgdConfig, TripletLossConfig};
use ghostvlad::{Error, Result};
use serde::{Deserialize, Serialize};

/// Value of `backbone` selecting the built-in layout.
pub const STANDARD_BACKBONE: &str = "standard";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub input_width: usize,
    pub input_height: usize,
    /// `"standard"` or the path of a backbone JSON file.
    pub backbone: String,
    pub dilation: String,
    pub channel_multiplier: f64,
    pub clusters: usize,
    /// 0 keeps the raw VLAD vector.
    pub reduction_dim: usize,
    pub train_split: Split,
    #[serde(with = "seed_repr")]
    pub seed: u64,
    pub epochs: usize,
    pub out_dir: PathBuf,
    pub loss: TripletLossConfig,
    pub optimiser: SgdConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("data/manifest.jsonl"),
            input_width: 128,
            input_height: 96,
            backbone: STANDARD_BACKBONE.into(),
            dilation: "5-2".into(),
            channel_multiplier: 0.25,
            clusters: 8,
            reduction_dim: 0,
            train_split: Split::Db,
            seed: 7,
            epochs: 30,
            out_dir: PathBuf::from("run"),
            loss: TripletLossConfig::default(),
            optimiser: SgdConfig::default(),
        }
    }
}

/// Seeds above `i64::MAX` are written as decimal strings.
mod seed_repr {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Int(i64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        match i64::try_from(*v) {
            Ok(i) => Repr::Int(i),
            Err(_) => Repr::Text(v.to_string()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Int(i) => u64::try_from(i).map_err(serde::de::Error::custom),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn backbone_config(&self) -> Result<GhostCnnConfig> {
        let scheme: DilationScheme = self.dilation.parse()?;
        let base = if self.backbone == STANDARD_BACKBONE {
            GhostCnnConfig::standard(scheme)
        } else {
            let js = std::fs::read_to_string(&self.backbone)?;
            GhostCnnConfig::from_json(&js)?.with_scheme(scheme)
        };
        Ok(base.with_multiplier(self.channel_multiplier))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            backbone: self.backbone_config()?,
            clusters: self.clusters,
            input_height: self.input_height,
            input_width: self.input_width,
            reduction_dim: self.reduction_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks everything that can be checked before loading data.
    pub fn validate(&self) -> Result<()> {
        if !self.manifest.is_file() {
            return Err(Error::Config(format!("manifest {} does not exist", self.manifest.display())));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        self.model_config()?;
        self.loss.validate()?;
        self.optimiser.validate()
    }
}
