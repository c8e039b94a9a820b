use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineConfig, BaselineModel};
use crate::error::{Error, Result};

use super::{DtainConfig, DtainModel, ModelKind, ParamStore, SequenceModel};

pub const CHECKPOINT_FORMAT: &str = "dtain-checkpoint/1";

/// Architecture description for any model kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelConfig {
    Dtain(DtainConfig),
    Baseline(BaselineConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::Dtain(_) => ModelKind::Dtain,
            ModelConfig::Baseline(b) => b.kind,
        }
    }

    pub fn base(&self) -> &DtainConfig {
        match self {
            ModelConfig::Dtain(c) => c,
            ModelConfig::Baseline(b) => &b.base,
        }
    }

    /// Freshly initialized model.
    pub fn build(&self, seed: u64) -> Result<Box<dyn SequenceModel>> {
        Ok(match self {
            ModelConfig::Dtain(c) => Box::new(DtainModel::new(c.clone(), seed)?),
            ModelConfig::Baseline(b) => Box::new(BaselineModel::new(b.clone(), seed)?),
        })
    }

    /// Model carrying the given trained parameters.
    pub fn with_params(&self, params: &ParamStore) -> Result<Box<dyn SequenceModel>> {
        let mut model = self.build(0)?;
        model.params_mut().load_from(params)?;
        Ok(model)
    }
}

/// Self-describing parameter file: architecture, metadata, and every named
/// tensor with its shape. Values round-trip exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub model: ModelConfig,
    pub seed: u64,
    /// Digest of the vocabulary file the model was trained against.
    pub vocab_fingerprint: Option<String>,
    /// Decision threshold per reported task, picked on validation data.
    pub thresholds: Vec<f64>,
    /// Effective run configuration that produced this checkpoint.
    pub run_config: Option<serde_json::Value>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_model(model: &dyn SequenceModel, seed: u64) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            model: model.model_config(),
            seed,
            vocab_fingerprint: None,
            thresholds: Vec::new(),
            run_config: None,
            params: model.params().clone(),
        }
    }

    pub fn into_model(&self) -> Result<Box<dyn SequenceModel>> {
        self.model.with_params(&self.params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(path.as_ref(), text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("checkpoint: {e}")))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Compatibility(format!(
                "unsupported checkpoint format {:?}",
                ckpt.format
            )));
        }
        Ok(ckpt)
    }
}
