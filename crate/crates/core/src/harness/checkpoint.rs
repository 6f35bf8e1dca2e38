//! Named-tensor checkpoint container (JSON).
//!
//! Only trainable tensors are stored. The frozen encoder is rebuilt from its
//! seed and verified against the stored checksum.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, RelationModel};

pub const FORMAT: &str = "sgflash-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub vocabulary: Vocabulary,
    pub encoder_checksum: String,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &RelationModel, vocabulary: &Vocabulary) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            config: model.cfg.clone(),
            vocabulary: vocabulary.clone(),
            encoder_checksum: model.encoder.checksum(),
            tensors: model
                .params
                .iter()
                .map(|(name, t)| NamedTensor {
                    name: name.to_string(),
                    dtype: "f64".into(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_model(&self) -> Result<RelationModel> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut model = RelationModel::new(self.config.clone())?;
        if model.encoder.checksum() != self.encoder_checksum {
            return Err(Error::Data("frozen encoder checksum mismatch".into()));
        }
        if model.params.len() != self.tensors.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                model.params.len()
            )));
        }
        for nt in &self.tensors {
            if nt.dtype != "f64" {
                return Err(Error::Data(format!("{}: unsupported dtype {}", nt.name, nt.dtype)));
            }
            let id = model
                .params
                .find(&nt.name)
                .ok_or_else(|| Error::Data(format!("unknown tensor {}", nt.name)))?;
            if model.params.get(id).shape() != nt.shape.as_slice() {
                return Err(Error::Data(format!(
                    "{}: shape {:?} vs model {:?}",
                    nt.name,
                    nt.shape,
                    model.params.get(id).shape()
                )));
            }
            if nt.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(nt.name.clone()));
            }
            model.params.set_values(id, &nt.data)?;
        }
        Ok(model)
    }

    /// [`Self::to_model`] after checking the checkpoint was trained on
    /// `vocabulary`.
    pub fn to_model_for(&self, vocabulary: &Vocabulary) -> Result<RelationModel> {
        if &self.vocabulary != vocabulary {
            return Err(Error::Data("vocabulary mismatch between dataset and checkpoint".into()));
        }
        self.to_model()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
