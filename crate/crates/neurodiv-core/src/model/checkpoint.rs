//! Versioned JSON checkpoints with a verified backbone digest.
//!
//! The container stores the full config pair, the SHA-256 of the backbone
//! tensors, and every tensor as base64-encoded little-endian bytes.
//! Loading recomputes the backbone digest and refuses a container whose
//! stored hash does not match, so a frozen backbone can never silently
//! drift between save and load.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;

use crate::autodiff::{Precision, Real, Tensor};

use super::config::{BackboneConfig, ModelError, StreamConfig};
use super::params::NdModel;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct TensorRecord {
    shape: Vec<usize>,
    data: String,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct Container {
    version: u32,
    precision: Precision,
    backbone: BackboneConfig,
    streams: StreamConfig,
    backbone_hash: String,
    tensors: BTreeMap<String, TensorRecord>,
}

/// Serializes the model (all parameters, both configs, backbone digest).
pub fn save<T: Real>(model: &NdModel<T>, path: &Path) -> Result<(), ModelError> {
    let mut tensors = BTreeMap::new();
    for name in model.param_names() {
        let tensor = model.param(name)?;
        tensors.insert(
            name.clone(),
            TensorRecord {
                shape: tensor.shape().to_vec(),
                data: BASE64.encode(tensor.le_bytes()),
            },
        );
    }
    let container = Container {
        version: CHECKPOINT_VERSION,
        precision: T::PRECISION,
        backbone: *model.backbone_config(),
        streams: *model.stream_config(),
        backbone_hash: model.backbone_hash(),
        tensors,
    };
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(file), &container)?;
    Ok(())
}

/// Loads a model saved by [`save`]. The declared precision must match `T`,
/// every config-implied tensor must be present with its expected shape, and
/// the recomputed backbone digest must equal the stored one. The loaded
/// model has its backbone frozen.
pub fn load<T: Real>(path: &Path) -> Result<NdModel<T>, ModelError> {
    let file = std::fs::File::open(path)?;
    let container: Container = serde_json::from_reader(std::io::BufReader::new(file))?;
    if container.version != CHECKPOINT_VERSION {
        return Err(ModelError::CheckpointVersion {
            got: container.version,
            want: CHECKPOINT_VERSION,
        });
    }
    if container.precision != T::PRECISION {
        return Err(ModelError::CheckpointPrecision {
            got: container.precision.to_string(),
            want: T::PRECISION.to_string(),
        });
    }

    // Build a correctly-shaped model, then overwrite every tensor from the
    // container before freezing, so shape validation is config-driven.
    let mut model = NdModel::<T>::build(container.backbone, container.streams, 0)?;
    for name in model.param_names().cloned().collect::<Vec<_>>() {
        let record = container
            .tensors
            .get(&name)
            .ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
        let bytes = BASE64
            .decode(&record.data)
            .map_err(|e| ModelError::BadTensor {
                name: name.clone(),
                msg: e.to_string(),
            })?;
        let tensor = Tensor::<T>::from_le_bytes(&record.shape, &bytes).map_err(|e| {
            ModelError::BadTensor {
                name: name.clone(),
                msg: e.to_string(),
            }
        })?;
        let slot = model.param_mut(&name)?;
        if slot.shape() != tensor.shape() {
            return Err(ModelError::BadTensor {
                name,
                msg: format!(
                    "shape {:?} does not match config-implied {:?}",
                    tensor.shape(),
                    slot.shape()
                ),
            });
        }
        let trainable = slot.requires_grad();
        *slot = tensor;
        slot.set_requires_grad(trainable);
    }

    let recomputed = model.backbone_hash();
    if recomputed != container.backbone_hash {
        return Err(ModelError::BackboneHashMismatch {
            stored: container.backbone_hash,
            recomputed,
        });
    }
    model.freeze_backbone();
    Ok(model)
}
