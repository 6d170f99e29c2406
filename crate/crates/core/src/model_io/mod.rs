//! Weight archives, model and memory-bank loading, image preprocessing.

mod archive;
mod image;

use std::path::Path;

pub use self::archive::{load_archive, ArchiveTensor, Dtype, TensorData, WeightArchive};
pub use self::image::{
    load_and_preprocess, load_rgb, preprocess, resize_channels, resize_rgb, rgb_to_unit_tensor,
    Normalization, IMAGENET,
};

use crate::error::{ArchiveError, Error, Result};
use crate::memory_bank::MemoryBank;
use crate::numerics::Tensor;
use crate::vit::{ViTConfig, VisionTransformer};

pub const BANK_FEATURES: &str = "bank.features";
pub const BANK_LABELS: &str = "bank.labels";

/// Loads and validates a model from an archive plus config.
pub fn load_model(weights: impl AsRef<Path>, cfg: ViTConfig) -> Result<VisionTransformer> {
    cfg.validate()?;
    VisionTransformer::from_tensors(&load_archive(weights)?, cfg)
}

/// Writes the model's parameters as `f32`, the precision released checkpoints use.
pub fn save_model(model: &VisionTransformer, path: impl AsRef<Path>) -> Result<()> {
    WeightArchive::from_tensors_f32(&model.weights().to_tensor_map()).write(path)
}

pub fn bank_to_archive(bank: &MemoryBank) -> WeightArchive {
    let mut a = WeightArchive::new();
    a.insert(BANK_FEATURES, ArchiveTensor::from_tensor_f32(bank.features()));
    a.insert(
        BANK_LABELS,
        ArchiveTensor {
            shape: vec![bank.len()],
            data: TensorData::I64(bank.labels().to_vec()),
        },
    );
    a
}

pub fn bank_from_archive(a: &WeightArchive) -> Result<MemoryBank> {
    let features = a
        .get(BANK_FEATURES)
        .ok_or_else(|| Error::MissingTensor(BANK_FEATURES.into()))?;
    let labels = a
        .get(BANK_LABELS)
        .ok_or_else(|| Error::MissingTensor(BANK_LABELS.into()))?;
    let labels = match &labels.data {
        TensorData::I64(v) => v.clone(),
        other => {
            return Err(ArchiveError::WrongDtype {
                name: BANK_LABELS.into(),
                expected: "i64",
                actual: other.dtype().name(),
            }
            .into())
        }
    };
    let features: Tensor = features.to_tensor(BANK_FEATURES)?;
    if features.ndim() != 2 {
        return Err(Error::TensorShape {
            name: BANK_FEATURES.into(),
            expected: vec![labels.len(), 0],
            actual: features.shape().to_vec(),
        });
    }
    MemoryBank::new(features, labels)
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<MemoryBank> {
    bank_from_archive(&WeightArchive::read(path)?)
}

pub fn save_bank(bank: &MemoryBank, path: impl AsRef<Path>) -> Result<()> {
    bank_to_archive(bank).write(path)
}
