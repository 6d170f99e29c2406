//! Pre-norm vision transformer with trace capture and class-token Jacobians.

mod backward;
mod config;
mod forward;
mod weights;

#[cfg(test)]
mod tests;

use std::collections::BTreeMap;

pub use backward::{class_token_jacobian, class_token_vjp, perturbed_class_token, JacobianMode};
pub use config::ViTConfig;
pub use forward::{
    block_forward, forward_with_trace, mhsa_forward, patch_embed, BlockTrace, ForwardTrace,
    MhsaOutput,
};
pub use weights::{canonical_shapes, BlockWeights, LayerNormParams, Linear, WeightSet};

use crate::error::Result;
use crate::numerics::Tensor;

/// A config together with weights that have been checked against it.
#[derive(Debug, Clone)]
pub struct VisionTransformer {
    cfg: ViTConfig,
    weights: WeightSet,
}

impl VisionTransformer {
    pub fn new(cfg: ViTConfig, weights: WeightSet) -> Result<Self> {
        // Round-trip through the name map so hand-built weight sets get the
        // same shape validation as archives.
        WeightSet::assemble(&weights.to_tensor_map(), &cfg)?;
        Ok(Self { cfg, weights })
    }

    pub fn from_tensors(tensors: &BTreeMap<String, Tensor>, cfg: ViTConfig) -> Result<Self> {
        let weights = WeightSet::assemble(tensors, &cfg)?;
        Ok(Self { cfg, weights })
    }

    pub fn random(cfg: ViTConfig, seed: u64) -> Result<Self> {
        let weights = WeightSet::random(&cfg, seed)?;
        Ok(Self { cfg, weights })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &WeightSet {
        &self.weights
    }

    pub fn forward(&self, image: &Tensor) -> Result<ForwardTrace> {
        forward_with_trace(image, &self.weights, &self.cfg)
    }

    pub fn vjp(&self, trace: &ForwardTrace, direction: &[f64], mode: JacobianMode) -> Result<Vec<Tensor>> {
        class_token_vjp(trace, &self.weights, &self.cfg, direction, mode)
    }

    pub fn jacobian(&self, trace: &ForwardTrace, block: usize, mode: JacobianMode) -> Result<Tensor> {
        class_token_jacobian(trace, &self.weights, &self.cfg, block, mode)
    }

    pub fn perturbed_class_token(
        &self,
        image: &Tensor,
        trace: &ForwardTrace,
        block: usize,
        delta: &[f64],
        mode: JacobianMode,
    ) -> Result<Tensor> {
        perturbed_class_token(image, trace, &self.weights, &self.cfg, block, delta, mode)
    }
}
