use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_eps() -> f64 {
    1e-6
}

fn default_in_chans() -> usize {
    3
}

fn default_true() -> bool {
    true
}

/// Architecture hyper-parameters of a pre-norm ViT, read from a JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Classifier outputs; 0 for a headless (memory-bank) model.
    #[serde(default)]
    pub num_classes: usize,
    #[serde(default = "default_in_chans")]
    pub in_chans: usize,
    /// Apply the final layer norm before the head. Released ViT/DeiT weights
    /// always have one; switching it off is only useful for analytic fixtures.
    #[serde(default = "default_true")]
    pub final_norm: bool,
}

impl ViTConfig {
    /// DeiT-tiny/16 at 224 px.
    pub fn deit_tiny() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            dim: 192,
            depth: 12,
            heads: 3,
            mlp_ratio: 4.0,
            eps: 1e-6,
            num_classes: 1000,
            in_chans: 3,
            final_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 {
            return Err(Error::Config("image_size and patch_size must be positive".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.in_chans == 0 {
            return Err(Error::Config("in_chans must be positive".into()));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) || self.hidden_dim() == 0 {
            return Err(Error::Config(format!("bad mlp_ratio {}", self.mlp_ratio)));
        }
        if !(self.eps.is_finite() && self.eps >= 0.0) {
            return Err(Error::Config(format!("bad eps {}", self.eps)));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config json: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// `N`, the patch-token count.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// `N + 1`, tokens including the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn has_head(&self) -> bool {
        self.num_classes > 0
    }
}
