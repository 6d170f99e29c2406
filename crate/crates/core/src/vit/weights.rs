use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ViTConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// A `Linear` layer, weight stored `[out×in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1: LayerNormParams,
    /// Fused query/key/value projection, `[3D×D]`, rows ordered q, k, v and
    /// head-major within each.
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// All parameters of a ViT, validated against a [`ViTConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    /// Convolution kernel `[D×C×P×P]`.
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    pub cls_token: Tensor,
    /// `[(N+1)×D]`.
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub final_ln: LayerNormParams,
    pub head: Option<Linear>,
}

/// Canonical archive names of every tensor `cfg` requires.
pub fn canonical_shapes(cfg: &ViTConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.dim;
    let p = cfg.patch_size;
    let hidden = cfg.hidden_dim();
    let mut out = vec![
        ("patch_embed.weight".to_string(), vec![d, cfg.in_chans, p, p]),
        ("patch_embed.bias".to_string(), vec![d]),
        ("cls_token".to_string(), vec![d]),
        ("pos_embed".to_string(), vec![cfg.num_tokens(), d]),
    ];
    for i in 0..cfg.depth {
        let pre = format!("blocks.{i}");
        out.extend([
            (format!("{pre}.ln1.weight"), vec![d]),
            (format!("{pre}.ln1.bias"), vec![d]),
            (format!("{pre}.attn.qkv.weight"), vec![3 * d, d]),
            (format!("{pre}.attn.qkv.bias"), vec![3 * d]),
            (format!("{pre}.attn.proj.weight"), vec![d, d]),
            (format!("{pre}.attn.proj.bias"), vec![d]),
            (format!("{pre}.ln2.weight"), vec![d]),
            (format!("{pre}.ln2.bias"), vec![d]),
            (format!("{pre}.ffn.fc1.weight"), vec![hidden, d]),
            (format!("{pre}.ffn.fc1.bias"), vec![hidden]),
            (format!("{pre}.ffn.fc2.weight"), vec![d, hidden]),
            (format!("{pre}.ffn.fc2.bias"), vec![d]),
        ]);
    }
    out.push(("final_ln.weight".to_string(), vec![d]));
    out.push(("final_ln.bias".to_string(), vec![d]));
    if cfg.has_head() {
        out.push(("head.weight".to_string(), vec![cfg.num_classes, d]));
        out.push(("head.bias".to_string(), vec![cfg.num_classes]));
    }
    out
}

struct Taker<'a> {
    tensors: &'a BTreeMap<String, Tensor>,
    expected: BTreeMap<String, Vec<usize>>,
}

impl Taker<'_> {
    fn take(&self, name: &str) -> Result<Tensor> {
        let expected = &self.expected[name];
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if t.shape() != expected.as_slice() {
            return Err(Error::TensorShape {
                name: name.to_string(),
                expected: expected.clone(),
                actual: t.shape().to_vec(),
            });
        }
        Ok(t.clone())
    }

    fn linear(&self, prefix: &str) -> Result<Linear> {
        Ok(Linear {
            weight: self.take(&format!("{prefix}.weight"))?,
            bias: self.take(&format!("{prefix}.bias"))?,
        })
    }

    fn norm(&self, prefix: &str) -> Result<LayerNormParams> {
        Ok(LayerNormParams {
            gamma: self.take(&format!("{prefix}.weight"))?,
            beta: self.take(&format!("{prefix}.bias"))?,
        })
    }
}

impl WeightSet {
    /// Picks the canonical tensors out of `tensors` and checks every shape.
    /// Extra names (for instance `bank.*`) are ignored.
    pub fn assemble(tensors: &BTreeMap<String, Tensor>, cfg: &ViTConfig) -> Result<Self> {
        cfg.validate()?;
        let taker = Taker {
            tensors,
            expected: canonical_shapes(cfg).into_iter().collect(),
        };
        let blocks = (0..cfg.depth)
            .map(|i| {
                let pre = format!("blocks.{i}");
                Ok(BlockWeights {
                    ln1: taker.norm(&format!("{pre}.ln1"))?,
                    qkv: taker.linear(&format!("{pre}.attn.qkv"))?,
                    proj: taker.linear(&format!("{pre}.attn.proj"))?,
                    ln2: taker.norm(&format!("{pre}.ln2"))?,
                    fc1: taker.linear(&format!("{pre}.ffn.fc1"))?,
                    fc2: taker.linear(&format!("{pre}.ffn.fc2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            patch_weight: taker.take("patch_embed.weight")?,
            patch_bias: taker.take("patch_embed.bias")?,
            cls_token: taker.take("cls_token")?,
            pos_embed: taker.take("pos_embed")?,
            blocks,
            final_ln: taker.norm("final_ln")?,
            head: if cfg.has_head() {
                Some(taker.linear("head")?)
            } else {
                None
            },
        })
    }

    /// Flattens back to canonical names.
    pub fn to_tensor_map(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        let mut put = |name: String, t: &Tensor| {
            out.insert(name, t.clone());
        };
        put("patch_embed.weight".into(), &self.patch_weight);
        put("patch_embed.bias".into(), &self.patch_bias);
        put("cls_token".into(), &self.cls_token);
        put("pos_embed".into(), &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            let pre = format!("blocks.{i}");
            put(format!("{pre}.ln1.weight"), &b.ln1.gamma);
            put(format!("{pre}.ln1.bias"), &b.ln1.beta);
            put(format!("{pre}.attn.qkv.weight"), &b.qkv.weight);
            put(format!("{pre}.attn.qkv.bias"), &b.qkv.bias);
            put(format!("{pre}.attn.proj.weight"), &b.proj.weight);
            put(format!("{pre}.attn.proj.bias"), &b.proj.bias);
            put(format!("{pre}.ln2.weight"), &b.ln2.gamma);
            put(format!("{pre}.ln2.bias"), &b.ln2.beta);
            put(format!("{pre}.ffn.fc1.weight"), &b.fc1.weight);
            put(format!("{pre}.ffn.fc1.bias"), &b.fc1.bias);
            put(format!("{pre}.ffn.fc2.weight"), &b.fc2.weight);
            put(format!("{pre}.ffn.fc2.bias"), &b.fc2.bias);
        }
        put("final_ln.weight".into(), &self.final_ln.gamma);
        put("final_ln.bias".into(), &self.final_ln.beta);
        if let Some(h) = &self.head {
            put("head.weight".into(), &h.weight);
            put("head.bias".into(), &h.bias);
        }
        out
    }

    /// Random parameters of realistic scale for small synthetic models.
    /// Linear weights are drawn with std `1/sqrt(fan_in)`, norms near identity.
    pub fn random(cfg: &ViTConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in canonical_shapes(cfg) {
            let n: usize = shape.iter().product();
            let fan_in = if shape.len() >= 2 {
                shape[1..].iter().product::<usize>()
            } else {
                1
            };
            let (mean, std) = if name.ends_with("ln1.weight")
                || name.ends_with("ln2.weight")
                || name == "final_ln.weight"
            {
                (1.0, 0.1)
            } else if name.contains("ln") && name.ends_with(".bias") {
                (0.0, 0.1)
            } else if name.ends_with(".bias") {
                (0.0, 0.05)
            } else if name == "cls_token" || name == "pos_embed" {
                (0.0, 0.5)
            } else {
                (0.0, 1.0 / (fan_in as f64).sqrt())
            };
            let dist = Normal::new(mean, std).expect("finite std");
            let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Self::assemble(&tensors, cfg)
    }
}
