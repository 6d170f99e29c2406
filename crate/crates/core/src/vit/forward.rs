use super::config::ViTConfig;
use super::weights::{BlockWeights, LayerNormParams, WeightSet};
use crate::error::{Error, Result};
use crate::numerics::{gelu, layer_norm, linear, matmul, matmul_transposed, softmax_rows, Tensor};

/// Intermediates of one block kept for the reverse pass.
#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    pub input: Tensor,
    /// Per head `(q, k, v)`, each `[(N+1)×hd]`.
    pub qkv: Vec<(Tensor, Tensor, Tensor)>,
    /// Per head attention matrix `[(N+1)×(N+1)]`.
    pub probs: Vec<Tensor>,
    pub out_mhsa: Tensor,
    pub fc1_pre: Tensor,
}

/// Result of the attention half of a block.
#[derive(Debug, Clone)]
pub struct MhsaOutput {
    /// `Linear(AV) + M_{b-1}`.
    pub out: Tensor,
    /// Class-token attention row per head, `[h×(N+1)]`.
    pub class_attention: Tensor,
    /// Value matrices, `[h×(N+1)×hd]`.
    pub values: Tensor,
    /// Class row of the concatenated head outputs before the output projection.
    pub t: Tensor,
    pub(crate) qkv: Vec<(Tensor, Tensor, Tensor)>,
    pub(crate) probs: Vec<Tensor>,
}

/// What one block contributes to a [`ForwardTrace`].
#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub class_attention: Tensor,
    pub values: Tensor,
    pub t: Tensor,
    pub class_token_in: Tensor,
    pub class_token_out: Tensor,
    pub(crate) cache: BlockCache,
}

/// Everything the attention-map engine needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub blocks: Vec<BlockTrace>,
    /// Class token leaving the last block, before the final norm.
    pub final_input: Tensor,
    /// Class token after the final norm; what the head or memory bank sees.
    pub class_token: Tensor,
    pub logits: Option<Tensor>,
}

impl ForwardTrace {
    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Block `b`, 1-based.
    pub fn block(&self, b: usize) -> Result<&BlockTrace> {
        if b == 0 || b > self.blocks.len() {
            return Err(Error::BlockOutOfRange {
                block: b,
                depth: self.blocks.len(),
            });
        }
        Ok(&self.blocks[b - 1])
    }

    pub fn predicted_class(&self) -> Option<usize> {
        self.logits.as_ref().and_then(Tensor::argmax)
    }
}

fn ln(x: &Tensor, p: &LayerNormParams, eps: f64) -> Result<Tensor> {
    layer_norm(x, &p.gamma, &p.beta, eps)
}

/// Splits an image into row-major patches, prepends the class token and adds
/// position embeddings. Output `[(N+1)×D]`.
pub fn patch_embed(image: &Tensor, weights: &WeightSet, cfg: &ViTConfig) -> Result<Tensor> {
    let (c, s, p) = (cfg.in_chans, cfg.image_size, cfg.patch_size);
    if image.shape() != [c, s, s] {
        return Err(Error::Shape {
            op: "patch_embed",
            expected: vec![c, s, s],
            actual: image.shape().to_vec(),
        });
    }
    let g = cfg.grid();
    let k = c * p * p;
    let px = image.data();
    let mut patches = Vec::with_capacity(cfg.num_patches() * k);
    for pr in 0..g {
        for pc in 0..g {
            for ch in 0..c {
                for i in 0..p {
                    let base = ch * s * s + (pr * p + i) * s + pc * p;
                    patches.extend_from_slice(&px[base..base + p]);
                }
            }
        }
    }
    let patches = Tensor::new(vec![cfg.num_patches(), k], patches)?;
    let kernel = weights.patch_weight.clone().reshape(vec![cfg.dim, k])?;
    let proj = linear(&patches, &kernel, Some(&weights.patch_bias))?;

    let d = cfg.dim;
    let mut tokens = Tensor::zeros(&[cfg.num_tokens(), d]);
    tokens.row_mut(0).copy_from_slice(weights.cls_token.data());
    for n in 0..cfg.num_patches() {
        tokens.row_mut(n + 1).copy_from_slice(proj.row(n));
    }
    tokens.add(&weights.pos_embed)
}

fn attention(
    m: &Tensor,
    bw: &BlockWeights,
    cfg: &ViTConfig,
    t_offset: Option<&[f64]>,
) -> Result<MhsaOutput> {
    let (tokens, d) = m.dims2()?;
    if d != cfg.dim {
        return Err(Error::Shape {
            op: "mhsa_forward",
            expected: vec![tokens, cfg.dim],
            actual: vec![tokens, d],
        });
    }
    let hd = cfg.head_dim();
    let ln1_out = ln(m, &bw.ln1, cfg.eps)?;
    let qkv_all = linear(&ln1_out, &bw.qkv.weight, Some(&bw.qkv.bias))?;
    let scale = 1.0 / (hd as f64).sqrt();

    let mut qkv = Vec::with_capacity(cfg.heads);
    let mut probs = Vec::with_capacity(cfg.heads);
    let mut heads_out = Vec::with_capacity(cfg.heads);
    let mut class_attention = Vec::with_capacity(cfg.heads * tokens);
    let mut values = Vec::with_capacity(cfg.heads * tokens * hd);
    for h in 0..cfg.heads {
        let q = qkv_all.column_block(h * hd, hd)?;
        let k = qkv_all.column_block(d + h * hd, hd)?;
        let v = qkv_all.column_block(2 * d + h * hd, hd)?;
        let a = softmax_rows(&matmul_transposed(&q, &k)?.scale(scale))?;
        heads_out.push(matmul(&a, &v)?);
        class_attention.extend_from_slice(a.row(0));
        values.extend_from_slice(v.data());
        probs.push(a);
        qkv.push((q, k, v));
    }
    let mut av = Tensor::concat_columns(&heads_out)?;
    if let Some(delta) = t_offset {
        for (x, dx) in av.row_mut(0).iter_mut().zip(delta) {
            *x += dx;
        }
    }
    let t = Tensor::from_vec(av.row(0).to_vec());
    let out = linear(&av, &bw.proj.weight, Some(&bw.proj.bias))?.add(m)?;
    Ok(MhsaOutput {
        out,
        class_attention: Tensor::new(vec![cfg.heads, tokens], class_attention)?,
        values: Tensor::new(vec![cfg.heads, tokens, hd], values)?,
        t,
        qkv,
        probs,
    })
}

/// Pre-norm multi-head self-attention with residual.
pub fn mhsa_forward(m: &Tensor, bw: &BlockWeights, cfg: &ViTConfig) -> Result<MhsaOutput> {
    attention(m, bw, cfg, None)
}

fn block_inner(
    m: &Tensor,
    bw: &BlockWeights,
    cfg: &ViTConfig,
    t_offset: Option<&[f64]>,
) -> Result<(Tensor, BlockTrace)> {
    let att = attention(m, bw, cfg, t_offset)?;
    let ln2_out = ln(&att.out, &bw.ln2, cfg.eps)?;
    let fc1_pre = linear(&ln2_out, &bw.fc1.weight, Some(&bw.fc1.bias))?;
    let ffn = linear(&gelu(&fc1_pre), &bw.fc2.weight, Some(&bw.fc2.bias))?;
    let next = ffn.add(&att.out)?;
    let trace = BlockTrace {
        class_attention: att.class_attention,
        values: att.values,
        t: att.t,
        class_token_in: Tensor::from_vec(m.row(0).to_vec()),
        class_token_out: Tensor::from_vec(next.row(0).to_vec()),
        cache: BlockCache {
            input: m.clone(),
            qkv: att.qkv,
            probs: att.probs,
            out_mhsa: att.out,
            fc1_pre,
        },
    };
    Ok((next, trace))
}

/// One transformer block: `M_b = FFN(LN(Out)) + Out`.
pub fn block_forward(m: &Tensor, bw: &BlockWeights, cfg: &ViTConfig) -> Result<(Tensor, BlockTrace)> {
    block_inner(m, bw, cfg, None)
}

/// Final norm and head applied to a class token.
pub(crate) fn finish(
    x: &Tensor,
    weights: &WeightSet,
    cfg: &ViTConfig,
) -> Result<(Tensor, Option<Tensor>)> {
    let x2 = Tensor::new(vec![1, cfg.dim], x.data().to_vec())?;
    let z = if cfg.final_norm {
        ln(&x2, &weights.final_ln, cfg.eps)?
    } else {
        x2
    };
    let logits = match &weights.head {
        Some(h) => Some(Tensor::from_vec(
            linear(&z, &h.weight, Some(&h.bias))?.into_data(),
        )),
        None => None,
    };
    Ok((Tensor::from_vec(z.into_data()), logits))
}

pub(crate) fn run(
    image: &Tensor,
    weights: &WeightSet,
    cfg: &ViTConfig,
    offset: Option<(usize, &[f64])>,
) -> Result<ForwardTrace> {
    let mut m = patch_embed(image, weights, cfg)?;
    let mut blocks = Vec::with_capacity(cfg.depth);
    for (i, bw) in weights.blocks.iter().enumerate() {
        let delta = offset.and_then(|(b, d)| (b == i + 1).then_some(d));
        let (next, trace) = block_inner(&m, bw, cfg, delta)?;
        blocks.push(trace);
        m = next;
    }
    let final_input = Tensor::from_vec(m.row(0).to_vec());
    let (class_token, logits) = finish(&final_input, weights, cfg)?;
    Ok(ForwardTrace {
        blocks,
        final_input,
        class_token,
        logits,
    })
}

/// Runs the whole model and records per-block class attention, values,
/// `T_b` and class tokens.
pub fn forward_with_trace(image: &Tensor, weights: &WeightSet, cfg: &ViTConfig) -> Result<ForwardTrace> {
    run(image, weights, cfg, None)
}
