//! Reverse pass from the final class token back to every block's `T_b`.
//!
//! Only input-side adjoints are formed; no weight gradients. One sweep with a
//! direction `g` yields `g·∂x/∂T_b` for all blocks at once, which is all the
//! channel-importance computation needs.

use serde::{Deserialize, Serialize};

use super::config::ViTConfig;
use super::forward::{BlockCache, ForwardTrace};
use super::weights::{BlockWeights, WeightSet};
use crate::error::{Error, Result};
use crate::numerics::{gelu_grad_scalar, matmul, matmul_transposed, moments, Tensor};

/// How `∂x_B/∂T_b` is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    /// Exact derivative through everything downstream of `T_b`, later
    /// attention matrices included.
    #[default]
    Full,
    /// Later `T_i` held fixed; only the class-token residual chain
    /// (projection, norm, FFN) carries the perturbation.
    ResidualPath,
}

impl std::str::FromStr for JacobianMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "residual" | "residual_path" | "residual-path" => Ok(Self::ResidualPath),
            other => Err(Error::InvalidArgument(format!("unknown jacobian mode `{other}`"))),
        }
    }
}

/// Layer-norm input adjoint of one row.
fn layer_norm_backward_row(x: &[f64], gamma: &[f64], eps: f64, dy: &[f64], dx: &mut [f64]) {
    let n = x.len() as f64;
    let (mean, inv_std) = moments(x, eps);
    let mut mean_g = 0.0;
    let mut mean_gx = 0.0;
    for i in 0..x.len() {
        let g = dy[i] * gamma[i];
        let xhat = (x[i] - mean) * inv_std;
        mean_g += g;
        mean_gx += g * xhat;
    }
    mean_g /= n;
    mean_gx /= n;
    for i in 0..x.len() {
        let g = dy[i] * gamma[i];
        let xhat = (x[i] - mean) * inv_std;
        dx[i] += inv_std * (g - mean_g - xhat * mean_gx);
    }
}

/// Adds the layer-norm adjoint of every row of `x` into `acc`.
fn layer_norm_backward_into(x: &Tensor, gamma: &Tensor, eps: f64, dy: &Tensor, acc: &mut Tensor) {
    let d = x.last_dim();
    for r in 0..x.numel() / d {
        layer_norm_backward_row(x.row(r), gamma.data(), eps, dy.row(r), acc.row_mut(r));
    }
}

/// Adjoint through `LN2 → fc1 → GELU → fc2`, added into `acc`.
fn ffn_backward_into(
    d_ffn_out: &Tensor,
    out_mhsa: &Tensor,
    fc1_pre: &Tensor,
    bw: &BlockWeights,
    eps: f64,
    acc: &mut Tensor,
) -> Result<()> {
    let d_act = matmul(d_ffn_out, &bw.fc2.weight)?;
    let mut d_pre = d_act;
    for (g, &z) in d_pre.data_mut().iter_mut().zip(fc1_pre.data()) {
        *g *= gelu_grad_scalar(z);
    }
    let d_ln2 = matmul(&d_pre, &bw.fc1.weight)?;
    layer_norm_backward_into(out_mhsa, &bw.ln2.gamma, eps, &d_ln2, acc);
    Ok(())
}

/// Backward through one full block. Returns `(∂/∂M_{b-1}, ∂/∂T_b)`.
fn block_backward(
    d_next: &Tensor,
    cache: &BlockCache,
    bw: &BlockWeights,
    cfg: &ViTConfig,
) -> Result<(Tensor, Tensor)> {
    let d = cfg.dim;
    let hd = cfg.head_dim();
    let tokens = d_next.rows();

    let mut d_out = d_next.clone();
    ffn_backward_into(d_next, &cache.out_mhsa, &cache.fc1_pre, bw, cfg.eps, &mut d_out)?;

    let d_av = matmul(&d_out, &bw.proj.weight)?;
    let d_t = Tensor::from_vec(d_av.row(0).to_vec());

    let scale = 1.0 / (hd as f64).sqrt();
    let mut d_qkv = Tensor::zeros(&[tokens, 3 * d]);
    for h in 0..cfg.heads {
        let (q, k, v) = &cache.qkv[h];
        let p = &cache.probs[h];
        let d_head = d_av.column_block(h * hd, hd)?;
        let d_p = matmul_transposed(&d_head, v)?;
        let d_v = matmul(&p.transpose()?, &d_head)?;
        let mut d_s = Tensor::zeros(&[tokens, tokens]);
        for i in 0..tokens {
            let pr = p.row(i);
            let gr = d_p.row(i);
            let inner: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for (o, (a, b)) in d_s.row_mut(i).iter_mut().zip(pr.iter().zip(gr)) {
                *o = a * (b - inner) * scale;
            }
        }
        let d_q = matmul(&d_s, k)?;
        let d_k = matmul(&d_s.transpose()?, q)?;
        for r in 0..tokens {
            let row = d_qkv.row_mut(r);
            row[h * hd..(h + 1) * hd].copy_from_slice(d_q.row(r));
            row[d + h * hd..d + (h + 1) * hd].copy_from_slice(d_k.row(r));
            row[2 * d + h * hd..2 * d + (h + 1) * hd].copy_from_slice(d_v.row(r));
        }
    }
    let d_ln1 = matmul(&d_qkv, &bw.qkv.weight)?;
    let mut d_prev = d_out;
    layer_norm_backward_into(&cache.input, &bw.ln1.gamma, cfg.eps, &d_ln1, &mut d_prev);
    Ok((d_prev, d_t))
}

/// Adjoint at the last block's class-token output for an output direction.
fn final_norm_backward(
    trace: &ForwardTrace,
    weights: &WeightSet,
    cfg: &ViTConfig,
    direction: &[f64],
) -> Vec<f64> {
    if cfg.final_norm {
        let mut dx = vec![0.0; cfg.dim];
        layer_norm_backward_row(
            trace.final_input.data(),
            weights.final_ln.gamma.data(),
            cfg.eps,
            direction,
            &mut dx,
        );
        dx
    } else {
        direction.to_vec()
    }
}

/// Vector-Jacobian product `gᵀ·∂x/∂T_b` for every block, where `x` is the
/// class token after the final norm. Entry `b-1` belongs to block `b`.
pub fn class_token_vjp(
    trace: &ForwardTrace,
    weights: &WeightSet,
    cfg: &ViTConfig,
    direction: &[f64],
    mode: JacobianMode,
) -> Result<Vec<Tensor>> {
    if direction.len() != cfg.dim {
        return Err(Error::Shape {
            op: "class_token_vjp",
            expected: vec![cfg.dim],
            actual: vec![direction.len()],
        });
    }
    if trace.blocks.len() != weights.blocks.len() {
        return Err(Error::InvalidArgument(format!(
            "trace has {} blocks, weights have {}",
            trace.blocks.len(),
            weights.blocks.len()
        )));
    }
    let g_final = final_norm_backward(trace, weights, cfg, direction);
    let depth = trace.blocks.len();
    let mut out = vec![Tensor::zeros(&[cfg.dim]); depth];
    match mode {
        JacobianMode::Full => {
            let tokens = trace.blocks[depth - 1].cache.input.rows();
            let mut d_m = Tensor::zeros(&[tokens, cfg.dim]);
            d_m.row_mut(0).copy_from_slice(&g_final);
            for i in (0..depth).rev() {
                let (d_prev, d_t) =
                    block_backward(&d_m, &trace.blocks[i].cache, &weights.blocks[i], cfg)?;
                out[i] = d_t;
                d_m = d_prev;
            }
        }
        JacobianMode::ResidualPath => {
            let mut g = Tensor::new(vec![1, cfg.dim], g_final)?;
            for i in (0..depth).rev() {
                let cache = &trace.blocks[i].cache;
                let bw = &weights.blocks[i];
                let out_row = cache.out_mhsa.row_block(0, 1)?;
                let fc1_row = cache.fc1_pre.row_block(0, 1)?;
                let mut d_out = g.clone();
                ffn_backward_into(&g, &out_row, &fc1_row, bw, cfg.eps, &mut d_out)?;
                out[i] = Tensor::from_vec(matmul(&d_out, &bw.proj.weight)?.into_data());
                g = d_out;
            }
        }
    }
    Ok(out)
}

/// `J_b = ∂x/∂T_b` as a `[D×D]` matrix, row `i` holding `∂x_i/∂T_b`.
pub fn class_token_jacobian(
    trace: &ForwardTrace,
    weights: &WeightSet,
    cfg: &ViTConfig,
    block: usize,
    mode: JacobianMode,
) -> Result<Tensor> {
    trace.block(block)?;
    let d = cfg.dim;
    let mut jac = Tensor::zeros(&[d, d]);
    let mut e = vec![0.0; d];
    for i in 0..d {
        e[i] = 1.0;
        let rows = class_token_vjp(trace, weights, cfg, &e, mode)?;
        jac.row_mut(i).copy_from_slice(rows[block - 1].data());
        e[i] = 0.0;
    }
    Ok(jac)
}

/// Re-evaluates the final class token with `delta` added to `T_b`.
///
/// `Full` reruns the whole forward pass from the block input. `ResidualPath`
/// holds the traced `T_i` of later blocks fixed and propagates only the class
/// token. Used to check Jacobians by finite differences.
pub fn perturbed_class_token(
    image: &Tensor,
    trace: &ForwardTrace,
    weights: &WeightSet,
    cfg: &ViTConfig,
    block: usize,
    delta: &[f64],
    mode: JacobianMode,
) -> Result<Tensor> {
    trace.block(block)?;
    if delta.len() != cfg.dim {
        return Err(Error::Shape {
            op: "perturbed_class_token",
            expected: vec![cfg.dim],
            actual: vec![delta.len()],
        });
    }
    match mode {
        JacobianMode::Full => {
            Ok(super::forward::run(image, weights, cfg, Some((block, delta)))?.class_token)
        }
        JacobianMode::ResidualPath => {
            use crate::numerics::{gelu, layer_norm, linear};
            let mut x = Tensor::new(vec![1, cfg.dim], trace.blocks[block - 1].class_token_in.data().to_vec())?;
            for i in block - 1..trace.blocks.len() {
                let bw = &weights.blocks[i];
                let mut t = trace.blocks[i].t.data().to_vec();
                if i == block - 1 {
                    for (a, b) in t.iter_mut().zip(delta) {
                        *a += b;
                    }
                }
                let t = Tensor::new(vec![1, cfg.dim], t)?;
                let out = linear(&t, &bw.proj.weight, Some(&bw.proj.bias))?.add(&x)?;
                let h = layer_norm(&out, &bw.ln2.gamma, &bw.ln2.beta, cfg.eps)?;
                let h = gelu(&linear(&h, &bw.fc1.weight, Some(&bw.fc1.bias))?);
                x = linear(&h, &bw.fc2.weight, Some(&bw.fc2.bias))?.add(&out)?;
            }
            Ok(super::forward::finish(&x, weights, cfg)?.0)
        }
    }
}
