use rayon::prelude::*;

use super::tensor::{dot, Tensor};
use crate::error::{Error, Result};

// Below this many multiply-adds the rayon fan-out costs more than it saves.
const PAR_THRESHOLD: usize = 1 << 16;

/// `a[m×k] · b[k×n]`. Each output accumulates over `k` left to right.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            expected: vec![k, n],
            actual: vec![k2, n],
        });
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    let kernel = |(i, row): (usize, &mut [f64])| {
        let arow = &ad[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if n > 0 {
        if m * n * k >= PAR_THRESHOLD {
            out.par_chunks_mut(n).enumerate().for_each(kernel);
        } else {
            out.chunks_mut(n).enumerate().for_each(kernel);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a[m×k] · b[n×k]ᵀ`, the layout of a PyTorch `Linear` weight.
pub fn matmul_transposed(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul_transposed",
            expected: vec![n, k],
            actual: vec![n, k2],
        });
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    let kernel = |(i, row): (usize, &mut [f64])| {
        let arow = &ad[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(arow, &bd[j * k..(j + 1) * k]);
        }
    };
    if n > 0 {
        if m * n * k >= PAR_THRESHOLD {
            out.par_chunks_mut(n).enumerate().for_each(kernel);
        } else {
            out.chunks_mut(n).enumerate().for_each(kernel);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `x Wᵀ + b` with `W` stored `[out×in]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let y = matmul_transposed(x, weight)?;
    match bias {
        Some(b) => y.add_row_vector(b.data()),
        None => Ok(y),
    }
}

/// Numerically stable softmax of one slice in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Row-wise softmax of a 2-D tensor after per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (_, n) = x.dims2()?;
    let mut out = x.clone();
    if n > 0 {
        for row in out.data_mut().chunks_exact_mut(n) {
            softmax_in_place(row);
        }
    }
    Ok(out)
}

/// Layer normalization over the last axis with population variance.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.last_dim();
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::Shape {
            op: "layer_norm",
            expected: vec![d],
            actual: vec![gamma.numel(), beta.numel()],
        });
    }
    let mut out = x.clone();
    if d == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_exact_mut(d) {
        let (mean, inv_std) = moments(row, eps);
        for ((v, g), b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = (*v - mean) * inv_std * g + b;
        }
    }
    Ok(out)
}

/// Mean and `1/sqrt(var + eps)` of a slice.
pub fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// `d/dx x·Φ(x) = Φ(x) + x·φ(x)`.
pub fn gelu_grad_scalar(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// Source coordinate and interpolation weight for one output index under
/// the align-corners-false convention.
fn sample_axis(out_index: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((out_index as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = if i0 + 1 < in_len { i0 + 1 } else { i0 };
    let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
    (i0, i1, frac)
}

/// Bilinear resampling of a 2-D map (align-corners-false, edges clamped).
pub fn bilinear_resize(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = map.dims2()?;
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("cannot resize an empty map".into()));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "output extent {out_h}x{out_w} must be positive"
        )));
    }
    let cols: Vec<_> = (0..out_w).map(|j| sample_axis(j, w, out_w)).collect();
    let src = map.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let (r0, r1, fy) = sample_axis(i, h, out_h);
        for &(c0, c1, fx) in &cols {
            let top = src[r0 * w + c0] * (1.0 - fx) + src[r0 * w + c1] * fx;
            let bottom = src[r1 * w + c0] * (1.0 - fx) + src[r1 * w + c1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}
