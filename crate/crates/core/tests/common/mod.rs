//! Independent reference implementation used by the oracle and acceptance
//! suites: a plain-loop ViT over forward-mode dual numbers. It reads raw
//! weight buffers and shares no arithmetic with the library.

#![allow(dead_code)]

use daam::vit::{BlockWeights, JacobianMode, ViTConfig, WeightSet};
use daam::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Value plus tangent vector; an empty tangent means zero.
#[derive(Clone, Debug)]
pub struct Dual {
    pub v: f64,
    pub t: Vec<f64>,
}

fn axpy(acc: &mut Vec<f64>, a: f64, x: &[f64]) {
    if x.is_empty() || a == 0.0 {
        return;
    }
    if acc.is_empty() {
        acc.resize(x.len(), 0.0);
    }
    for (o, xi) in acc.iter_mut().zip(x) {
        *o += a * xi;
    }
}

impl Dual {
    pub fn c(v: f64) -> Self {
        Self { v, t: Vec::new() }
    }

    pub fn seeded(v: f64, dim: usize, index: usize) -> Self {
        let mut t = vec![0.0; dim];
        t[index] = 1.0;
        Self { v, t }
    }

    pub fn strip(&self) -> Self {
        Self::c(self.v)
    }

    fn chain(&self, v: f64, dv: f64) -> Self {
        let mut t = Vec::new();
        axpy(&mut t, dv, &self.t);
        Self { v, t }
    }

    pub fn add(&self, o: &Dual) -> Self {
        let mut t = self.t.clone();
        axpy(&mut t, 1.0, &o.t);
        Self { v: self.v + o.v, t }
    }

    pub fn sub(&self, o: &Dual) -> Self {
        let mut t = self.t.clone();
        axpy(&mut t, -1.0, &o.t);
        Self { v: self.v - o.v, t }
    }

    pub fn mul(&self, o: &Dual) -> Self {
        let mut t = Vec::new();
        axpy(&mut t, o.v, &self.t);
        axpy(&mut t, self.v, &o.t);
        Self { v: self.v * o.v, t }
    }

    pub fn scale(&self, k: f64) -> Self {
        self.chain(self.v * k, k)
    }

    pub fn add_c(&self, k: f64) -> Self {
        Self {
            v: self.v + k,
            t: self.t.clone(),
        }
    }

    pub fn recip(&self) -> Self {
        self.chain(1.0 / self.v, -1.0 / (self.v * self.v))
    }

    pub fn exp(&self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }

    pub fn sqrt(&self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s)
    }

    pub fn gelu(&self) -> Self {
        let x = self.v;
        let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
        let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        self.chain(x * cdf, cdf + x * pdf)
    }

    pub fn tangent(&self, i: usize) -> f64 {
        self.t.get(i).copied().unwrap_or(0.0)
    }
}

fn dot_cd(w: &[f64], x: &[Dual]) -> Dual {
    let mut v = 0.0;
    let mut t = Vec::new();
    for (wi, xi) in w.iter().zip(x) {
        v += wi * xi.v;
        axpy(&mut t, *wi, &xi.t);
    }
    Dual { v, t }
}

fn dot_dd(a: &[Dual], b: &[Dual]) -> Dual {
    let mut v = 0.0;
    let mut t = Vec::new();
    for (x, y) in a.iter().zip(b) {
        v += x.v * y.v;
        axpy(&mut t, y.v, &x.t);
        axpy(&mut t, x.v, &y.t);
    }
    Dual { v, t }
}

pub fn consts(v: &[f64]) -> Vec<Dual> {
    v.iter().map(|&x| Dual::c(x)).collect()
}

pub fn values(v: &[Dual]) -> Vec<f64> {
    v.iter().map(|x| x.v).collect()
}

fn layer_norm(x: &[Dual], gamma: &Tensor, beta: &Tensor, eps: f64) -> Vec<Dual> {
    let n = x.len() as f64;
    let mut sum = Dual::c(0.0);
    for xi in x {
        sum = sum.add(xi);
    }
    let mean = sum.scale(1.0 / n);
    let centered: Vec<Dual> = x.iter().map(|xi| xi.sub(&mean)).collect();
    let mut ss = Dual::c(0.0);
    for c in &centered {
        ss = ss.add(&c.mul(c));
    }
    let inv = ss.scale(1.0 / n).add_c(eps).sqrt().recip();
    centered
        .iter()
        .enumerate()
        .map(|(i, c)| c.mul(&inv).scale(gamma.data()[i]).add_c(beta.data()[i]))
        .collect()
}

fn linear(x: &[Dual], weight: &Tensor, bias: &Tensor) -> Vec<Dual> {
    let (out, inp) = (weight.shape()[0], weight.shape()[1]);
    assert_eq!(inp, x.len());
    (0..out)
        .map(|o| dot_cd(&weight.data()[o * inp..(o + 1) * inp], x).add_c(bias.data()[o]))
        .collect()
}

/// Where forward-mode tangents enter the network.
#[derive(Clone, Copy, Debug)]
pub struct Seed {
    pub block: usize,
    pub mode: JacobianMode,
}

pub struct NaiveMhsa {
    pub out: Vec<Vec<Dual>>,
    /// `[h][N+1]`.
    pub class_attention: Vec<Vec<f64>>,
    /// `[h][N+1][hd]`.
    pub values: Vec<Vec<Vec<f64>>>,
    /// Concatenated head outputs, class row.
    pub t: Vec<f64>,
}

/// `seed`: `Some(true)` seeds the class row of the head outputs,
/// `Some(false)` holds it constant, `None` leaves it alone.
pub fn naive_mhsa(m: &[Vec<Dual>], bw: &BlockWeights, cfg: &ViTConfig, seed: Option<bool>) -> NaiveMhsa {
    let (tokens, d, heads) = (m.len(), cfg.dim, cfg.heads);
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let qkv: Vec<Vec<Dual>> = m
        .iter()
        .map(|row| linear(&layer_norm(row, &bw.ln1.gamma, &bw.ln1.beta, cfg.eps), &bw.qkv.weight, &bw.qkv.bias))
        .collect();
    let mut av = vec![vec![Dual::c(0.0); d]; tokens];
    let mut class_attention = Vec::new();
    let mut all_values = Vec::new();
    for h in 0..heads {
        let q = |n: usize| &qkv[n][h * hd..(h + 1) * hd];
        let k = |n: usize| &qkv[n][d + h * hd..d + (h + 1) * hd];
        let v = |n: usize| &qkv[n][2 * d + h * hd..2 * d + (h + 1) * hd];
        for i in 0..tokens {
            let scores: Vec<Dual> = (0..tokens).map(|j| dot_dd(q(i), k(j)).scale(scale)).collect();
            let mx = scores.iter().map(|s| s.v).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<Dual> = scores.iter().map(|s| s.add_c(-mx).exp()).collect();
            let mut z = Dual::c(0.0);
            for ej in &e {
                z = z.add(ej);
            }
            let zr = z.recip();
            let a: Vec<Dual> = e.iter().map(|ej| ej.mul(&zr)).collect();
            if i == 0 {
                class_attention.push(values(&a));
            }
            for j in 0..hd {
                let mut acc = Dual::c(0.0);
                for n in 0..tokens {
                    acc = acc.add(&a[n].mul(&v(n)[j]));
                }
                av[i][h * hd + j] = acc;
            }
        }
        all_values.push((0..tokens).map(|n| values(v(n))).collect());
    }
    match seed {
        Some(true) => {
            for (dd, x) in av[0].iter_mut().enumerate() {
                *x = Dual::seeded(x.v, d, dd);
            }
        }
        Some(false) => {
            for x in av[0].iter_mut() {
                *x = x.strip();
            }
        }
        None => {}
    }
    let t = values(&av[0]);
    let out = av
        .iter()
        .zip(m)
        .map(|(row, res)| {
            linear(row, &bw.proj.weight, &bw.proj.bias)
                .iter()
                .zip(res)
                .map(|(a, b)| a.add(b))
                .collect()
        })
        .collect();
    NaiveMhsa {
        out,
        class_attention,
        values: all_values,
        t,
    }
}

pub fn naive_ffn(out: &[Vec<Dual>], bw: &BlockWeights, cfg: &ViTConfig) -> Vec<Vec<Dual>> {
    out.iter()
        .map(|row| {
            let h: Vec<Dual> = linear(&layer_norm(row, &bw.ln2.gamma, &bw.ln2.beta, cfg.eps), &bw.fc1.weight, &bw.fc1.bias)
                .iter()
                .map(Dual::gelu)
                .collect();
            linear(&h, &bw.fc2.weight, &bw.fc2.bias)
                .iter()
                .zip(row)
                .map(|(a, b)| a.add(b))
                .collect()
        })
        .collect()
}

pub fn naive_embed(image: &Tensor, w: &WeightSet, cfg: &ViTConfig) -> Vec<Vec<Dual>> {
    let (c, s, p, d) = (cfg.in_chans, cfg.image_size, cfg.patch_size, cfg.dim);
    let g = s / p;
    let px = image.data();
    let kw = w.patch_weight.data();
    let pos = w.pos_embed.data();
    let mut tokens = vec![consts(
        &(0..d).map(|j| w.cls_token.data()[j] + pos[j]).collect::<Vec<_>>(),
    )];
    for pr in 0..g {
        for pc in 0..g {
            let n = pr * g + pc + 1;
            let row: Vec<f64> = (0..d)
                .map(|o| {
                    let mut acc = w.patch_bias.data()[o];
                    for ch in 0..c {
                        for i in 0..p {
                            for j in 0..p {
                                acc += kw[((o * c + ch) * p + i) * p + j]
                                    * px[(ch * s + pr * p + i) * s + pc * p + j];
                            }
                        }
                    }
                    acc + pos[n * d + o]
                })
                .collect();
            tokens.push(consts(&row));
        }
    }
    tokens
}

pub struct NaiveTrace {
    pub blocks: Vec<NaiveMhsa>,
    /// Class token after the final norm.
    pub x: Vec<Dual>,
    pub logits: Option<Vec<f64>>,
}

pub fn naive_forward(image: &Tensor, w: &WeightSet, cfg: &ViTConfig, seed: Option<Seed>) -> NaiveTrace {
    let mut m = naive_embed(image, w, cfg);
    let mut blocks = Vec::new();
    for (i, bw) in w.blocks.iter().enumerate() {
        let b = i + 1;
        let flag = seed.and_then(|s| {
            if s.block == b {
                Some(true)
            } else if b > s.block && s.mode == JacobianMode::ResidualPath {
                Some(false)
            } else {
                None
            }
        });
        let att = naive_mhsa(&m, bw, cfg, flag);
        m = naive_ffn(&att.out, bw, cfg);
        blocks.push(att);
    }
    let x = if cfg.final_norm {
        layer_norm(&m[0], &w.final_ln.gamma, &w.final_ln.beta, cfg.eps)
    } else {
        m[0].clone()
    };
    let logits = w.head.as_ref().map(|h| values(&linear(&x, &h.weight, &h.bias)));
    NaiveTrace { blocks, x, logits }
}

/// `J[i][d] = ∂x_i/∂T_b[d]` by forward-mode propagation.
pub fn naive_jacobian(image: &Tensor, w: &WeightSet, cfg: &ViTConfig, block: usize, mode: JacobianMode) -> Vec<Vec<f64>> {
    let tr = naive_forward(image, w, cfg, Some(Seed { block, mode }));
    tr.x.iter()
        .map(|xi| (0..cfg.dim).map(|dd| xi.tangent(dd)).collect())
        .collect()
}

/// Reference per-block maps and their running sums for output direction `weight`.
pub fn naive_flow(
    image: &Tensor,
    w: &WeightSet,
    cfg: &ViTConfig,
    weight: &[f64],
    mode: JacobianMode,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let plain = naive_forward(image, w, cfg, None);
    let (d, hd) = (cfg.dim, cfg.dim / cfg.heads);
    let tokens = plain.blocks[0].class_attention[0].len();
    let mut per_block = Vec::new();
    for b in 1..=cfg.depth {
        let j = naive_jacobian(image, w, cfg, b, mode);
        let c: Vec<f64> = (0..d)
            .map(|dd| (0..d).map(|i| weight[i] * j[i][dd]).sum::<f64>().max(0.0))
            .collect();
        let blk = &plain.blocks[b - 1];
        let mut cells = Vec::new();
        for n in 1..tokens {
            let mut score = 0.0;
            for h in 0..cfg.heads {
                for jj in 0..hd {
                    score += c[h * hd + jj] * blk.class_attention[h][n] * blk.values[h][n][jj];
                }
            }
            cells.push(score.max(0.0));
        }
        per_block.push(cells);
    }
    let mut acc = vec![0.0; tokens - 1];
    let accumulated = per_block
        .iter()
        .map(|m| {
            for (a, v) in acc.iter_mut().zip(m) {
                *a += v;
            }
            acc.clone()
        })
        .collect();
    (per_block, accumulated)
}

/// Reference memory-bank weight: neighbours by cosine similarity (ties to
/// the lower index), then the per-dimension share of each similarity.
pub fn naive_knn_weight(x: &[f64], bank: &[Vec<f64>], k: usize) -> Vec<f64> {
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nx = norm(x);
    let mut sims: Vec<(usize, f64)> = bank
        .iter()
        .enumerate()
        .map(|(i, z)| (i, x.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / (nx * norm(z))))
        .collect();
    sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut w = vec![0.0; x.len()];
    for &(i, cos) in &sims[..k] {
        let z = &bank[i];
        let denom = cos.abs() * nx * norm(z);
        for dd in 0..x.len() {
            w[dd] += x[dd] * z[dd] / denom / k as f64;
        }
    }
    w
}

pub fn random_image(cfg: &ViTConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.image_size;
    Tensor::new(
        vec![cfg.in_chans, s, s],
        (0..cfg.in_chans * s * s).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

/// Random small config: depth ≤ 4, dim ≤ 32, heads ∈ {1, 2, 4}, ≤ 16 patches.
pub fn random_config(seed: u64, num_classes: usize) -> ViTConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = [1, 2, 4][rng.random_range(0..3)];
    let head_dim = rng.random_range(1..=32 / heads);
    let patch_size = rng.random_range(1..=3);
    let grid = rng.random_range(1..=4);
    ViTConfig {
        image_size: grid * patch_size,
        patch_size,
        dim: heads * head_dim,
        depth: rng.random_range(1..=4),
        heads,
        mlp_ratio: [1.0, 2.0, 4.0][rng.random_range(0..3)],
        eps: 1e-6,
        num_classes,
        in_chans: 3,
        final_norm: rng.random_bool(0.8),
    }
}

/// Largest absolute difference divided by the largest magnitude present.
pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a.iter().chain(b).fold(f64::MIN_POSITIVE, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}
