//! Class-token decomposition and accumulated attention maps.
//!
//! For every block the class attention row splits `T_b = a⁰·V` into one
//! contribution per token (`S_b`). Channel importance `C_b = W·∂x/∂T_b`
//! weights those contributions; summing over channels and dropping the class
//! cell gives the block map `L_b`, and prefix sums over blocks give the flow.
//! Memory-bank models swap the classifier row `W^c` for a dimension-wise
//! weight derived from the nearest stored features.

use crate::error::{Error, Result};
use crate::memory_bank::MemoryBank;
use crate::numerics::{dot, l2_norm, Tensor};
use crate::vit::{ForwardTrace, JacobianMode, VisionTransformer};

/// What a map explains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Class(usize),
    Knn,
}

/// Per-token split of `T_b`: row `n` is token `n`'s share, `[(N+1)×D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialDecomposition {
    pub block: usize,
    pub s: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelImportance {
    pub block: usize,
    pub target: Target,
    /// `[D]`, before the ReLU.
    pub values: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// Patch grid, `[(H/P)×(W/P)]`.
    pub grid: Tensor,
    pub block: usize,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionFlow {
    /// `L_1..L_B`.
    pub per_block: Vec<AttentionMap>,
    /// `accumulated[k] = L_1 + … + L_{k+1}`.
    pub accumulated: Vec<AttentionMap>,
}

impl AttentionFlow {
    /// The map summed over every block.
    pub fn final_map(&self) -> &AttentionMap {
        self.accumulated.last().expect("flow is never empty")
    }

    /// Accumulated map up to and including block `b` (1-based).
    pub fn up_to(&self, b: usize) -> Result<&AttentionMap> {
        if b == 0 || b > self.accumulated.len() {
            return Err(Error::BlockOutOfRange {
                block: b,
                depth: self.accumulated.len(),
            });
        }
        Ok(&self.accumulated[b - 1])
    }

    pub fn depth(&self) -> usize {
        self.per_block.len()
    }
}

/// Map post-processing switches. Both on by default; turning them off exposes
/// the exact redistribution of `C·T_b` over tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapOptions {
    /// ReLU on the channel importance.
    pub relu: bool,
    /// Clamp negative map cells to zero.
    pub clamp: bool,
}

impl Default for MapOptions {
    fn default() -> Self {
        Self {
            relu: true,
            clamp: true,
        }
    }
}

impl MapOptions {
    pub fn raw() -> Self {
        Self {
            relu: false,
            clamp: false,
        }
    }
}

/// `S_b[n, h·hd + j] = a⁰_h[n] · V_h[n, j]`.
pub fn decompose(trace: &ForwardTrace, block: usize) -> Result<SpatialDecomposition> {
    let bt = trace.block(block)?;
    let (heads, tokens) = bt.class_attention.dims2()?;
    let hd = bt.values.last_dim();
    let d = heads * hd;
    let a = bt.class_attention.data();
    let v = bt.values.data();
    let mut s = vec![0.0; tokens * d];
    for h in 0..heads {
        for n in 0..tokens {
            let w = a[h * tokens + n];
            let src = &v[(h * tokens + n) * hd..(h * tokens + n + 1) * hd];
            let dst = &mut s[n * d + h * hd..n * d + (h + 1) * hd];
            for (o, x) in dst.iter_mut().zip(src) {
                *o = w * x;
            }
        }
    }
    Ok(SpatialDecomposition {
        block,
        s: Tensor::new(vec![tokens, d], s)?,
    })
}

/// Channel importance of every block for an arbitrary output direction
/// `weight` (a classifier row, or the memory-bank weight). One reverse sweep.
pub fn channel_importances(
    model: &VisionTransformer,
    trace: &ForwardTrace,
    weight: &[f64],
    target: Target,
    mode: JacobianMode,
) -> Result<Vec<ChannelImportance>> {
    let grads = model.vjp(trace, weight, mode)?;
    Ok(grads
        .into_iter()
        .enumerate()
        .map(|(i, values)| ChannelImportance {
            block: i + 1,
            target,
            values,
        })
        .collect())
}

fn head_row(model: &VisionTransformer, class: usize) -> Result<Vec<f64>> {
    let head = model.weights().head.as_ref().ok_or(Error::MissingHead)?;
    let num_classes = head.weight.rows();
    if class >= num_classes {
        return Err(Error::ClassOutOfRange { class, num_classes });
    }
    Ok(head.weight.row(class).to_vec())
}

/// `C_b^c = W^c · ∂x/∂T_b`; the head bias has no derivative and drops out.
pub fn channel_importance_fc(
    model: &VisionTransformer,
    trace: &ForwardTrace,
    class: usize,
    block: usize,
    mode: JacobianMode,
) -> Result<ChannelImportance> {
    trace.block(block)?;
    let w = head_row(model, class)?;
    let mut all = channel_importances(model, trace, &w, Target::Class(class), mode)?;
    Ok(all.swap_remove(block - 1))
}

/// Per-token scores `m[n] = Σ_d C'[d]·S[n,d]` for all `N+1` tokens, where
/// `C'` is `ReLU(C)` when `relu` is set.
pub fn token_scores(s: &SpatialDecomposition, c: &ChannelImportance, relu: bool) -> Result<Vec<f64>> {
    let (tokens, d) = s.s.dims2()?;
    if c.values.numel() != d {
        return Err(Error::Shape {
            op: "token_scores",
            expected: vec![d],
            actual: c.values.shape().to_vec(),
        });
    }
    let weights: Vec<f64> = if relu {
        c.values.data().iter().map(|&v| v.max(0.0)).collect()
    } else {
        c.values.data().to_vec()
    };
    Ok((0..tokens).map(|n| dot(s.s.row(n), &weights)).collect())
}

/// Block map `L_b`: token scores without the class cell, reshaped to the
/// patch grid.
pub fn block_attention_map(
    s: &SpatialDecomposition,
    c: &ChannelImportance,
    grid: usize,
    options: MapOptions,
) -> Result<AttentionMap> {
    let scores = token_scores(s, c, options.relu)?;
    if scores.len() != grid * grid + 1 {
        return Err(Error::Shape {
            op: "block_attention_map",
            expected: vec![grid * grid + 1],
            actual: vec![scores.len()],
        });
    }
    let cells = scores[1..]
        .iter()
        .map(|&v| if options.clamp { v.max(0.0) } else { v })
        .collect();
    Ok(AttentionMap {
        grid: Tensor::new(vec![grid, grid], cells)?,
        block: s.block,
        target: c.target,
    })
}

/// Running sums of block maps.
pub fn accumulate(maps: Vec<AttentionMap>) -> Result<AttentionFlow> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot accumulate an empty map list".into()))?;
    let shape = first.grid.shape().to_vec();
    let mut accumulated = Vec::with_capacity(maps.len());
    let mut running = Tensor::zeros(&shape);
    for m in &maps {
        if m.grid.shape() != shape.as_slice() {
            return Err(Error::Shape {
                op: "accumulate",
                expected: shape,
                actual: m.grid.shape().to_vec(),
            });
        }
        running.add_assign(&m.grid)?;
        accumulated.push(AttentionMap {
            grid: running.clone(),
            block: m.block,
            target: m.target,
        });
    }
    Ok(AttentionFlow {
        per_block: maps,
        accumulated,
    })
}

/// Flow for an arbitrary output direction.
pub fn daam_with_weight(
    model: &VisionTransformer,
    trace: &ForwardTrace,
    weight: &[f64],
    target: Target,
    mode: JacobianMode,
    options: MapOptions,
) -> Result<AttentionFlow> {
    let grid = model.config().grid();
    let importances = channel_importances(model, trace, weight, target, mode)?;
    let maps = importances
        .iter()
        .map(|c| block_attention_map(&decompose(trace, c.block)?, c, grid, options))
        .collect::<Result<Vec<_>>>()?;
    accumulate(maps)
}

/// Flow explaining classifier output `class`.
pub fn daam_fc(
    model: &VisionTransformer,
    trace: &ForwardTrace,
    class: usize,
    mode: JacobianMode,
    options: MapOptions,
) -> Result<AttentionFlow> {
    let w = head_row(model, class)?;
    daam_with_weight(model, trace, &w, Target::Class(class), mode, options)
}

/// Dimension-wise share of the similarity between `x` and its `k` nearest
/// bank features:
/// `w_d = (1/K) Σ_k x_d·z_kd / (|cos(x, z_k)|·‖x‖·‖z_k‖)`.
pub fn dimension_importance_weights(x: &[f64], bank: &MemoryBank, k: usize) -> Result<Tensor> {
    let nn = bank.nearest(x, k)?;
    let nx = l2_norm(x);
    let mut w = vec![0.0; x.len()];
    for &(i, cos) in &nn {
        let z = bank.feature(i);
        let denom = cos.abs() * nx * l2_norm(z);
        if denom == 0.0 {
            return Err(Error::Degenerate(format!(
                "bank row {i} is orthogonal to the query"
            )));
        }
        for (wd, (xd, zd)) in w.iter_mut().zip(x.iter().zip(z)) {
            *wd += xd * zd / denom;
        }
    }
    let kf = nn.len() as f64;
    Ok(Tensor::from_vec(w.into_iter().map(|v| v / kf).collect()))
}

/// Flow for a memory-bank model: `ReLU(w)` stands in for the classifier row
/// and then follows exactly the classifier path.
pub fn daam_knn(
    model: &VisionTransformer,
    trace: &ForwardTrace,
    bank: &MemoryBank,
    k: usize,
    mode: JacobianMode,
    options: MapOptions,
) -> Result<AttentionFlow> {
    let w = dimension_importance_weights(trace.class_token.data(), bank, k)?;
    let w: Vec<f64> = w.data().iter().map(|&v| v.max(0.0)).collect();
    daam_with_weight(model, trace, &w, Target::Knn, mode, options)
}
