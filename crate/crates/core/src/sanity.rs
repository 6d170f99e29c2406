//! Cascading randomization of attention weights and rank agreement between maps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::daam::AttentionMap;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::vit::WeightSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandomizationPlan {
    /// Blocks `from_block..=B` (1-based) are randomized.
    pub from_block: usize,
    pub seed: u64,
}

fn population_std(t: &Tensor) -> f64 {
    let n = t.numel() as f64;
    let mean = t.sum() / n;
    (t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

fn redraw(t: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let std = population_std(t);
    let dist = Normal::new(0.0, std)
        .map_err(|e| Error::InvalidArgument(format!("bad randomization scale {std}: {e}")))?;
    Tensor::new(t.shape().to_vec(), (0..t.numel()).map(|_| dist.sample(rng)).collect())
}

/// Copy of `weights` with the qkv and output-projection matrices of every
/// block from `plan.from_block` upward re-drawn from `N(0, σ²)`, σ being the
/// original tensor's standard deviation. Biases and everything else are kept.
pub fn randomize_cascading(weights: &WeightSet, plan: RandomizationPlan) -> Result<WeightSet> {
    let depth = weights.blocks.len();
    if plan.from_block == 0 || plan.from_block > depth {
        return Err(Error::BlockOutOfRange {
            block: plan.from_block,
            depth,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut out = weights.clone();
    for bw in &mut out.blocks[plan.from_block - 1..] {
        bw.qkv.weight = redraw(&bw.qkv.weight, &mut rng)?;
        bw.proj.weight = redraw(&bw.proj.weight, &mut rng)?;
    }
    Ok(out)
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation: Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "spearman",
            expected: vec![a.len()],
            actual: vec![b.len()],
        });
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if !(va > 0.0 && vb > 0.0) {
        return Err(Error::Degenerate("constant map has no rank order".into()));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Rank agreement between two maps of the same shape.
pub fn sanity_score(original: &AttentionMap, randomized: &AttentionMap) -> Result<f64> {
    if original.grid.shape() != randomized.grid.shape() {
        return Err(Error::Shape {
            op: "sanity_score",
            expected: original.grid.shape().to_vec(),
            actual: randomized.grid.shape().to_vec(),
        });
    }
    spearman(original.grid.data(), randomized.grid.data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::daam::Target;
    use crate::vit::ViTConfig;
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            dim: 8,
            depth: 3,
            heads: 2,
            mlp_ratio: 2.0,
            eps: 1e-6,
            num_classes: 3,
            in_chans: 3,
            final_norm: true,
        }
    }

    fn grid(v: Vec<f64>) -> AttentionMap {
        AttentionMap {
            grid: Tensor::new(vec![1, v.len()], v).unwrap(),
            block: 1,
            target: Target::Class(0),
        }
    }

    #[test]
    fn plan_bounds() {
        let w = WeightSet::random(&cfg(), 1).unwrap();
        for from_block in [0, 4] {
            assert!(matches!(
                randomize_cascading(&w, RandomizationPlan { from_block, seed: 0 }),
                Err(Error::BlockOutOfRange { .. })
            ));
        }
    }

    #[test]
    fn seeded_and_scoped() {
        let w = WeightSet::random(&cfg(), 1).unwrap();
        let plan = RandomizationPlan { from_block: 2, seed: 9 };
        let a = randomize_cascading(&w, plan).unwrap();
        let b = randomize_cascading(&w, plan).unwrap();
        assert_eq!(a.to_tensor_map(), b.to_tensor_map());
        let orig = w.to_tensor_map();
        for (name, t) in a.to_tensor_map() {
            let changed = orig[&name] != t;
            let expect = (name.starts_with("blocks.1.") || name.starts_with("blocks.2."))
                && (name.ends_with("qkv.weight") || name.ends_with("proj.weight"));
            assert_eq!(changed, expect, "{name}");
        }
        let c = randomize_cascading(&w, RandomizationPlan { from_block: 2, seed: 10 }).unwrap();
        assert_ne!(a.to_tensor_map(), c.to_tensor_map());
    }

    #[test]
    fn from_first_block_changes_every_attention_matrix() {
        let w = WeightSet::random(&cfg(), 2).unwrap();
        let r = randomize_cascading(&w, RandomizationPlan { from_block: 1, seed: 3 }).unwrap();
        for (a, b) in w.blocks.iter().zip(&r.blocks) {
            assert_ne!(a.qkv.weight, b.qkv.weight);
            assert_ne!(a.proj.weight, b.proj.weight);
            assert_eq!(a.qkv.bias, b.qkv.bias);
            let ratio = population_std(&b.qkv.weight) / population_std(&a.qkv.weight);
            assert!((0.8..1.25).contains(&ratio), "{ratio}");
        }
    }

    #[test]
    fn spearman_examples() {
        let a = grid(vec![0.1, 0.5, 0.3, 0.9]);
        assert_eq!(sanity_score(&a, &a).unwrap(), 1.0);
        let rev = grid(vec![0.9, 0.1, 0.5, -2.0]);
        assert!((sanity_score(&a, &rev).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(
            sanity_score(&a, &grid(vec![1.0; 4])),
            Err(Error::Degenerate(_))
        ));
        assert!(sanity_score(&a, &grid(vec![1.0, 2.0])).is_err());
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn independent_maps_are_uncorrelated() {
        let mut hits = 0;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..196).map(|_| rng.random()).collect();
            let b: Vec<f64> = (0..196).map(|_| rng.random()).collect();
            if spearman(&a, &b).unwrap().abs() < 0.2 {
                hits += 1;
            }
        }
        assert!(hits >= 95, "{hits}");
    }

    proptest! {
        #[test]
        fn spearman_is_monotone_invariant(v in prop::collection::vec(-10.0f64..10.0, 3..30)) {
            prop_assume!(v.iter().any(|x| *x != v[0]));
            let cubed: Vec<f64> = v.iter().map(|x| x * x * x + 2.0 * x).collect();
            let r = spearman(&v, &cubed).unwrap();
            prop_assert!((r - 1.0).abs() < 1e-12);
            let other: Vec<f64> = v.iter().rev().cloned().collect();
            let s = spearman(&v, &other).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
