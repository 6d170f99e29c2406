//! Cosine-similarity KNN over stored feature vectors.

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_norm, Tensor};

/// Labelled feature vectors queried by cosine similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    features: Tensor,
    labels: Vec<i64>,
    norms: Vec<f64>,
}

/// Outcome of a KNN query.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnPrediction {
    pub label: i64,
    /// Bank rows, most similar first.
    pub neighbors: Vec<usize>,
    /// Matching cosine similarities, non-increasing.
    pub similarities: Vec<f64>,
}

pub fn cosine_similarity(x: &[f64], z: &[f64]) -> Result<f64> {
    if x.len() != z.len() {
        return Err(Error::Shape {
            op: "cosine_similarity",
            expected: vec![x.len()],
            actual: vec![z.len()],
        });
    }
    let (nx, nz) = (l2_norm(x), l2_norm(z));
    if nx == 0.0 || nz == 0.0 {
        return Err(Error::ZeroNorm("cosine_similarity".into()));
    }
    Ok((dot(x, z) / (nx * nz)).clamp(-1.0, 1.0))
}

impl MemoryBank {
    pub fn new(features: Tensor, labels: Vec<i64>) -> Result<Self> {
        let (rows, _) = features.dims2()?;
        if labels.len() != rows {
            return Err(Error::InvalidArgument(format!(
                "bank has {rows} features but {} labels",
                labels.len()
            )));
        }
        let norms: Vec<f64> = (0..rows).map(|i| l2_norm(features.row(i))).collect();
        if let Some(i) = norms.iter().position(|&n| n == 0.0) {
            return Err(Error::ZeroNorm(format!("memory bank row {i}")));
        }
        Ok(Self {
            features,
            labels,
            norms,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.last_dim()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    /// The `k` most similar rows, ties broken towards the lower index.
    pub fn nearest(&self, x: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        if self.is_empty() {
            return Err(Error::InvalidArgument("memory bank is empty".into()));
        }
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if k > self.len() {
            return Err(Error::InvalidArgument(format!(
                "k = {k} exceeds bank size {}",
                self.len()
            )));
        }
        if x.len() != self.dim() {
            return Err(Error::Shape {
                op: "MemoryBank::nearest",
                expected: vec![self.dim()],
                actual: vec![x.len()],
            });
        }
        let nx = l2_norm(x);
        if nx == 0.0 {
            return Err(Error::ZeroNorm("KNN query".into()));
        }
        let mut sims: Vec<(usize, f64)> = (0..self.len())
            .map(|i| {
                let c = dot(x, self.features.row(i)) / (nx * self.norms[i]);
                (i, c.clamp(-1.0, 1.0))
            })
            .collect();
        sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        sims.truncate(k);
        Ok(sims)
    }

    /// Majority vote among the `k` nearest; a tied vote goes to the label
    /// whose best neighbour ranks highest.
    pub fn knn_predict(&self, x: &[f64], k: usize) -> Result<KnnPrediction> {
        let nn = self.nearest(x, k)?;
        // (label, votes, rank of first occurrence)
        let mut tally: Vec<(i64, usize, usize)> = Vec::new();
        for (rank, &(i, _)) in nn.iter().enumerate() {
            let label = self.labels[i];
            match tally.iter_mut().find(|t| t.0 == label) {
                Some(t) => t.1 += 1,
                None => tally.push((label, 1, rank)),
            }
        }
        let label = tally
            .iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.2.cmp(&a.2)))
            .map(|t| t.0)
            .expect("k >= 1");
        Ok(KnnPrediction {
            label,
            neighbors: nn.iter().map(|p| p.0).collect(),
            similarities: nn.iter().map(|p| p.1).collect(),
        })
    }
}
