//! Directions in embedding space and their top activating sentences.

use std::cmp::Ordering;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::store::EmbeddingStore;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DirectionKind {
    Neuron { index: usize },
    Random { seed: u64 },
    Custom { label: String },
}

impl std::fmt::Display for DirectionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DirectionKind::Neuron { index } => write!(f, "neuron-{index}"),
            DirectionKind::Random { seed } => write!(f, "random-{seed}"),
            DirectionKind::Custom { label } => write!(f, "custom-{label}"),
        }
    }
}

/// A vector in embedding space. Serializes as its kind only; the vector is
/// rebuilt from the kind (neurons, random seeds) or stored separately.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Direction {
    #[serde(flatten)]
    pub kind: DirectionKind,
    #[serde(skip)]
    vector: Vec<f64>,
}

impl Direction {
    /// One-hot direction for neuron `index`.
    pub fn neuron(index: usize, dim: usize) -> Result<Self> {
        if index >= dim {
            return Err(Error::OutOfRange { index, len: dim });
        }
        let mut vector = vec![0.0; dim];
        vector[index] = 1.0;
        Ok(Direction {
            kind: DirectionKind::Neuron { index },
            vector,
        })
    }

    /// Uniformly distributed unit direction: `dim` standard normal draws,
    /// normalized. Deterministic in `seed`.
    pub fn random(seed: u64, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        let mut r = rng::keyed(seed, &[rng::label("random-direction"), dim as u64]);
        loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            // A zero draw has probability zero, but keep drawing rather than divide by it.
            if norm > 0.0 {
                return Ok(Direction {
                    kind: DirectionKind::Random { seed },
                    vector: v.into_iter().map(|x| x / norm).collect(),
                });
            }
        }
    }

    pub fn custom(label: impl Into<String>, vector: Vec<f64>) -> Result<Self> {
        if vector.is_empty() {
            return Err(Error::InvalidArgument("empty direction vector".into()));
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("direction has non-finite entries".into()));
        }
        Ok(Direction {
            kind: DirectionKind::Custom {
                label: label.into(),
            },
            vector,
        })
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Same kind, vector multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Direction {
            kind: self.kind.clone(),
            vector: self.vector.iter().map(|x| x * factor).collect(),
        }
    }

    pub fn dot_row(&self, row: &[f32]) -> f64 {
        row.iter()
            .zip(&self.vector)
            .fold(0.0, |acc, (&x, &v)| acc + f64::from(x) * v)
    }
}

/// Every neuron direction `0..dim`.
pub fn all_neurons(dim: usize) -> Vec<Direction> {
    (0..dim)
        .map(|i| Direction::neuron(i, dim).expect("index < dim"))
        .collect()
}

/// `count` random directions with seeds `base_seed, base_seed + 1, ...`.
pub fn random_directions(base_seed: u64, count: usize, dim: usize) -> Result<Vec<Direction>> {
    (0..count as u64)
        .map(|i| Direction::random(base_seed.wrapping_add(i), dim))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationEntry {
    pub id: u64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ActivationResult {
    pub direction: Direction,
    pub dataset: String,
    pub k: usize,
    pub entries: Vec<ActivationEntry>,
}

impl ActivationResult {
    pub fn ids(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.id).collect()
    }

    /// `[min, max]` of the entry scores, `None` when there are no entries.
    pub fn score_range(&self) -> Option<(f64, f64)> {
        self.entries.iter().fold(None, |acc, e| match acc {
            None => Some((e.score, e.score)),
            Some((lo, hi)) => Some((lo.min(e.score), hi.max(e.score))),
        })
    }

    /// Rewrites entry ids from store-local ids to the originating ids kept in
    /// the store's metadata.
    pub fn with_origin_ids(mut self, store: &EmbeddingStore) -> Self {
        for e in &mut self.entries {
            e.id = store.record(e.id as usize).origin_id();
        }
        self
    }
}

fn check_dim(store: &EmbeddingStore, v: &Direction) -> Result<()> {
    if store.dim() != v.dim() {
        return Err(Error::DimensionMismatch {
            expected: store.dim(),
            actual: v.dim(),
        });
    }
    Ok(())
}

/// `score[i] = <row i, v>` with `f64` accumulation.
pub fn projection_scores(store: &EmbeddingStore, v: &Direction) -> Result<Vec<f64>> {
    check_dim(store, v)?;
    Ok(store.rows().map(|row| v.dot_row(row)).collect())
}

/// Descending score, ascending index.
pub(crate) fn by_score_desc(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

/// Indices of the `k` largest scores, ordered by descending score with ties
/// broken by ascending index.
pub(crate) fn top_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
    let k = k.min(idx.len());
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |a, b| by_score_desc(*a, *b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|a, b| by_score_desc(*a, *b));
    idx.into_iter().map(|(i, _)| i).collect()
}

/// The `k` top activating sentences of `store` along `v`.
pub fn top_k(store: &EmbeddingStore, v: &Direction, k: usize) -> Result<ActivationResult> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let scores = projection_scores(store, v)?;
    let entries = top_indices(&scores, k)
        .into_iter()
        .map(|i| ActivationEntry {
            id: store.record(i).id,
            score: scores[i],
        })
        .collect();
    Ok(ActivationResult {
        direction: v.clone(),
        dataset: store.dataset_label(),
        k,
        entries,
    })
}

/// Whether the closed score ranges of two results for the same direction
/// intersect.
pub fn activation_range_overlap(a: &ActivationResult, b: &ActivationResult) -> Result<bool> {
    if a.direction != b.direction {
        return Err(Error::DirectionMismatch);
    }
    let (Some((alo, ahi)), Some((blo, bhi))) = (a.score_range(), b.score_range()) else {
        return Err(Error::InvalidArgument("activation result has no entries".into()));
    };
    Ok(alo <= bhi && blo <= ahi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapSummary {
    pub datasets: Vec<String>,
    pub directions: usize,
    pub k: usize,
    pub comparisons: usize,
    pub overlapping: usize,
    pub rate: f64,
}

/// Fraction of `(direction, dataset pair)` combinations whose top-`k`
/// activation ranges overlap. `stores` holds one store per dataset.
pub fn overlap_rate(
    stores: &[EmbeddingStore],
    directions: &[Direction],
    k: usize,
) -> Result<OverlapSummary> {
    if stores.len() < 2 {
        return Err(Error::InvalidArgument(
            "overlap needs at least two datasets".into(),
        ));
    }
    let per_direction: Vec<usize> = directions
        .par_iter()
        .map(|v| -> Result<usize> {
            let results = stores
                .iter()
                .map(|s| top_k(s, v, k))
                .collect::<Result<Vec<_>>>()?;
            let mut hits = 0;
            for i in 0..results.len() {
                for j in i + 1..results.len() {
                    if activation_range_overlap(&results[i], &results[j])? {
                        hits += 1;
                    }
                }
            }
            Ok(hits)
        })
        .collect::<Result<_>>()?;
    let pairs = stores.len() * (stores.len() - 1) / 2;
    let comparisons = pairs * directions.len();
    let overlapping: usize = per_direction.iter().sum();
    Ok(OverlapSummary {
        datasets: stores.iter().map(EmbeddingStore::dataset_label).collect(),
        directions: directions.len(),
        k,
        comparisons,
        overlapping,
        rate: if comparisons == 0 {
            0.0
        } else {
            overlapping as f64 / comparisons as f64
        },
    })
}
