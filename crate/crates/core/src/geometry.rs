//! Exact neighbourhood analytics: nearest neighbours by dot product, the
//! histogram locality score, and outlier ranking by mean Euclidean distance.

use std::collections::BTreeMap;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::directions::{by_score_desc, projection_scores, top_indices, ActivationResult, Direction};
use crate::error::{Error, Result};
use crate::rng;
use crate::stats::{self, Alternative};
use crate::store::EmbeddingStore;

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0, |acc, (&x, &y)| acc + f64::from(x) * f64::from(y))
}

fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0, |acc, (&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            acc + d * d
        })
        .sqrt()
}

fn neighbors_of(store: &EmbeddingStore, s: usize, k: usize) -> Vec<usize> {
    let query = store.row(s);
    let mut scored: Vec<(usize, f64)> = (0..store.len())
        .filter(|&j| j != s)
        .map(|j| (j, dot(query, store.row(j))))
        .collect();
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, |a, b| by_score_desc(*a, *b));
        scored.truncate(k);
    }
    scored.sort_unstable_by(|a, b| by_score_desc(*a, *b));
    scored.into_iter().map(|(j, _)| j).collect()
}

fn check_knn(store: &EmbeddingStore, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if k >= store.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must be smaller than the store size {}",
            store.len()
        )));
    }
    Ok(())
}

/// The `k` sentences (excluding `sentence` itself) with the largest dot
/// product with `sentence`, ties broken by ascending id.
pub fn nearest_neighbors(store: &EmbeddingStore, sentence: usize, k: usize) -> Result<Vec<usize>> {
    if sentence >= store.len() {
        return Err(Error::OutOfRange {
            index: sentence,
            len: store.len(),
        });
    }
    check_knn(store, k)?;
    Ok(neighbors_of(store, sentence, k))
}

/// [`nearest_neighbors`] for every sentence, computed in parallel.
pub fn all_nearest_neighbors(store: &EmbeddingStore, k: usize) -> Result<Vec<Vec<usize>>> {
    check_knn(store, k)?;
    Ok((0..store.len())
        .into_par_iter()
        .map(|s| neighbors_of(store, s, k))
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistanceSets {
    pub nearest: Vec<f64>,
    pub top: Vec<f64>,
    pub random: Vec<f64>,
}

fn direction_label(v: &Direction) -> u64 {
    v.vector()
        .iter()
        .fold(rng::label(&v.kind.to_string()), |h, x| {
            rng::derive(h, &[x.to_bits()])
        })
}

/// Dot-product distance sets for the top `k` sentences of `v`:
///
/// - `nearest`: each top sentence against each of its `k` nearest neighbours;
/// - `top`: every unordered pair of top sentences;
/// - `random`: each top sentence against `k` distinct sentences drawn
///   uniformly from the rest of the store, keyed by `(seed, v, sentence)`.
pub fn distance_sets(
    store: &EmbeddingStore,
    v: &Direction,
    k: usize,
    seed: u64,
) -> Result<DistanceSets> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if store.len() <= 2 * k {
        return Err(Error::DatasetTooSmall {
            needed: 2 * k,
            actual: store.len(),
        });
    }
    let scores = projection_scores(store, v)?;
    let top = top_indices(&scores, k);
    let dir_label = direction_label(v);

    let per_sentence: Vec<(Vec<f64>, Vec<f64>)> = top
        .par_iter()
        .map(|&s| {
            let row = store.row(s);
            let nearest = neighbors_of(store, s, k)
                .into_iter()
                .map(|j| dot(row, store.row(j)))
                .collect();
            let mut r = rng::keyed(seed, &[dir_label, store.record(s).id]);
            let random = index::sample(&mut r, store.len() - 1, k)
                .into_iter()
                .map(|j| if j >= s { j + 1 } else { j })
                .map(|j| dot(row, store.row(j)))
                .collect();
            (nearest, random)
        })
        .collect();

    let mut sets = DistanceSets::default();
    for (nearest, random) in per_sentence {
        sets.nearest.extend(nearest);
        sets.random.extend(random);
    }
    for (a, &i) in top.iter().enumerate() {
        for &j in &top[a + 1..] {
            sets.top.push(dot(store.row(i), store.row(j)));
        }
    }
    Ok(sets)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceHistogram {
    pub lo: f64,
    pub hi: f64,
    pub bins: Vec<u64>,
    pub total: u64,
}

impl DistanceHistogram {
    pub fn same_binning(&self, other: &Self) -> bool {
        self.lo == other.lo && self.hi == other.hi && self.bins.len() == other.bins.len()
    }

    /// Left edge of bin `i`.
    pub fn edge(&self, i: usize) -> f64 {
        self.lo + (self.hi - self.lo) * i as f64 / self.bins.len() as f64
    }
}

/// Bins `values` into `bins` equal-width bins over `[lo, hi]`; bins are
/// lower-inclusive and values outside the range are clamped into the end
/// bins.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<DistanceHistogram> {
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "histogram range [{lo}, {hi}] is empty or non-finite"
        )));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    let mut counts = vec![0u64; bins];
    let width = hi - lo;
    for &x in values {
        let pos = (bins as f64 * (x - lo) / width).floor();
        // `as` saturates negatives (and NaN) to 0.
        let b = (pos as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(DistanceHistogram {
        lo,
        hi,
        bins: counts,
        total: values.len() as u64,
    })
}

/// Histogram intersection over union: `sum(min) / sum(max)`.
pub fn jaccard(h1: &DistanceHistogram, h2: &DistanceHistogram) -> Result<f64> {
    if !h1.same_binning(h2) {
        return Err(Error::BinMismatch);
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (&a, &b) in h1.bins.iter().zip(&h2.bins) {
        inter += a.min(b);
        union += a.max(b);
    }
    if union == 0 {
        return Err(Error::EmptyHistograms);
    }
    Ok(inter as f64 / union as f64)
}

/// [`jaccard`] of the two histograms after scaling each to unit mass, so
/// that sets of different sizes (`k^2` neighbour distances against
/// `k(k-1)/2` pairwise ones) can still reach 1.
pub fn jaccard_density(h1: &DistanceHistogram, h2: &DistanceHistogram) -> Result<f64> {
    if !h1.same_binning(h2) {
        return Err(Error::BinMismatch);
    }
    if h1.total == 0 || h2.total == 0 {
        return Err(Error::EmptyHistograms);
    }
    let (t1, t2) = (h1.total as f64, h2.total as f64);
    let (mut inter, mut union) = (0.0, 0.0);
    for (&a, &b) in h1.bins.iter().zip(&h2.bins) {
        let (a, b) = (a as f64 / t1, b as f64 / t2);
        inter += a.min(b);
        union += a.max(b);
    }
    Ok(inter / union)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LocalityReport {
    pub direction: Direction,
    pub dataset: String,
    pub k: usize,
    pub h_nearest: DistanceHistogram,
    pub h_top: DistanceHistogram,
    pub h_random: DistanceHistogram,
    /// `jaccard_density(h_nearest, h_top)`.
    #[serde(rename = "L")]
    pub locality: f64,
    /// `jaccard_density(h_random, h_top)`, the baseline the locality score
    /// is read against.
    pub random_top_jaccard: f64,
}

/// Shared `[lo, hi]` over all values; a degenerate range is widened by 0.5
/// on each side so that every value still has a bin.
fn shared_range<'a>(sets: impl IntoIterator<Item = &'a [f64]>) -> (f64, f64) {
    let (lo, hi) = sets
        .into_iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

pub fn locality_score(
    store: &EmbeddingStore,
    v: &Direction,
    k: usize,
    bins: usize,
    seed: u64,
) -> Result<LocalityReport> {
    let sets = distance_sets(store, v, k, seed)?;
    let (lo, hi) = shared_range([&sets.nearest[..], &sets.top[..], &sets.random[..]]);
    let h_nearest = histogram(&sets.nearest, lo, hi, bins)?;
    let h_top = histogram(&sets.top, lo, hi, bins)?;
    let h_random = histogram(&sets.random, lo, hi, bins)?;
    let locality = jaccard_density(&h_nearest, &h_top)?;
    let random_top_jaccard = jaccard_density(&h_random, &h_top)?;
    Ok(LocalityReport {
        direction: v.clone(),
        dataset: store.dataset_label(),
        k,
        h_nearest,
        h_top,
        h_random,
        locality,
        random_top_jaccard,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalityComparison {
    pub meaningful_mean: f64,
    pub meaningless_mean: f64,
    pub meaningful_count: usize,
    pub meaningless_count: usize,
    pub u: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// One-sided Mann-Whitney test that meaningful directions have higher
/// locality than meaningless ones.
pub fn locality_compare(meaningful: &[f64], meaningless: &[f64]) -> Result<LocalityComparison> {
    if meaningful.is_empty() || meaningless.is_empty() {
        return Err(Error::InvalidArgument(
            "both locality groups must be non-empty".into(),
        ));
    }
    let test = stats::mann_whitney(meaningful, meaningless, Alternative::Greater)?;
    Ok(LocalityComparison {
        meaningful_mean: stats::mean(meaningful),
        meaningless_mean: stats::mean(meaningless),
        meaningful_count: meaningful.len(),
        meaningless_count: meaningless.len(),
        u: test.u,
        p_value: test.p_value,
        exact: test.exact,
    })
}

/// Mean Euclidean distance from each row to every other row.
pub fn mean_distances(store: &EmbeddingStore) -> Result<Vec<f64>> {
    let n = store.len();
    if n < 2 {
        return Err(Error::DatasetTooSmall {
            needed: 1,
            actual: n,
        });
    }
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let row = store.row(i);
            let total = (0..n)
                .filter(|&j| j != i)
                .fold(0.0, |acc, j| acc + euclidean(row, store.row(j)));
            total / (n - 1) as f64
        })
        .collect())
}

/// Row indices sorted by descending mean pairwise Euclidean distance, ties
/// by ascending index.
pub fn outlier_ranking(store: &EmbeddingStore) -> Result<Vec<usize>> {
    Ok(rank_by_mean_distance(&mean_distances(store)?))
}

/// The ordering of [`outlier_ranking`] for precomputed mean distances.
pub fn rank_by_mean_distance(means: &[f64]) -> Vec<usize> {
    let mut order: Vec<(usize, f64)> = means.iter().copied().enumerate().collect();
    order.sort_by(|a, b| by_score_desc(*a, *b));
    order.into_iter().map(|(i, _)| i).collect()
}

/// Number of results whose entries contain each sentence id. Sentences that
/// never appear are absent from the map.
pub fn membership_counts(results: &[ActivationResult]) -> BTreeMap<u64, usize> {
    let mut counts = BTreeMap::new();
    for r in results {
        let mut ids = r.ids();
        ids.sort_unstable();
        ids.dedup();
        for id in ids {
            *counts.entry(id).or_insert(0) += 1;
        }
    }
    counts
}

/// Share of all top-activation memberships that fall on the `fraction` most
/// distant sentences of `ranking` (whose entries are the ids used in
/// `counts`).
pub fn outlier_share(ranking: &[u64], counts: &BTreeMap<u64, usize>, fraction: f64) -> f64 {
    let total: usize = counts.values().sum();
    if total == 0 {
        return 0.0;
    }
    let cut = trim_count(ranking.len(), fraction);
    let head: usize = ranking[..cut]
        .iter()
        .map(|id| counts.get(id).copied().unwrap_or(0))
        .sum();
    head as f64 / total as f64
}

/// Rows removed when trimming `fraction` of `n`: `ceil(fraction * n)`.
pub fn trim_count(n: usize, fraction: f64) -> usize {
    // The epsilon keeps products like 0.10 * 100 from rounding up to 11.
    (((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Drops the `ceil(fraction * n)` most distant rows. Remaining rows are
/// re-densified; their original ids stay in the metadata.
pub fn trim_outliers(store: &EmbeddingStore, fraction: f64) -> Result<EmbeddingStore> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "trim fraction {fraction} must lie strictly between 0 and 1"
        )));
    }
    trim_ranked(store, &outlier_ranking(store)?, fraction)
}

/// [`trim_outliers`] with a ranking computed beforehand.
pub fn trim_ranked(store: &EmbeddingStore, ranking: &[usize], fraction: f64) -> Result<EmbeddingStore> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "trim fraction {fraction} must lie strictly between 0 and 1"
        )));
    }
    if ranking.len() != store.len() {
        return Err(Error::InvalidArgument(format!(
            "ranking has {} entries for a store of {} rows",
            ranking.len(),
            store.len()
        )));
    }
    let cut = trim_count(store.len(), fraction);
    let mut keep: Vec<usize> = ranking[cut..].to_vec();
    keep.sort_unstable();
    store.subset(&keep)
}
