//! Dataset idiosyncrasy: a one-vs-rest linear SVM that tells datasets apart
//! from their embeddings, its confusion matrix, and a PCA projection to two
//! dimensions for plotting.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::store::EmbeddingStore;

pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

/// Stratified train/test split. Each dataset contributes
/// `round(test_fraction * size)` test rows, clamped so both sides are
/// non-empty.
pub fn split(
    store: &EmbeddingStore,
    test_fraction: f64,
    seed: u64,
) -> Result<(EmbeddingStore, EmbeddingStore)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction {test_fraction} must lie strictly between 0 and 1"
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for tag in store.datasets() {
        let mut rows: Vec<usize> = (0..store.len())
            .filter(|&i| store.record(i).dataset == tag)
            .collect();
        if rows.len() < 2 {
            return Err(Error::DatasetTooSmall {
                needed: 1,
                actual: rows.len(),
            });
        }
        let mut r = rng::keyed(seed, &[rng::label("split"), rng::label(&tag)]);
        rows.shuffle(&mut r);
        let n_test = ((test_fraction * rows.len() as f64).round() as usize).clamp(1, rows.len() - 1);
        test.extend_from_slice(&rows[..n_test]);
        train.extend_from_slice(&rows[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((store.subset(&train)?, store.subset(&test)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Step size at step `t` is `learning_rate / sqrt(t)`.
    pub learning_rate: f64,
    /// L2 regularization strength.
    pub lambda: f64,
    pub seed: u64,
    /// Standardize features with training-set mean and standard deviation.
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 0.01,
            lambda: 1e-4,
            seed: 0,
            standardize: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub classes: Vec<String>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub config: TrainConfig,
    pub standardization: Option<Standardization>,
}

impl LinearModel {
    fn features(&self, row: &[f32]) -> Vec<f64> {
        match &self.standardization {
            None => row.iter().map(|&x| f64::from(x)).collect(),
            Some(s) => row
                .iter()
                .zip(s.mean.iter().zip(&s.scale))
                .map(|(&x, (m, sd))| (f64::from(x) - m) / sd)
                .collect(),
        }
    }

    pub fn decision(&self, row: &[f32]) -> Vec<f64> {
        let x = self.features(row);
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| dot(w, &x) + b)
            .collect()
    }

    /// Index of the class with the largest decision value (lowest index on ties).
    pub fn predict_index(&self, row: &[f32]) -> usize {
        let scores = self.decision(row);
        let mut best = 0;
        for (c, &s) in scores.iter().enumerate().skip(1) {
            if s > scores[best] {
                best = c;
            }
        }
        best
    }

    pub fn predict(&self, row: &[f32]) -> &str {
        &self.classes[self.predict_index(row)]
    }

    pub fn accuracy(&self, store: &EmbeddingStore) -> f64 {
        if store.is_empty() {
            return 0.0;
        }
        let correct = (0..store.len())
            .filter(|&i| self.predict(store.row(i)) == store.record(i).dataset)
            .count();
        correct as f64 / store.len() as f64
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn standardization(store: &EmbeddingStore) -> Standardization {
    let n = store.len() as f64;
    let d = store.dim();
    let mut mean = vec![0.0; d];
    for row in store.rows() {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += f64::from(x);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for row in store.rows() {
        for ((v, &x), m) in var.iter_mut().zip(row).zip(&mean) {
            let c = f64::from(x) - m;
            *v += c * c;
        }
    }
    let scale = var
        .into_iter()
        .map(|v| {
            let sd = (v / n).sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    Standardization { mean, scale }
}

/// One-vs-rest linear SVM trained by stochastic subgradient descent on the
/// L2-regularized hinge loss. Classes are the sorted dataset tags. Every
/// class model sees the same seeded sample order, one pass per epoch.
pub fn train_classifier(train: &EmbeddingStore, config: &TrainConfig) -> Result<LinearModel> {
    let mut classes = train.datasets();
    classes.sort();
    if classes.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "classifier needs at least two datasets, found {}",
            classes.len()
        )));
    }
    if config.epochs == 0 || !(config.learning_rate > 0.0) || config.lambda < 0.0 {
        return Err(Error::InvalidArgument("invalid training configuration".into()));
    }
    let d = train.dim();
    let labels: Vec<usize> = train
        .records()
        .iter()
        .map(|r| classes.iter().position(|c| c == &r.dataset).expect("tag is a class"))
        .collect();

    let mut model = LinearModel {
        classes,
        weights: Vec::new(),
        biases: Vec::new(),
        config: *config,
        standardization: config.standardize.then(|| standardization(train)),
    };
    let features: Vec<Vec<f64>> = train.rows().map(|r| model.features(r)).collect();

    let n_classes = model.classes.len();
    let mut weights = vec![vec![0.0; d]; n_classes];
    let mut biases = vec![0.0; n_classes];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let mut r = rng::keyed(config.seed, &[rng::label("svm-epoch"), epoch as u64]);
        order.shuffle(&mut r);
        for &i in &order {
            step += 1;
            let eta = config.learning_rate / (step as f64).sqrt();
            let shrink = 1.0 - eta * config.lambda;
            let x = &features[i];
            for c in 0..n_classes {
                let y = if labels[i] == c { 1.0 } else { -1.0 };
                let w = &mut weights[c];
                let margin = y * (dot(w, x) + biases[c]);
                w.iter_mut().for_each(|wj| *wj *= shrink);
                if margin < 1.0 {
                    for (wj, xj) in w.iter_mut().zip(x) {
                        *wj += eta * y * xj;
                    }
                    biases[c] += eta * y;
                }
            }
        }
    }
    model.weights = weights;
    model.biases = biases;
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    /// `counts[true][predicted]`
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.labels.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Rows are true datasets, columns are predictions.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            out.push_str(l);
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion(model: &LinearModel, test: &EmbeddingStore) -> Result<ConfusionMatrix> {
    let k = model.classes.len();
    let mut counts = vec![vec![0u64; k]; k];
    for i in 0..test.len() {
        let tag = &test.record(i).dataset;
        let truth = model
            .classes
            .iter()
            .position(|c| c == tag)
            .ok_or_else(|| Error::UnknownDataset(tag.clone()))?;
        counts[truth][model.predict_index(test.row(i))] += 1;
    }
    Ok(ConfusionMatrix {
        labels: model.classes.clone(),
        counts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub points: Vec<[f64; 2]>,
    /// Variance along each axis.
    pub variance: [f64; 2],
    /// Set when the centred data has rank below two; the second axis (and
    /// the first, for constant data) is then all zeros.
    pub degenerate: bool,
}

impl Projection {
    /// `id,dataset,x,y` with ids taken from the store's originating ids.
    pub fn to_csv(&self, store: &EmbeddingStore) -> String {
        let mut out = String::from("id,dataset,x,y\n");
        for (r, p) in store.records().iter().zip(&self.points) {
            out.push_str(&format!("{},{},{},{}\n", r.origin_id(), r.dataset, p[0], p[1]));
        }
        out
    }
}

const PCA_BLOCK: usize = 6;
const PCA_MAX_ITERS: usize = 100;
const PCA_CHUNK: usize = 1024;

/// `Y = (X - mean) Q` for a `dim x p` basis `Q`.
fn project_rows(store: &EmbeddingStore, mean: &[f64], q: &DMatrix<f64>) -> DMatrix<f64> {
    let p = q.ncols();
    let rows: Vec<Vec<f64>> = store
        .rows()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|row| {
            (0..p)
                .map(|j| {
                    row.iter()
                        .zip(mean)
                        .enumerate()
                        .map(|(i, (&x, m))| (f64::from(x) - m) * q[(i, j)])
                        .sum()
                })
                .collect()
        })
        .collect();
    DMatrix::from_fn(store.len(), p, |i, j| rows[i][j])
}

/// `(X - mean)^T Y`, summed over fixed row chunks so the result does not
/// depend on the thread count.
fn back_project(store: &EmbeddingStore, mean: &[f64], y: &DMatrix<f64>) -> DMatrix<f64> {
    let d = store.dim();
    let p = y.ncols();
    let partials: Vec<DMatrix<f64>> = (0..store.len())
        .step_by(PCA_CHUNK)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&start| {
            let mut acc = DMatrix::zeros(d, p);
            for i in start..(start + PCA_CHUNK).min(store.len()) {
                for (c, (&x, m)) in store.row(i).iter().zip(mean).enumerate() {
                    let xc = f64::from(x) - m;
                    for j in 0..p {
                        acc[(c, j)] += xc * y[(i, j)];
                    }
                }
            }
            acc
        })
        .collect();
    partials
        .into_iter()
        .fold(DMatrix::zeros(d, p), |acc, m| acc + m)
}

/// Top two principal components by block subspace iteration. Signs are
/// fixed so that each axis's largest-magnitude loading is positive.
pub fn project_2d(store: &EmbeddingStore, seed: u64) -> Result<Projection> {
    let n = store.len();
    if n < 3 {
        return Err(Error::DatasetTooSmall {
            needed: 2,
            actual: n,
        });
    }
    let d = store.dim();
    let mut mean = vec![0.0; d];
    for row in store.rows() {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += f64::from(x);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let p = PCA_BLOCK.min(d);
    let mut r = rng::keyed(seed, &[rng::label("pca")]);
    let start = DMatrix::from_fn(d, p, |_, _| StandardNormal.sample(&mut r));
    let mut q = start.qr().q();
    let mut previous: Option<Vec<f64>> = None;
    for _ in 0..PCA_MAX_ITERS {
        let z = back_project(store, &mean, &project_rows(store, &mean, &q));
        let norms: Vec<f64> = z.column_iter().map(|c| c.norm()).collect();
        q = z.qr().q();
        if let Some(prev) = &previous {
            let scale = norms.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
            if norms.iter().zip(prev).all(|(a, b)| (a - b).abs() <= 1e-12 * scale) {
                break;
            }
        }
        previous = Some(norms);
    }

    // Rayleigh-Ritz on the converged subspace.
    let y = project_rows(store, &mean, &q);
    let small = (y.transpose() * &y) / (n - 1) as f64;
    let eig = SymmetricEigen::new(small);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let top = eig.eigenvalues[order[0]].max(0.0);
    let mut axes = Vec::with_capacity(2);
    let mut variance = [0.0; 2];
    let mut degenerate = false;
    for (slot, &idx) in order.iter().take(2).enumerate() {
        let lambda = eig.eigenvalues[idx].max(0.0);
        if lambda <= 1e-10 * top || lambda == 0.0 {
            degenerate = true;
            axes.push(None);
            continue;
        }
        variance[slot] = lambda;
        let mut axis: Vec<f64> = (&q * eig.eigenvectors.column(idx)).iter().copied().collect();
        let lead = axis
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if v.abs() > axis[best].abs() { i } else { best });
        if axis[lead] < 0.0 {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
        axes.push(Some(axis));
    }
    if degenerate {
        tracing::warn!("projection is degenerate: centred data has rank below two");
    }
    if p < 2 {
        degenerate = true;
        axes.push(None);
    }

    let points = store
        .rows()
        .map(|row| {
            let mut pt = [0.0; 2];
            for (slot, axis) in axes.iter().enumerate() {
                if let Some(axis) = axis {
                    pt[slot] = row
                        .iter()
                        .zip(&mean)
                        .zip(axis)
                        .map(|((&x, m), a)| (f64::from(x) - m) * a)
                        .sum();
                }
            }
            pt
        })
        .collect();
    Ok(Projection {
        points,
        variance,
        degenerate,
    })
}
