// shared by the integration test binaries; not every binary uses every helper
#![allow(dead_code)]

use conceptscope_core::store::SentenceRecord;
use conceptscope_core::EmbeddingStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian_store(n: usize, dim: usize, seed: u64, tag: &str) -> EmbeddingStore {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let matrix: Vec<f32> = (0..n * dim).map(|_| r.sample::<f32, _>(StandardNormal)).collect();
    EmbeddingStore::unlabeled(dim, matrix, tag).unwrap()
}

pub fn with_texts(store: &EmbeddingStore, texts: &[String]) -> EmbeddingStore {
    let records = store
        .records()
        .iter()
        .zip(texts)
        .map(|(r, t)| SentenceRecord::new(r.id, r.dataset.clone(), t.clone()))
        .collect();
    EmbeddingStore::new(
        store.dim(),
        store.matrix().to_vec(),
        records,
        store.is_normalized(),
        store.token_scheme(),
    )
    .unwrap()
}

pub fn naive_dot(a: &[f32], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] as f64 * b[i];
    }
    s
}

/// Full sort by descending score, ascending index.
pub fn full_sort(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx
}
