//! Synthetic embedding stores with planted concepts.
//!
//! Three kinds of concept can be planted, each tied to a token:
//!
//! - **global**: every row gets a standard normal activation `a` along a
//!   seeded unit direction, scaled by `strength * noise`; the concept token
//!   is emitted with probability `1 / (1 + exp(-strength * (a - a0)))` where
//!   `a0` is the dataset's median activation.
//! - **dataset-level**: the same mechanism restricted to one dataset. In the
//!   other datasets the token is emitted with probability 1/2 regardless of
//!   position, so it exists there without tracking any direction.
//! - **local**: a fixed number of rows per dataset are drawn around a seeded
//!   centre with per-coordinate spread `radius` instead of the background
//!   noise, and all of them carry the token.
//!
//! Background tokens `tok_bg_{i}` are added to every row with Poisson
//! counts, independent of the embedding. A spec with no concepts is
//! therefore a null store: no token correlates with any direction.

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::directions::Direction;
use crate::error::{Error, Result};
use crate::rng;
use crate::store::{EmbeddingStore, SentenceRecord, TokenScheme};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalConcept {
    pub seed: u64,
    pub token: String,
    pub strength: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConcept {
    pub dataset: String,
    pub seed: u64,
    pub token: String,
    pub strength: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalConcept {
    pub seed: u64,
    pub radius: f64,
    pub token: String,
    /// Cluster members drawn in each dataset.
    pub members_per_dataset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundTokens {
    pub vocabulary: usize,
    /// Mean occurrences of each background token per sentence.
    pub rate: f64,
}

impl Default for BackgroundTokens {
    fn default() -> Self {
        BackgroundTokens {
            vocabulary: 20,
            rate: 1.0,
        }
    }
}

fn default_center_radius() -> f64 {
    3.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dim: usize,
    pub datasets: Vec<DatasetSpec>,
    /// Per-coordinate standard deviation of the background noise.
    pub noise: f64,
    #[serde(default)]
    pub global: Vec<GlobalConcept>,
    #[serde(default)]
    pub local: Vec<LocalConcept>,
    #[serde(default)]
    pub dataset_level: Vec<DatasetConcept>,
    #[serde(default)]
    pub background: BackgroundTokens,
    /// Local cluster centres lie on a sphere of radius
    /// `center_radius * noise`.
    #[serde(default = "default_center_radius")]
    pub center_radius: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Isotropic-noise store with only background tokens.
    pub fn null(dim: usize, datasets: &[(&str, usize)], seed: u64) -> Self {
        SynthSpec {
            dim,
            datasets: datasets
                .iter()
                .map(|(n, r)| DatasetSpec {
                    name: n.to_string(),
                    rows: *r,
                })
                .collect(),
            noise: 1.0,
            global: Vec::new(),
            local: Vec::new(),
            dataset_level: Vec::new(),
            background: BackgroundTokens::default(),
            center_radius: default_center_radius(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if self.datasets.is_empty() || self.datasets.iter().any(|d| d.rows == 0) {
            return bad("every dataset needs at least one row".into());
        }
        if !(self.noise > 0.0) || !(self.center_radius > 0.0) {
            return bad("noise and center_radius must be positive".into());
        }
        if self.global.iter().any(|g| !(g.strength > 0.0))
            || self.dataset_level.iter().any(|g| !(g.strength > 0.0))
        {
            return bad("concept strengths must be positive".into());
        }
        if self.local.iter().any(|l| !(l.radius > 0.0)) {
            return bad("cluster radii must be positive".into());
        }
        if !(self.background.rate >= 0.0) {
            return bad("background rate must be non-negative".into());
        }
        for d in &self.dataset_level {
            if !self.datasets.iter().any(|s| s.name == d.dataset) {
                return Err(Error::UnknownDataset(d.dataset.clone()));
            }
        }
        for ds in &self.datasets {
            let members: usize = self.local.iter().map(|l| l.members_per_dataset).sum();
            if members > ds.rows {
                return bad(format!(
                    "dataset {} has {} rows but {members} cluster members",
                    ds.name, ds.rows
                ));
            }
        }
        Ok(())
    }

    fn center(&self, c: &LocalConcept) -> Result<Vec<f64>> {
        let radius = self.center_radius * self.noise;
        Ok(Direction::random(c.seed, self.dim)?
            .vector()
            .iter()
            .map(|x| x * radius)
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptWeight {
    pub name: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowTruth {
    pub id: u64,
    pub concepts: Vec<ConceptWeight>,
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub store: EmbeddingStore,
    pub truth: Vec<RowTruth>,
    /// Planted concept directions by concept name. Local concepts map to the
    /// unit direction through their cluster centre.
    pub directions: Vec<(String, Direction)>,
}

impl SynthOutput {
    pub fn direction(&self, name: &str) -> Option<&Direction> {
        self.directions.iter().find(|(n, _)| n == name).map(|(_, d)| d)
    }

    /// Ground truth as JSONL, one [`RowTruth`] per line.
    pub fn truth_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for t in &self.truth {
            out.push_str(&serde_json::to_string(t)?);
            out.push('\n');
        }
        Ok(out)
    }
}

pub fn global_name(token: &str) -> String {
    format!("global:{token}")
}

pub fn dataset_name(token: &str) -> String {
    format!("dataset:{token}")
}

pub fn local_name(token: &str) -> String {
    format!("local:{token}")
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn median(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

struct DatasetRows {
    matrix: Vec<f32>,
    tokens: Vec<Vec<String>>,
    truth: Vec<Vec<ConceptWeight>>,
}

/// A directional concept active in one dataset: activations, emission.
struct Directional<'a> {
    name: String,
    token: &'a str,
    strength: f64,
    direction: Direction,
}

fn generate_dataset(
    spec: &SynthSpec,
    ds: &DatasetSpec,
    active: &[Directional<'_>],
    passive_tokens: &[&str],
    centers: &[Vec<f64>],
) -> Result<DatasetRows> {
    let d = spec.dim;
    let n = ds.rows;
    let mut r = rng::keyed(spec.seed, &[rng::label("synth-dataset"), rng::label(&ds.name)]);

    // cluster index per row; usize::MAX marks a background noise row
    let mut cluster = vec![usize::MAX; n];
    let mut free: Vec<usize> = (0..n).collect();
    for (l, c) in spec.local.iter().enumerate() {
        let picks = index::sample(&mut r, free.len(), c.members_per_dataset).into_vec();
        let mut chosen: Vec<usize> = picks.iter().map(|&p| free[p]).collect();
        chosen.sort_unstable();
        for &row in &chosen {
            cluster[row] = l;
        }
        free.retain(|row| cluster[*row] == usize::MAX);
    }

    let mut matrix = vec![0f64; n * d];
    for (i, row) in matrix.chunks_exact_mut(d).enumerate() {
        match spec.local.get(cluster[i]) {
            Some(c) => {
                let spread = Normal::new(0.0, c.radius).expect("radius validated");
                for (x, m) in row.iter_mut().zip(&centers[cluster[i]]) {
                    *x = m + spread.sample(&mut r);
                }
            }
            None => {
                for x in row.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut r);
                    *x = spec.noise * z;
                }
            }
        }
    }

    let mut tokens: Vec<Vec<String>> = vec![Vec::new(); n];
    let mut truth: Vec<Vec<ConceptWeight>> = vec![Vec::new(); n];
    for concept in active {
        let acts: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
        let a0 = median(&acts);
        let amp = concept.strength * spec.noise;
        for (i, &a) in acts.iter().enumerate() {
            let row = &mut matrix[i * d..(i + 1) * d];
            for (x, u) in row.iter_mut().zip(concept.direction.vector()) {
                *x += amp * a * u;
            }
            if r.random::<f64>() < logistic(concept.strength * (a - a0)) {
                tokens[i].push(concept.token.to_string());
            }
            truth[i].push(ConceptWeight {
                name: concept.name.clone(),
                weight: a,
            });
        }
    }
    for token in passive_tokens {
        for t in tokens.iter_mut() {
            if r.random::<f64>() < 0.5 {
                t.push(token.to_string());
            }
        }
    }
    for (i, &l) in cluster.iter().enumerate() {
        if let Some(c) = spec.local.get(l) {
            tokens[i].push(c.token.clone());
            truth[i].push(ConceptWeight {
                name: local_name(&c.token),
                weight: 1.0,
            });
        }
    }
    if spec.background.vocabulary > 0 && spec.background.rate > 0.0 {
        let poisson = Poisson::new(spec.background.rate)
            .map_err(|e| Error::InvalidArgument(format!("background rate: {e}")))?;
        for t in tokens.iter_mut() {
            for v in 0..spec.background.vocabulary {
                let reps = poisson.sample(&mut r) as usize;
                for _ in 0..reps {
                    t.push(format!("tok_bg_{v}"));
                }
            }
        }
    }

    Ok(DatasetRows {
        matrix: matrix.into_iter().map(|x| x as f32).collect(),
        tokens,
        truth,
    })
}

/// Generates the store, its ground truth and the planted directions.
/// Identical specs give bit-identical output.
pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut directions = Vec::new();
    let globals: Vec<Directional<'_>> = spec
        .global
        .iter()
        .map(|g| {
            Ok(Directional {
                name: global_name(&g.token),
                token: &g.token,
                strength: g.strength,
                direction: Direction::random(g.seed, spec.dim)?,
            })
        })
        .collect::<Result<_>>()?;
    let dataset_level: Vec<(&str, Directional<'_>)> = spec
        .dataset_level
        .iter()
        .map(|g| {
            Ok((
                g.dataset.as_str(),
                Directional {
                    name: dataset_name(&g.token),
                    token: &g.token,
                    strength: g.strength,
                    direction: Direction::random(g.seed, spec.dim)?,
                },
            ))
        })
        .collect::<Result<_>>()?;
    let centers: Vec<Vec<f64>> = spec.local.iter().map(|c| spec.center(c)).collect::<Result<_>>()?;

    for g in &globals {
        directions.push((g.name.clone(), g.direction.clone()));
    }
    for (_, g) in &dataset_level {
        directions.push((g.name.clone(), g.direction.clone()));
    }
    for c in &spec.local {
        directions.push((local_name(&c.token), Direction::random(c.seed, spec.dim)?));
    }

    let parts: Vec<DatasetRows> = spec
        .datasets
        .par_iter()
        .map(|ds| {
            let mut active: Vec<Directional<'_>> = globals
                .iter()
                .map(|g| Directional {
                    name: g.name.clone(),
                    token: g.token,
                    strength: g.strength,
                    direction: g.direction.clone(),
                })
                .collect();
            let mut passive = Vec::new();
            for (tag, g) in &dataset_level {
                if *tag == ds.name {
                    active.push(Directional {
                        name: g.name.clone(),
                        token: g.token,
                        strength: g.strength,
                        direction: g.direction.clone(),
                    });
                } else {
                    passive.push(g.token);
                }
            }
            generate_dataset(spec, ds, &active, &passive, &centers)
        })
        .collect::<Result<_>>()?;

    let mut matrix = Vec::new();
    let mut records = Vec::new();
    let mut truth = Vec::new();
    for (ds, part) in spec.datasets.iter().zip(parts) {
        matrix.extend(part.matrix);
        for (tokens, concepts) in part.tokens.into_iter().zip(part.truth) {
            let id = records.len() as u64;
            records.push(SentenceRecord {
                id,
                dataset: ds.name.clone(),
                text: tokens.join(" "),
                tokens,
                origin: None,
            });
            truth.push(RowTruth { id, concepts });
        }
    }
    let store = EmbeddingStore::new(spec.dim, matrix, records, false, TokenScheme::Whitespace)?;
    Ok(SynthOutput {
        store,
        truth,
        directions,
    })
}

/// Weights over `N` concepts, non-negative and summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptDistribution {
    weights: Vec<f64>,
}

impl ConceptDistribution {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("empty concept distribution".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument(
                "concept weights must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "concept weights sum to {sum}, not 1"
            )));
        }
        Ok(ConceptDistribution { weights })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("empty concept distribution".into()));
        }
        Self::new(vec![1.0 / n as f64; n])
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PurityMeasure {
    /// Largest weight.
    #[default]
    MaxComponent,
    /// `1 - H(C) / ln N`: 1 for one-hot, 0 for uniform.
    NegativeEntropy,
}

pub fn concept_purity(dist: &ConceptDistribution, measure: PurityMeasure) -> f64 {
    let w = dist.weights();
    match measure {
        PurityMeasure::MaxComponent => w.iter().cloned().fold(0.0, f64::max),
        PurityMeasure::NegativeEntropy => {
            if w.len() == 1 {
                return 1.0;
            }
            let h: f64 = w.iter().filter(|&&c| c > 0.0).map(|&c| -c * c.ln()).sum();
            1.0 - h / (w.len() as f64).ln()
        }
    }
}

/// Normalized weighted sum of concept directions.
pub fn mixed_direction(
    directions: &[Direction],
    weights: &ConceptDistribution,
) -> Result<Direction> {
    let first = directions
        .first()
        .ok_or_else(|| Error::InvalidArgument("no concept directions".into()))?;
    if directions.len() != weights.weights().len() {
        return Err(Error::InvalidArgument(format!(
            "{} directions but {} weights",
            directions.len(),
            weights.weights().len()
        )));
    }
    let dim = first.dim();
    let mut sum = vec![0.0; dim];
    for (d, &w) in directions.iter().zip(weights.weights()) {
        if d.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: d.dim(),
            });
        }
        for (s, x) in sum.iter_mut().zip(d.vector()) {
            *s += w * x;
        }
    }
    let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 1e-12) {
        return Err(Error::InvalidArgument("mixed direction is the zero vector".into()));
    }
    let label = directions
        .iter()
        .map(|d| d.kind.to_string())
        .collect::<Vec<_>>()
        .join("+");
    Direction::custom(format!("mix({label})"), sum.into_iter().map(|x| x / norm).collect())
}
