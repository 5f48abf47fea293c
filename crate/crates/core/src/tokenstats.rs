//! Token frequency along a direction: quintile profiles, strict
//! monotonicity verdicts and their aggregation across dataset combinations.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::directions::{projection_scores, Direction};
use crate::error::{Error, Result};
use crate::store::EmbeddingStore;

pub const QUINTILES: usize = 5;

/// Default minimum per-dataset occurrence count for a token to be analysed.
pub const DEFAULT_MIN_COUNT: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Increasing,
    Decreasing,
    None,
}

impl Verdict {
    pub fn is_monotonic(self) -> bool {
        self != Verdict::None
    }
}

/// Strictly ascending counts are increasing, strictly descending are
/// decreasing; anything else, including ties, is `None`.
pub fn monotonic_verdict(counts: &[u64; QUINTILES]) -> Verdict {
    if counts.windows(2).all(|w| w[0] < w[1]) {
        Verdict::Increasing
    } else if counts.windows(2).all(|w| w[0] > w[1]) {
        Verdict::Decreasing
    } else {
        Verdict::None
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountOptions {
    /// Count sentences containing the token instead of token occurrences.
    pub presence: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// A pair is monotonic for a dataset set only if it has the same
    /// non-none verdict in every dataset.
    #[default]
    Same,
    /// Monotonic in every dataset, in either orientation.
    Any,
}

/// Per-token postings `(row, occurrences)` for one store.
#[derive(Clone, Debug, Default)]
pub struct TokenIndex {
    postings: HashMap<String, Vec<(u32, u32)>>,
}

impl TokenIndex {
    pub fn build(store: &EmbeddingStore, options: CountOptions) -> Self {
        let mut postings: HashMap<String, Vec<(u32, u32)>> = HashMap::new();
        for (row, record) in store.records().iter().enumerate() {
            let mut local: BTreeMap<&str, u32> = BTreeMap::new();
            for t in &record.tokens {
                *local.entry(t.as_str()).or_insert(0) += 1;
            }
            for (t, c) in local {
                let c = if options.presence { 1 } else { c };
                postings
                    .entry(t.to_string())
                    .or_default()
                    .push((row as u32, c));
            }
        }
        TokenIndex { postings }
    }

    pub fn total(&self, token: &str) -> u64 {
        self.postings
            .get(token)
            .map_or(0, |p| p.iter().map(|&(_, c)| u64::from(c)).sum())
    }

    pub fn postings(&self, token: &str) -> &[(u32, u32)] {
        self.postings.get(token).map_or(&[], Vec::as_slice)
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }
}

/// Quintile of each row after sorting rows by ascending score (ties by
/// ascending id). With `n = 5q + r`, the first `r` quintiles hold `q + 1`
/// rows and the rest hold `q`.
pub fn quintile_blocks(scores: &[f64]) -> Vec<u8> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let (base, extra) = (n / QUINTILES, n % QUINTILES);
    let mut blocks = vec![0u8; n];
    let mut pos = 0;
    for q in 0..QUINTILES {
        let size = base + usize::from(q < extra);
        for &row in &order[pos..pos + size] {
            blocks[row] = q as u8;
        }
        pos += size;
    }
    blocks
}

fn block_counts(blocks: &[u8], postings: &[(u32, u32)]) -> [u64; QUINTILES] {
    let mut counts = [0u64; QUINTILES];
    for &(row, c) in postings {
        counts[blocks[row as usize] as usize] += u64::from(c);
    }
    counts
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuintileProfile {
    pub direction: Direction,
    pub dataset: String,
    pub token: String,
    pub counts: [u64; QUINTILES],
    pub verdict: Verdict,
}

pub fn quintile_profile(
    store: &EmbeddingStore,
    v: &Direction,
    token: &str,
    options: CountOptions,
) -> Result<QuintileProfile> {
    let index = TokenIndex::build(store, options);
    let postings = index.postings(token);
    if postings.is_empty() {
        return Err(Error::TokenAbsent(token.to_string()));
    }
    let blocks = quintile_blocks(&projection_scores(store, v)?);
    let counts = block_counts(&blocks, postings);
    Ok(QuintileProfile {
        direction: v.clone(),
        dataset: store.dataset_label(),
        token: token.to_string(),
        counts,
        verdict: monotonic_verdict(&counts),
    })
}

/// Tokens occurring at least `min_count` times in every store, sorted.
pub fn eligible_tokens(stores: &[EmbeddingStore], min_count: usize, options: CountOptions) -> Vec<String> {
    let indexes: Vec<TokenIndex> = stores.iter().map(|s| TokenIndex::build(s, options)).collect();
    let Some(first) = indexes.first() else {
        return Vec::new();
    };
    let mut tokens: Vec<String> = first
        .tokens()
        .filter(|t| indexes.iter().all(|ix| ix.total(t) >= min_count as u64))
        .map(str::to_string)
        .collect();
    tokens.sort();
    tokens
}

/// Verdicts for every `(dataset, direction, token)` triple.
#[derive(Clone, Debug)]
pub struct VerdictMatrix {
    pub datasets: Vec<String>,
    pub tokens: Vec<String>,
    pub directions: usize,
    /// `verdicts[dataset][direction * tokens.len() + token]`
    verdicts: Vec<Vec<Verdict>>,
}

impl VerdictMatrix {
    pub fn compute(
        stores: &[EmbeddingStore],
        directions: &[Direction],
        tokens: &[String],
        options: CountOptions,
    ) -> Result<Self> {
        let mut verdicts = Vec::with_capacity(stores.len());
        for store in stores {
            let index = TokenIndex::build(store, options);
            let per_direction: Vec<Vec<Verdict>> = directions
                .par_iter()
                .map(|v| -> Result<Vec<Verdict>> {
                    let blocks = quintile_blocks(&projection_scores(store, v)?);
                    Ok(tokens
                        .iter()
                        .map(|t| monotonic_verdict(&block_counts(&blocks, index.postings(t))))
                        .collect())
                })
                .collect::<Result<_>>()?;
            verdicts.push(per_direction.into_iter().flatten().collect());
        }
        Ok(VerdictMatrix {
            datasets: stores.iter().map(EmbeddingStore::dataset_label).collect(),
            tokens: tokens.to_vec(),
            directions: directions.len(),
            verdicts,
        })
    }

    pub fn verdict(&self, dataset: usize, direction: usize, token: usize) -> Verdict {
        self.verdicts[dataset][direction * self.tokens.len() + token]
    }

    pub fn pairs(&self) -> usize {
        self.directions * self.tokens.len()
    }

    /// Combined verdict of pair `p` over the datasets in `subset`.
    fn joint(&self, subset: &[usize], p: usize, orientation: Orientation) -> Option<Verdict> {
        let first = self.verdicts[subset[0]][p];
        if !first.is_monotonic() {
            return None;
        }
        let mut rest = subset[1..].iter().map(|&d| self.verdicts[d][p]);
        match orientation {
            Orientation::Same => rest.all(|v| v == first).then_some(first),
            Orientation::Any => {
                let all_same = rest.clone().all(|v| v == first);
                if all_same {
                    Some(first)
                } else if rest.all(Verdict::is_monotonic) {
                    Some(Verdict::None)
                } else {
                    None
                }
            }
        }
    }

    pub fn combination_table(&self, orientation: Orientation) -> CombinationTable {
        let pairs = self.pairs();
        let rows = subsets(self.datasets.len())
            .into_iter()
            .map(|subset| {
                let (mut mono, mut inc, mut dec) = (0usize, 0usize, 0usize);
                for p in 0..pairs {
                    if let Some(v) = self.joint(&subset, p, orientation) {
                        mono += 1;
                        match v {
                            Verdict::Increasing => inc += 1,
                            Verdict::Decreasing => dec += 1,
                            // mixed orientations under `Orientation::Any`
                            Verdict::None => {}
                        }
                    }
                }
                let frac = |c: usize| if pairs == 0 { 0.0 } else { c as f64 / pairs as f64 };
                CombinationRow {
                    datasets: subset.iter().map(|&d| self.datasets[d].clone()).collect(),
                    pairs,
                    monotonic: frac(mono),
                    increasing: frac(inc),
                    decreasing: frac(dec),
                }
            })
            .collect();
        CombinationTable {
            orientation,
            rows,
        }
    }

    /// Tokens ranked by the number of directions along which they are
    /// monotonic in every dataset. Zero counts are dropped; ties are broken
    /// alphabetically.
    pub fn most_monotonic(&self, orientation: Orientation) -> Vec<(String, usize)> {
        let all: Vec<usize> = (0..self.datasets.len()).collect();
        let mut ranking: Vec<(String, usize)> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(t, token)| {
                let count = (0..self.directions)
                    .filter(|&d| {
                        !all.is_empty()
                            && self
                                .joint(&all, d * self.tokens.len() + t, orientation)
                                .is_some()
                    })
                    .count();
                (token.clone(), count)
            })
            .filter(|(_, c)| *c > 0)
            .collect();
        ranking.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranking
    }
}

/// Non-empty index subsets of `0..m`, by size, then lexicographically.
fn subsets(m: usize) -> Vec<Vec<usize>> {
    fn extend(start: usize, m: usize, size: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == size {
            out.push(cur.clone());
            return;
        }
        for i in start..m {
            cur.push(i);
            extend(i + 1, m, size, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    for size in 1..=m {
        extend(0, m, size, &mut Vec::new(), &mut out);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinationRow {
    pub datasets: Vec<String>,
    pub pairs: usize,
    pub monotonic: f64,
    pub increasing: f64,
    pub decreasing: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinationTable {
    pub orientation: Orientation,
    pub rows: Vec<CombinationRow>,
}

impl CombinationTable {
    pub fn row(&self, datasets: &[&str]) -> Option<&CombinationRow> {
        self.rows
            .iter()
            .find(|r| r.datasets.len() == datasets.len() && datasets.iter().all(|d| r.datasets.iter().any(|x| x == d)))
    }

    /// One line per dataset subset: `datasets,monotonic,increasing,decreasing`
    /// with dataset tags joined by `+`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("datasets,monotonic,increasing,decreasing\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.datasets.join("+"),
                r.monotonic,
                r.increasing,
                r.decreasing
            ));
        }
        out
    }
}

pub fn combination_table(
    stores: &[EmbeddingStore],
    directions: &[Direction],
    tokens: &[String],
    options: CountOptions,
    orientation: Orientation,
) -> Result<CombinationTable> {
    if stores.is_empty() || directions.is_empty() || tokens.is_empty() {
        return Err(Error::InvalidArgument(
            "combination table needs at least one dataset, direction and token".into(),
        ));
    }
    Ok(VerdictMatrix::compute(stores, directions, tokens, options)?.combination_table(orientation))
}

pub fn most_monotonic_tokens(
    stores: &[EmbeddingStore],
    directions: &[Direction],
    tokens: &[String],
    options: CountOptions,
    orientation: Orientation,
) -> Result<Vec<(String, usize)>> {
    Ok(VerdictMatrix::compute(stores, directions, tokens, options)?.most_monotonic(orientation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{SentenceRecord, TokenScheme};

    /// Rows with a single coordinate equal to the row index, carrying the
    /// given texts.
    fn ramp(texts: &[&str], dataset: &str) -> EmbeddingStore {
        let records = texts
            .iter()
            .enumerate()
            .map(|(i, t)| SentenceRecord::new(i as u64, dataset, *t))
            .collect();
        let matrix = (0..texts.len()).map(|i| i as f32).collect();
        EmbeddingStore::new(1, matrix, records, false, TokenScheme::Whitespace).unwrap()
    }

    fn up() -> Direction {
        Direction::neuron(0, 1).unwrap()
    }

    #[test]
    fn verdict_examples() {
        assert_eq!(monotonic_verdict(&[1, 2, 3, 4, 5]), Verdict::Increasing);
        assert_eq!(monotonic_verdict(&[5, 4, 3, 2, 1]), Verdict::Decreasing);
        assert_eq!(monotonic_verdict(&[1, 1, 2, 3, 4]), Verdict::None);
        assert_eq!(monotonic_verdict(&[3, 1, 2, 5, 4]), Verdict::None);
    }

    #[test]
    fn block_sizes_for_seven() {
        let blocks = quintile_blocks(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut sizes = [0; 5];
        for b in blocks {
            sizes[b as usize] += 1;
        }
        assert_eq!(sizes, [2, 2, 1, 1, 1]);
    }

    #[test]
    fn profile_examples() {
        let mut texts = vec!["a"; 10];
        texts[8] = "quick";
        texts[9] = "quick";
        let s = ramp(&texts, "A");
        let p = quintile_profile(&s, &up(), "quick", CountOptions::default()).unwrap();
        assert_eq!(p.counts, [0, 0, 0, 0, 2]);
        assert_eq!(p.verdict, Verdict::None);
        let every = quintile_profile(&s, &up(), "a", CountOptions::default()).unwrap();
        assert_eq!(every.counts.iter().sum::<u64>(), 8);
        let once = ramp(&["x"; 10], "A");
        let p = quintile_profile(&once, &up(), "x", CountOptions::default()).unwrap();
        assert_eq!(p.counts, [2, 2, 2, 2, 2]);
        assert!(matches!(
            quintile_profile(&once, &up(), "zzz", CountOptions::default()),
            Err(Error::TokenAbsent(_))
        ));
    }

    #[test]
    fn presence_counts_sentences() {
        let s = ramp(&["w w w", "v", "v", "v", "v"], "A");
        let occ = quintile_profile(&s, &up(), "w", CountOptions { presence: false }).unwrap();
        let pres = quintile_profile(&s, &up(), "w", CountOptions { presence: true }).unwrap();
        assert_eq!(occ.counts[0], 3);
        assert_eq!(pres.counts[0], 1);
    }

    #[test]
    fn eligibility_boundary() {
        let hundred = vec!["t"; 100];
        let mut short = vec!["t"; 99];
        short.extend(vec!["u"; 10]);
        let a = ramp(&hundred, "A");
        let b = ramp(&hundred, "B");
        let c = ramp(&short, "C");
        assert_eq!(eligible_tokens(&[a.clone(), b.clone()], 100, CountOptions::default()), vec!["t"]);
        assert!(eligible_tokens(&[a, b, c], 100, CountOptions::default()).is_empty());
    }

    /// Token `t` repeated `i + 1` times in quintile block `i` (increasing) or
    /// `5 - i` times (decreasing), on a 5-row ramp.
    fn oriented(increasing: bool, dataset: &str) -> EmbeddingStore {
        let texts: Vec<String> = (0..5)
            .map(|i| {
                let reps = if increasing { i + 1 } else { 5 - i };
                vec!["t"; reps].join(" ")
            })
            .collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        ramp(&refs, dataset)
    }

    #[test]
    fn orientation_must_agree_across_datasets() {
        let a = oriented(true, "A");
        let b = oriented(false, "B");
        let tokens = vec!["t".to_string()];
        let table = combination_table(
            &[a.clone(), b.clone()],
            &[up()],
            &tokens,
            CountOptions::default(),
            Orientation::Same,
        )
        .unwrap();
        assert_eq!(table.row(&["A"]).unwrap().monotonic, 1.0);
        assert_eq!(table.row(&["A"]).unwrap().increasing, 1.0);
        assert_eq!(table.row(&["B"]).unwrap().decreasing, 1.0);
        assert_eq!(table.row(&["A", "B"]).unwrap().monotonic, 0.0);

        let any = combination_table(&[a, b], &[up()], &tokens, CountOptions::default(), Orientation::Any)
            .unwrap();
        assert_eq!(any.row(&["A", "B"]).unwrap().monotonic, 1.0);
        assert_eq!(any.row(&["A", "B"]).unwrap().increasing, 0.0);
    }

    #[test]
    fn single_dataset_all_increasing() {
        let a = oriented(true, "A");
        let t = combination_table(&[a], &[up()], &["t".into()], CountOptions::default(), Orientation::Same)
            .unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].monotonic, 1.0);
        assert_eq!(t.to_csv(), "datasets,monotonic,increasing,decreasing\nA,1,1,0\n");
    }

    #[test]
    fn subsets_order() {
        assert_eq!(
            subsets(3),
            vec![vec![0], vec![1], vec![2], vec![0, 1], vec![0, 2], vec![1, 2], vec![0, 1, 2]]
        );
    }

    #[test]
    fn ranking_counts_directions() {
        // The first two coordinates order rows like the token counts, the
        // third scrambles them and the custom direction reverses them.
        let texts: Vec<String> = (0..5).map(|i| vec!["t"; i + 1].join(" ")).collect();
        let records = texts
            .iter()
            .enumerate()
            .map(|(i, t)| SentenceRecord::new(i as u64, "A", t.as_str()))
            .collect();
        let scrambled = [2.0, 0.0, 4.0, 1.0, 3.0];
        let matrix = (0..5).flat_map(|i| [i as f32, i as f32, scrambled[i]]).collect();
        let s = EmbeddingStore::new(3, matrix, records, false, TokenScheme::Whitespace).unwrap();
        let dirs = vec![
            Direction::neuron(0, 3).unwrap(),
            Direction::neuron(1, 3).unwrap(),
            Direction::neuron(2, 3).unwrap(),
            Direction::custom("neg", vec![-1.0, 0.0, 0.0]).unwrap(),
        ];
        let r = most_monotonic_tokens(&[s.clone()], &dirs, &["t".into()], CountOptions::default(), Orientation::Same)
            .unwrap();
        assert_eq!(r, vec![("t".to_string(), 3)]);
        let none = most_monotonic_tokens(&[s], &dirs[2..3], &["t".into()], CountOptions::default(), Orientation::Same)
            .unwrap();
        assert!(none.is_empty());
    }
}
