//! Blinded annotation: task packs, record validation and the agreement
//! report.
//!
//! A pack is two files. The task file lists ten-sentence tasks that carry no
//! trace of the condition that produced them (neuron, random direction or a
//! random sentence set); the key file maps task ids to conditions and is
//! only opened when the report is computed.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::directions::{top_k, Direction};
use crate::error::{Error, Result};
use crate::rng;
use crate::stats;
use crate::store::EmbeddingStore;

/// Patterns with fewer members are kept but not counted.
pub const MIN_PATTERN_MEMBERS: usize = 3;

pub const DEFAULT_ANNOTATORS_PER_TASK: usize = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnnotationError {
    #[error("unknown task id {0:?}")]
    UnknownTask(String),
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("annotator {annotator:?} already submitted task {task_id:?}")]
    Duplicate { task_id: String, annotator: String },
    #[error("merge map references unknown pattern id {0:?}")]
    UnknownPattern(String),
    #[error("{0}")]
    InvalidPack(String),
    #[error("line {line}: {message}")]
    BadLine { line: usize, message: String },
}

impl AnnotationError {
    pub fn code(&self) -> &'static str {
        match self {
            AnnotationError::UnknownTask(_) => "unknown-task",
            AnnotationError::Malformed(_) => "malformed-record",
            AnnotationError::Duplicate { .. } => "duplicate-record",
            AnnotationError::UnknownPattern(_) => "unknown-pattern",
            AnnotationError::InvalidPack(_) => "invalid-pack",
            AnnotationError::BadLine { .. } => "bad-line",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Condition {
    Neuron { index: usize },
    RandomDirection { seed: u64 },
    RandomSentences { seed: u64 },
}

impl Condition {
    pub fn group(&self) -> ConditionGroup {
        match self {
            Condition::Neuron { .. } => ConditionGroup::Neuron,
            Condition::RandomDirection { .. } => ConditionGroup::RandomDirection,
            Condition::RandomSentences { .. } => ConditionGroup::RandomSentences,
        }
    }

    /// Label of the direction behind the task; random sentence sets have none.
    pub fn direction_label(&self) -> Option<String> {
        match self {
            Condition::Neuron { index } => Some(format!("neuron-{index}")),
            Condition::RandomDirection { seed } => Some(format!("random-{seed}")),
            Condition::RandomSentences { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionGroup {
    Neuron,
    RandomDirection,
    RandomSentences,
}

impl ConditionGroup {
    pub const ALL: [ConditionGroup; 3] = [
        ConditionGroup::Neuron,
        ConditionGroup::RandomDirection,
        ConditionGroup::RandomSentences,
    ];
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisplaySentence {
    pub index: usize,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationTask {
    pub task_id: String,
    pub dataset: String,
    pub sentences: Vec<DisplaySentence>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyEntry {
    pub task_id: String,
    pub condition: Condition,
    /// Originating sentence ids in display order.
    #[serde(default)]
    pub sentence_ids: Vec<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Pack {
    pub tasks: Vec<AnnotationTask>,
    pub key: Vec<KeyEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackConfig {
    pub neurons: usize,
    pub random_directions: usize,
    pub random_sets: usize,
    pub k: usize,
    pub seed: u64,
}

impl Default for PackConfig {
    fn default() -> Self {
        PackConfig {
            neurons: 1,
            random_directions: 1,
            random_sets: 1,
            k: crate::DEFAULT_K,
            seed: 0,
        }
    }
}

fn task_id(r: &mut rng::Rng) -> String {
    let id: u128 = r.random();
    format!("{id:032x}")
}

/// Builds a blinded pack over `stores` (one per dataset). The same sampled
/// neurons and random directions are used in every dataset; random sentence
/// sets are drawn per dataset and task.
pub fn build_pack(stores: &[EmbeddingStore], config: &PackConfig) -> Result<Pack> {
    let first = stores
        .first()
        .ok_or_else(|| AnnotationError::InvalidPack("no datasets".into()))?;
    let dim = first.dim();
    if config.k < MIN_PATTERN_MEMBERS {
        return Err(AnnotationError::InvalidPack(format!(
            "k = {} is below the minimum pattern size {MIN_PATTERN_MEMBERS}",
            config.k
        ))
        .into());
    }
    if config.neurons > dim {
        return Err(AnnotationError::InvalidPack(format!(
            "cannot sample {} neurons from dimension {dim}",
            config.neurons
        ))
        .into());
    }
    for s in stores {
        if s.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: s.dim(),
            });
        }
        if s.len() < config.k {
            return Err(AnnotationError::InvalidPack(format!(
                "dataset {} has {} sentences, fewer than k = {}",
                s.dataset_label(),
                s.len(),
                config.k
            ))
            .into());
        }
    }

    let mut r = rng::keyed(config.seed, &[rng::label("pack-neurons")]);
    let mut neurons = index::sample(&mut r, dim, config.neurons).into_vec();
    neurons.sort_unstable();
    let mut conditions: Vec<(Condition, Option<Direction>)> = Vec::new();
    for &n in &neurons {
        conditions.push((Condition::Neuron { index: n }, Some(Direction::neuron(n, dim)?)));
    }
    for j in 0..config.random_directions as u64 {
        let seed = rng::derive(config.seed, &[rng::label("pack-random-direction"), j]);
        conditions.push((
            Condition::RandomDirection { seed },
            Some(Direction::random(seed, dim)?),
        ));
    }

    let mut id_rng = rng::keyed(config.seed, &[rng::label("pack-task-ids")]);
    let mut entries: Vec<(AnnotationTask, KeyEntry)> = Vec::new();
    for store in stores {
        let dataset = store.dataset_label();
        let mut add = |condition: Condition, rows: Vec<usize>| {
            let id = task_id(&mut id_rng);
            let mut order = rows;
            let mut shuffle = rng::keyed(config.seed, &[rng::label("pack-display"), rng::label(&id)]);
            order.shuffle(&mut shuffle);
            let sentences = order
                .iter()
                .enumerate()
                .map(|(i, &row)| DisplaySentence {
                    index: i,
                    text: store.record(row).text.clone(),
                })
                .collect();
            let sentence_ids = order.iter().map(|&row| store.record(row).origin_id()).collect();
            entries.push((
                AnnotationTask {
                    task_id: id.clone(),
                    dataset: dataset.clone(),
                    sentences,
                },
                KeyEntry {
                    task_id: id,
                    condition,
                    sentence_ids,
                },
            ));
        };
        for (condition, direction) in &conditions {
            let direction = direction.as_ref().expect("directional condition");
            let rows = top_k(store, direction, config.k)?
                .entries
                .iter()
                .map(|e| e.id as usize)
                .collect();
            add(condition.clone(), rows);
        }
        for j in 0..config.random_sets as u64 {
            let seed = rng::derive(
                config.seed,
                &[rng::label("pack-random-set"), rng::label(&dataset), j],
            );
            let rows = index::sample(&mut rng::seeded(seed), store.len(), config.k).into_vec();
            add(Condition::RandomSentences { seed }, rows);
        }
    }

    let mut order_rng = rng::keyed(config.seed, &[rng::label("pack-order")]);
    entries.shuffle(&mut order_rng);
    let (tasks, key) = entries.into_iter().unzip();
    Ok(Pack { tasks, key })
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                AnnotationError::BadLine {
                    line: i + 1,
                    message: e.to_string(),
                }
                .into()
            })
        })
        .collect()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text)
}

impl Pack {
    pub fn load(tasks: &Path, key: Option<&Path>) -> Result<Self> {
        Ok(Pack {
            tasks: read_jsonl(tasks)?,
            key: match key {
                Some(k) => read_jsonl(k)?,
                None => Vec::new(),
            },
        })
    }

    pub fn tasks_jsonl(&self) -> Result<String> {
        to_jsonl(&self.tasks)
    }

    pub fn key_jsonl(&self) -> Result<String> {
        to_jsonl(&self.key)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pattern {
    pub description: String,
    pub members: Vec<usize>,
}

impl Pattern {
    pub fn is_valid(&self) -> bool {
        self.members.len() >= MIN_PATTERN_MEMBERS
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub task_id: String,
    pub annotator_id: String,
    #[serde(default)]
    pub patterns: Vec<Pattern>,
    #[serde(default)]
    pub no_pattern: bool,
}

impl AnnotationRecord {
    pub fn valid_patterns(&self) -> impl Iterator<Item = &Pattern> {
        self.patterns.iter().filter(|p| p.is_valid())
    }

    pub fn found_pattern(&self) -> bool {
        self.valid_patterns().next().is_some()
    }

    /// Stable id of pattern `index`: `task/annotator/index`.
    pub fn pattern_id(&self, index: usize) -> String {
        format!("{}/{}/{}", self.task_id, self.annotator_id, index)
    }

    /// Structural checks against a task with `task_len` sentences. Patterns
    /// smaller than [`MIN_PATTERN_MEMBERS`] pass; they are ignored later.
    pub fn validate(&self, task_len: usize) -> Result<(), AnnotationError> {
        if self.annotator_id.trim().is_empty() {
            return Err(AnnotationError::Malformed("empty annotator id".into()));
        }
        if self.no_pattern == !self.patterns.is_empty() {
            return Err(AnnotationError::Malformed(
                "exactly one of no_pattern or a non-empty pattern list is required".into(),
            ));
        }
        for (i, p) in self.patterns.iter().enumerate() {
            if p.members.is_empty() {
                return Err(AnnotationError::Malformed(format!("pattern {i} has no members")));
            }
            if p.members.len() > task_len {
                return Err(AnnotationError::Malformed(format!(
                    "pattern {i} has {} members but the task shows {task_len} sentences",
                    p.members.len()
                )));
            }
            let mut seen = HashSet::new();
            for &m in &p.members {
                if m >= task_len {
                    return Err(AnnotationError::Malformed(format!(
                        "pattern {i} member {m} is outside 0..{task_len}"
                    )));
                }
                if !seen.insert(m) {
                    return Err(AnnotationError::Malformed(format!(
                        "pattern {i} lists member {m} twice"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Validated records in arrival order, at most one per `(task, annotator)`.
#[derive(Clone, Debug, Default)]
pub struct RecordSet {
    task_sizes: HashMap<String, usize>,
    records: Vec<AnnotationRecord>,
    seen: HashSet<(String, String)>,
}

impl RecordSet {
    pub fn new(tasks: &[AnnotationTask]) -> Self {
        RecordSet {
            task_sizes: tasks
                .iter()
                .map(|t| (t.task_id.clone(), t.sentences.len()))
                .collect(),
            records: Vec::new(),
            seen: HashSet::new(),
        }
    }

    /// Checks `record` without storing it.
    pub fn check(&self, record: &AnnotationRecord) -> Result<(), AnnotationError> {
        let size = *self
            .task_sizes
            .get(&record.task_id)
            .ok_or_else(|| AnnotationError::UnknownTask(record.task_id.clone()))?;
        record.validate(size)?;
        if self.contains(&record.task_id, &record.annotator_id) {
            return Err(AnnotationError::Duplicate {
                task_id: record.task_id.clone(),
                annotator: record.annotator_id.clone(),
            });
        }
        Ok(())
    }

    pub fn insert(&mut self, record: AnnotationRecord) -> Result<(), AnnotationError> {
        self.check(&record)?;
        self.seen
            .insert((record.task_id.clone(), record.annotator_id.clone()));
        self.records.push(record);
        Ok(())
    }

    pub fn contains(&self, task_id: &str, annotator: &str) -> bool {
        self.seen
            .contains(&(task_id.to_string(), annotator.to_string()))
    }

    pub fn records(&self) -> &[AnnotationRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateSubmission {
    pub line: usize,
    pub task_id: String,
    pub annotator_id: String,
}

#[derive(Clone, Debug, Default)]
pub struct Ingested {
    pub records: RecordSet,
    /// Later submissions for an already-seen `(task, annotator)`; the first
    /// one is kept.
    pub duplicates: Vec<DuplicateSubmission>,
}

/// Parses and validates a records JSONL text. Unknown tasks and malformed
/// records are errors; duplicates are skipped and reported.
pub fn ingest_records_str(text: &str, tasks: &[AnnotationTask]) -> Result<Ingested> {
    let mut out = Ingested {
        records: RecordSet::new(tasks),
        duplicates: Vec::new(),
    };
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: AnnotationRecord =
            serde_json::from_str(line).map_err(|e| AnnotationError::BadLine {
                line: i + 1,
                message: e.to_string(),
            })?;
        match out.records.insert(record) {
            Ok(()) => {}
            Err(AnnotationError::Duplicate { task_id, annotator }) => {
                out.duplicates.push(DuplicateSubmission {
                    line: i + 1,
                    task_id,
                    annotator_id: annotator,
                })
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

pub fn ingest_records(path: &Path, tasks: &[AnnotationTask]) -> Result<Ingested> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    ingest_records_str(&text, tasks)
}

/// Annotation progress as served by the annotation service.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub tasks: usize,
    pub annotators_per_task: usize,
    pub records: usize,
    /// Tasks with the full number of annotations.
    pub complete: usize,
    pub partial: usize,
    pub untouched: usize,
    /// Assignments handed out and not yet submitted.
    pub in_progress: usize,
    pub per_annotator: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub condition: ConditionGroup,
    /// Dataset tag, or `"all"` for the pooled cell.
    pub dataset: String,
    pub tasks: usize,
    pub yes: usize,
    pub no: usize,
    pub conflicting: usize,
    pub yes_pct: f64,
    pub no_pct: f64,
    pub conflicting_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorTotals {
    pub annotator_id: String,
    pub tasks_annotated: usize,
    pub tasks_with_pattern: usize,
    pub pattern_rate: f64,
    pub valid_patterns: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternSizes {
    pub condition: ConditionGroup,
    pub patterns: usize,
    pub mean: f64,
    pub std_dev: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcludedTask {
    pub task_id: String,
    pub annotations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub annotators_per_task: usize,
    pub cells: Vec<ReportCell>,
    pub annotators: Vec<AnnotatorTotals>,
    pub pattern_sizes: Vec<PatternSizes>,
    /// Tasks with at least one but not exactly `annotators_per_task`
    /// annotations.
    pub excluded: Vec<ExcludedTask>,
    pub unannotated: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distinct_patterns: Option<DistinctPatterns>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
enum Outcome {
    #[default]
    Yes,
    No,
    Conflicting,
}

fn pct(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        100.0 * part as f64 / whole as f64
    }
}

fn key_map(key: &[KeyEntry]) -> HashMap<&str, &Condition> {
    key.iter().map(|k| (k.task_id.as_str(), &k.condition)).collect()
}

/// Agreement tables from the records and the sealed key. Every task needs a
/// key entry.
pub fn protocol_report(
    tasks: &[AnnotationTask],
    records: &RecordSet,
    key: &[KeyEntry],
    annotators_per_task: usize,
) -> Result<ProtocolReport> {
    if annotators_per_task == 0 {
        return Err(Error::InvalidArgument("annotators_per_task must be positive".into()));
    }
    let conditions = key_map(key);
    for t in tasks {
        if !conditions.contains_key(t.task_id.as_str()) {
            return Err(AnnotationError::InvalidPack(format!(
                "task {} has no key entry",
                t.task_id
            ))
            .into());
        }
    }
    let mut by_task: HashMap<&str, Vec<&AnnotationRecord>> = HashMap::new();
    for r in records.records() {
        by_task.entry(r.task_id.as_str()).or_default().push(r);
    }

    let mut datasets: Vec<String> = Vec::new();
    for t in tasks {
        if !datasets.contains(&t.dataset) {
            datasets.push(t.dataset.clone());
        }
    }
    let mut tallies: BTreeMap<(ConditionGroup, usize), [usize; 3]> = BTreeMap::new();
    let mut excluded = Vec::new();
    let mut unannotated = 0;
    for t in tasks {
        let anns = by_task.get(t.task_id.as_str()).map_or(&[][..], Vec::as_slice);
        if anns.is_empty() {
            unannotated += 1;
            continue;
        }
        if anns.len() != annotators_per_task {
            excluded.push(ExcludedTask {
                task_id: t.task_id.clone(),
                annotations: anns.len(),
            });
            continue;
        }
        let found = anns.iter().filter(|r| r.found_pattern()).count();
        let outcome = if found == anns.len() {
            Outcome::Yes
        } else if found == 0 {
            Outcome::No
        } else {
            Outcome::Conflicting
        };
        let group = conditions[t.task_id.as_str()].group();
        let d = datasets.iter().position(|d| d == &t.dataset).expect("dataset listed");
        let slot = match outcome {
            Outcome::Yes => 0,
            Outcome::No => 1,
            Outcome::Conflicting => 2,
        };
        tallies.entry((group, d)).or_default()[slot] += 1;
    }
    excluded.sort_by(|a, b| a.task_id.cmp(&b.task_id));

    let make_cell = |condition, dataset: String, c: [usize; 3]| {
        let tasks = c.iter().sum();
        ReportCell {
            condition,
            dataset,
            tasks,
            yes: c[0],
            no: c[1],
            conflicting: c[2],
            yes_pct: pct(c[0], tasks),
            no_pct: pct(c[1], tasks),
            conflicting_pct: pct(c[2], tasks),
        }
    };
    let mut cells = Vec::new();
    for group in ConditionGroup::ALL {
        let mut pooled = [0usize; 3];
        for (d, name) in datasets.iter().enumerate() {
            let c = tallies.get(&(group, d)).copied().unwrap_or_default();
            for i in 0..3 {
                pooled[i] += c[i];
            }
            cells.push(make_cell(group, name.clone(), c));
        }
        cells.push(make_cell(group, "all".into(), pooled));
    }

    let mut per_annotator: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    let mut sizes: BTreeMap<ConditionGroup, Vec<f64>> = BTreeMap::new();
    for r in records.records() {
        let e = per_annotator.entry(r.annotator_id.as_str()).or_default();
        e.0 += 1;
        if r.found_pattern() {
            e.1 += 1;
        }
        e.2 += r.valid_patterns().count();
        if let Some(c) = conditions.get(r.task_id.as_str()) {
            sizes
                .entry(c.group())
                .or_default()
                .extend(r.valid_patterns().map(|p| p.members.len() as f64));
        }
    }
    let annotators = per_annotator
        .into_iter()
        .map(|(id, (n, found, patterns))| AnnotatorTotals {
            annotator_id: id.to_string(),
            tasks_annotated: n,
            tasks_with_pattern: found,
            pattern_rate: found as f64 / n as f64,
            valid_patterns: patterns,
        })
        .collect();
    let pattern_sizes = ConditionGroup::ALL
        .iter()
        .map(|&g| {
            let s = sizes.get(&g).map_or(&[][..], Vec::as_slice);
            PatternSizes {
                condition: g,
                patterns: s.len(),
                mean: if s.is_empty() { 0.0 } else { stats::mean(s) },
                std_dev: stats::std_dev(s),
            }
        })
        .collect();

    Ok(ProtocolReport {
        annotators_per_task,
        cells,
        annotators,
        pattern_sizes,
        excluded,
        unannotated,
        distinct_patterns: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistinctPatterns {
    /// Distinct merged pattern classes per direction label.
    pub per_direction: BTreeMap<String, usize>,
    /// Mean over directions with at least one valid pattern.
    pub mean: f64,
}

/// Counts distinct pattern classes per direction across datasets.
/// `merge` maps pattern ids (see [`AnnotationRecord::pattern_id`]) to an
/// analyst-chosen class; unmapped valid patterns form their own class.
/// Random sentence sets have no direction and are skipped.
pub fn distinct_patterns(
    records: &RecordSet,
    key: &[KeyEntry],
    merge: &BTreeMap<String, String>,
) -> Result<DistinctPatterns> {
    let conditions = key_map(key);
    let mut known = HashSet::new();
    let mut classes: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for r in records.records() {
        for i in 0..r.patterns.len() {
            known.insert(r.pattern_id(i));
        }
        let Some(label) = conditions
            .get(r.task_id.as_str())
            .and_then(|c| c.direction_label())
        else {
            continue;
        };
        for (i, p) in r.patterns.iter().enumerate() {
            if !p.is_valid() {
                continue;
            }
            let id = r.pattern_id(i);
            let class = merge.get(&id).cloned().unwrap_or(id);
            classes.entry(label.clone()).or_default().insert(class);
        }
    }
    if let Some(bad) = merge.keys().find(|k| !known.contains(*k)) {
        return Err(AnnotationError::UnknownPattern(bad.clone()).into());
    }
    let per_direction: BTreeMap<String, usize> =
        classes.into_iter().map(|(k, v)| (k, v.len())).collect();
    let counts: Vec<f64> = per_direction.values().map(|&c| c as f64).collect();
    Ok(DistinctPatterns {
        mean: if counts.is_empty() { 0.0 } else { stats::mean(&counts) },
        per_direction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stores() -> Vec<EmbeddingStore> {
        ["qqp", "wiki", "books", "qnli"]
            .iter()
            .enumerate()
            .map(|(d, tag)| {
                let rows: Vec<Vec<f32>> = (0..20)
                    .map(|i| vec![(i * (d + 1)) as f32 % 7.0, i as f32, (20 - i) as f32])
                    .collect();
                let mut s = EmbeddingStore::from_rows(&rows, &vec![*tag; 20]).unwrap();
                let records: Vec<_> = s
                    .records()
                    .iter()
                    .map(|r| {
                        crate::store::SentenceRecord::new(r.id, tag.to_string(), format!("sentence {} of {tag}", r.id))
                    })
                    .collect();
                s = EmbeddingStore::new(3, s.matrix().to_vec(), records, false, Default::default()).unwrap();
                s
            })
            .collect()
    }

    fn record(task: &str, who: &str, sizes: &[usize]) -> AnnotationRecord {
        AnnotationRecord {
            task_id: task.into(),
            annotator_id: who.into(),
            patterns: sizes
                .iter()
                .map(|&n| Pattern {
                    description: format!("{n}-member pattern"),
                    members: (0..n).collect(),
                })
                .collect(),
            no_pattern: sizes.is_empty(),
        }
    }

    #[test]
    fn pack_counts_and_determinism() {
        let config = PackConfig {
            seed: 5,
            ..Default::default()
        };
        let pack = build_pack(&stores(), &config).unwrap();
        assert_eq!(pack.tasks.len(), 12);
        assert_eq!(pack.key.len(), 12);
        assert!(pack.tasks.iter().all(|t| t.sentences.len() == 10));
        assert_eq!(pack, build_pack(&stores(), &config).unwrap());
        let ids: HashSet<_> = pack.tasks.iter().map(|t| &t.task_id).collect();
        assert_eq!(ids.len(), 12);
        assert!(pack.tasks.iter().all(|t| t.task_id.len() == 32));
    }

    #[test]
    fn task_file_is_blind() {
        let pack = build_pack(&stores(), &PackConfig { neurons: 2, random_directions: 2, random_sets: 2, k: 10, seed: 1 }).unwrap();
        let text = pack.tasks_jsonl().unwrap();
        for needle in ["neuron", "random", "condition", "seed", "kind"] {
            assert!(!text.contains(needle), "task file mentions {needle}");
        }
        let keys: BTreeSet<Vec<String>> = text
            .lines()
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                let mut k: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
                k.sort();
                k
            })
            .collect();
        assert_eq!(keys.len(), 1);
    }

    #[test]
    fn pack_errors() {
        let s = stores();
        assert!(build_pack(&s, &PackConfig { neurons: 4, ..Default::default() }).is_err());
        let small = vec![s[0].subset(&[0, 1, 2]).unwrap()];
        assert!(build_pack(&small, &PackConfig::default()).is_err());
    }

    #[test]
    fn record_validation() {
        let tasks = vec![AnnotationTask {
            task_id: "t".into(),
            dataset: "d".into(),
            sentences: (0..10).map(|i| DisplaySentence { index: i, text: String::new() }).collect(),
        }];
        let mut set = RecordSet::new(&tasks);
        set.insert(record("t", "a", &[2])).unwrap();
        assert!(!set.records()[0].found_pattern());
        assert!(matches!(
            set.insert(record("t", "a", &[5])),
            Err(AnnotationError::Duplicate { .. })
        ));
        assert_eq!(set.records()[0].patterns[0].members.len(), 2);
        assert!(matches!(set.insert(record("x", "b", &[3])), Err(AnnotationError::UnknownTask(_))));
        assert!(matches!(set.insert(record("t", "b", &[11])), Err(AnnotationError::Malformed(_))));
        let mut both = record("t", "c", &[3]);
        both.no_pattern = true;
        assert!(matches!(set.insert(both), Err(AnnotationError::Malformed(_))));
        let mut dup = record("t", "d", &[3]);
        dup.patterns[0].members = vec![1, 1, 2];
        assert!(set.insert(dup).is_err());
    }

    #[test]
    fn ingest_keeps_first_duplicate() {
        let tasks = vec![AnnotationTask { task_id: "t".into(), dataset: "d".into(), sentences: (0..10).map(|i| DisplaySentence { index: i, text: String::new() }).collect() }];
        let lines = [record("t", "a", &[3]), record("t", "a", &[])]
            .iter()
            .map(|r| serde_json::to_string(r).unwrap())
            .collect::<Vec<_>>()
            .join("\n");
        let ing = ingest_records_str(&lines, &tasks).unwrap();
        assert_eq!(ing.records.len(), 1);
        assert!(ing.records.records()[0].found_pattern());
        assert_eq!(ing.duplicates.len(), 1);
        assert_eq!(ing.duplicates[0].line, 2);
        let empty = ingest_records_str("", &tasks).unwrap();
        let report = protocol_report(&tasks, &empty.records, &[KeyEntry { task_id: "t".into(), condition: Condition::Neuron { index: 0 }, sentence_ids: vec![] }], 2).unwrap();
        assert!(report.cells.iter().all(|c| c.tasks == 0));
        assert!(report.annotators.is_empty());
    }

    #[test]
    fn outcomes_and_exclusions() {
        let mk = |id: &str, ds: &str| AnnotationTask { task_id: id.into(), dataset: ds.into(), sentences: (0..10).map(|i| DisplaySentence { index: i, text: String::new() }).collect() };
        let tasks = vec![mk("a", "X"), mk("b", "X"), mk("c", "Y"), mk("d", "Y"), mk("e", "Y")];
        let key = vec![
            KeyEntry { task_id: "a".into(), condition: Condition::Neuron { index: 1 }, sentence_ids: vec![] },
            KeyEntry { task_id: "b".into(), condition: Condition::Neuron { index: 1 }, sentence_ids: vec![] },
            KeyEntry { task_id: "c".into(), condition: Condition::RandomSentences { seed: 3 }, sentence_ids: vec![] },
            KeyEntry { task_id: "d".into(), condition: Condition::RandomDirection { seed: 4 }, sentence_ids: vec![] },
            KeyEntry { task_id: "e".into(), condition: Condition::Neuron { index: 2 }, sentence_ids: vec![] },
        ];
        let mut set = RecordSet::new(&tasks);
        for r in [
            record("a", "p", &[3, 4]),
            record("a", "q", &[5]),
            record("b", "p", &[3]),
            record("b", "q", &[]),
            record("c", "p", &[2]),
            record("c", "q", &[]),
            record("d", "p", &[3]),
        ] {
            set.insert(r).unwrap();
        }
        let rep = protocol_report(&tasks, &set, &key, 2).unwrap();
        let cell = |g, d: &str| rep.cells.iter().find(|c| c.condition == g && c.dataset == d).unwrap().clone();
        let nx = cell(ConditionGroup::Neuron, "X");
        assert_eq!((nx.yes, nx.no, nx.conflicting), (1, 0, 1));
        assert_eq!(nx.yes_pct, 50.0);
        let ry = cell(ConditionGroup::RandomSentences, "Y");
        assert_eq!((ry.yes, ry.no, ry.conflicting), (0, 1, 0));
        assert_eq!(cell(ConditionGroup::Neuron, "all").tasks, 2);
        assert_eq!(rep.excluded, vec![ExcludedTask { task_id: "d".into(), annotations: 1 }]);
        assert_eq!(rep.unannotated, 1);
        let p = rep.annotators.iter().find(|a| a.annotator_id == "p").unwrap();
        assert_eq!((p.tasks_annotated, p.tasks_with_pattern, p.valid_patterns), (4, 3, 4));
        let neuron_sizes = &rep.pattern_sizes[0];
        assert_eq!(neuron_sizes.patterns, 4);
        assert_eq!(neuron_sizes.mean, (3.0 + 4.0 + 5.0 + 3.0) / 4.0);
    }

    #[test]
    fn distinct_counts() {
        let mk = |id: &str, ds: &str| AnnotationTask { task_id: id.into(), dataset: ds.into(), sentences: (0..10).map(|i| DisplaySentence { index: i, text: String::new() }).collect() };
        let tasks: Vec<_> = ["w", "x", "y", "z"].iter().zip(["A", "B", "C", "D"]).map(|(t, d)| mk(t, d)).collect();
        let key: Vec<_> = tasks.iter().map(|t| KeyEntry { task_id: t.task_id.clone(), condition: Condition::Neuron { index: 7 }, sentence_ids: vec![] }).collect();
        let mut set = RecordSet::new(&tasks);
        for t in &tasks {
            set.insert(record(&t.task_id, "p", &[3])).unwrap();
        }
        let unmerged = distinct_patterns(&set, &key, &BTreeMap::new()).unwrap();
        assert_eq!(unmerged.per_direction["neuron-7"], 4);
        let merge: BTreeMap<String, String> = set.records().iter().map(|r| (r.pattern_id(0), "quotes".to_string())).collect();
        let merged = distinct_patterns(&set, &key, &merge).unwrap();
        assert_eq!(merged.per_direction["neuron-7"], 1);
        assert_eq!(merged.mean, 1.0);
        let mut bad = merge.clone();
        bad.insert("nope/0/0".into(), "x".into());
        assert!(distinct_patterns(&set, &key, &bad).is_err());
    }
}
