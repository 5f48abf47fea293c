use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Audit candidate concept directions in sentence-embedding stores.
#[derive(Debug, Parser)]
#[command(name = "conceptscope", version, propagate_version = true)]
pub struct Cli {
    /// Seed for every randomized step [default: 0].
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Number of top activating sentences per direction.
    #[arg(long, global = true, default_value_t = 10)]
    pub k: usize,

    /// Histogram bins for locality scores.
    #[arg(long, global = true, default_value_t = 50)]
    pub bins: usize,

    /// Output directory; receives the data files and manifest.json.
    #[arg(long, global = true, default_value = "conceptscope-out")]
    pub out: PathBuf,

    /// Overwrite an output directory that already holds a manifest.
    #[arg(long, global = true)]
    pub force: bool,

    #[command(subcommand)]
    pub command: Command,
}

impl Cli {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a store from a text JSONL file and an embedding matrix.
    Ingest(IngestArgs),
    /// Norm and value statistics per dataset.
    Diagnose(StoreArgs),
    /// Top activating sentences per dataset and direction.
    Topk(DirectedArgs),
    /// Rate at which top-k activation ranges overlap across datasets.
    Overlap(DirectedArgs),
    /// Train a linear dataset classifier and report its confusion matrix.
    Separate(SeparateArgs),
    /// Two-dimensional principal component projection.
    Project(StoreArgs),
    /// Token monotonicity across activation quintiles.
    Monotonic(MonotonicArgs),
    /// Locality scores, histograms and plots.
    Locality(LocalityArgs),
    /// Outlier ranking, top-k membership and trimmed reruns.
    Outliers(OutlierArgs),
    /// Generate a synthetic store with planted concepts.
    Synth(SynthArgs),
    /// Build a blinded annotation pack.
    Pack(PackArgs),
    /// Run the annotation service.
    Serve(ServeArgs),
    /// Agreement report over annotation records.
    Report(ReportArgs),
    /// Print progress of a running annotation service.
    Progress(ProgressArgs),
}

#[derive(Debug, Args)]
pub struct StoreArgs {
    /// Store files (`.embs`, with the `.meta.jsonl` sidecar next to them).
    #[arg(required = true)]
    pub stores: Vec<PathBuf>,

    /// Only use these dataset tags.
    #[arg(long = "dataset", value_delimiter = ',')]
    pub datasets: Vec<String>,
}

#[derive(Debug, Args, Default)]
pub struct DirectionArgs {
    /// Neuron (coordinate) directions.
    #[arg(long = "neuron", value_delimiter = ',')]
    pub neurons: Vec<usize>,

    /// Every neuron direction.
    #[arg(long)]
    pub all_neurons: bool,

    /// Number of random unit directions, derived from --seed.
    #[arg(long = "random", default_value_t = 0)]
    pub random: usize,

    /// JSON file with custom directions: `[{"name": ..., "vector": [...]}]`.
    #[arg(long = "directions")]
    pub direction_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DirectedArgs {
    #[command(flatten)]
    pub stores: StoreArgs,
    #[command(flatten)]
    pub directions: DirectionArgs,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// JSONL with one `{"text": ..., "dataset"?: ..., "tokens"?: [...]}` per row.
    #[arg(long)]
    pub texts: PathBuf,

    /// Embedding matrix: a store file or a whitespace/comma separated text matrix.
    #[arg(long)]
    pub embeddings: PathBuf,

    /// Dataset tag for rows that do not carry one.
    #[arg(long)]
    pub dataset: Option<String>,

    /// Normalize every row to unit length.
    #[arg(long)]
    pub normalize: bool,

    /// Base name of the written store.
    #[arg(long, default_value = "store")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct SeparateArgs {
    #[command(flatten)]
    pub stores: StoreArgs,

    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,

    #[arg(long, default_value_t = 20)]
    pub epochs: usize,

    #[arg(long, default_value_t = 0.01)]
    pub learning_rate: f64,

    #[arg(long, default_value_t = 1e-4)]
    pub lambda: f64,

    /// Standardize features with training-set statistics.
    #[arg(long)]
    pub standardize: bool,
}

#[derive(Debug, Args)]
pub struct MonotonicArgs {
    #[command(flatten)]
    pub stores: StoreArgs,
    #[command(flatten)]
    pub directions: DirectionArgs,

    /// Minimum occurrences in every dataset for a token to be analysed.
    #[arg(long, default_value_t = 100)]
    pub min_count: usize,

    /// Analyse exactly these tokens instead.
    #[arg(long = "token", value_delimiter = ',')]
    pub tokens: Vec<String>,

    /// Count sentences containing a token rather than occurrences.
    #[arg(long)]
    pub presence: bool,
}

#[derive(Debug, Args)]
pub struct LocalityArgs {
    #[command(flatten)]
    pub stores: StoreArgs,
    #[command(flatten)]
    pub directions: DirectionArgs,

    /// Random baseline directions compared against the selected ones.
    #[arg(long, default_value_t = 0)]
    pub baseline: usize,

    /// Skip the SVG plots.
    #[arg(long)]
    pub no_svg: bool,
}

#[derive(Debug, Args)]
pub struct OutlierArgs {
    #[command(flatten)]
    pub stores: StoreArgs,
    #[command(flatten)]
    pub directions: DirectionArgs,

    /// Fractions of most distant sentences to measure and trim.
    #[arg(long = "fraction", value_delimiter = ',', default_values_t = [0.01, 0.1])]
    pub fractions: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON generator spec; its seed is replaced by --seed when given.
    #[arg(long, conflicts_with_all = ["dim", "datasets"])]
    pub spec: Option<PathBuf>,

    /// Dimension of a null (concept-free) store.
    #[arg(long, default_value_t = 768)]
    pub dim: usize,

    /// Datasets of a null store as `name:rows`.
    #[arg(long = "dataset", value_delimiter = ',')]
    pub datasets: Vec<String>,

    /// Background vocabulary size of a null store.
    #[arg(long, default_value_t = 20)]
    pub vocabulary: usize,

    /// Mean occurrences per sentence of each background token.
    #[arg(long, default_value_t = 1.0)]
    pub rate: f64,

    #[arg(long, default_value = "synth")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct PackArgs {
    #[command(flatten)]
    pub stores: StoreArgs,

    #[arg(long, default_value_t = 1)]
    pub neurons: usize,

    #[arg(long, default_value_t = 1)]
    pub random_directions: usize,

    #[arg(long, default_value_t = 1)]
    pub random_sets: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Task file written by `pack`.
    #[arg(long)]
    pub tasks: PathBuf,

    /// Append-only record log; created when missing.
    #[arg(long)]
    pub records: PathBuf,

    /// Condition key; enables /api/report.
    #[arg(long)]
    pub key_file: Option<PathBuf>,

    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,

    #[arg(long, default_value_t = 2)]
    pub annotators_per_task: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, required_unless_present = "url")]
    pub tasks: Option<PathBuf>,

    #[arg(long, required_unless_present = "url")]
    pub records: Option<PathBuf>,

    #[arg(long, required_unless_present = "url")]
    pub key_file: Option<PathBuf>,

    /// JSON object mapping pattern ids to merged class names.
    #[arg(long)]
    pub merge_map: Option<PathBuf>,

    #[arg(long, default_value_t = 2)]
    pub annotators_per_task: usize,

    /// Fetch the report from a running service instead.
    #[arg(long, conflicts_with_all = ["tasks", "records", "key_file", "merge_map"])]
    pub url: Option<String>,
}

#[derive(Debug, Args)]
pub struct ProgressArgs {
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    pub url: String,
}
