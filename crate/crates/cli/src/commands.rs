use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use conceptscope_client::AnnotationClient;
use conceptscope_core::annotation::{self, AnnotationTask, KeyEntry, PackConfig, ProtocolReport};
use conceptscope_core::directions::{self, ActivationResult, Direction};
use conceptscope_core::geometry::{self, LocalityReport};
use conceptscope_core::separability::{self, TrainConfig};
use conceptscope_core::store::{self, EmbeddingStore, SentenceRecord, TokenScheme};
use conceptscope_core::synth::{self, BackgroundTokens, SynthSpec};
use conceptscope_core::tokenstats::{self, CountOptions, Orientation, VerdictMatrix};
use conceptscope_core::{rng, Error};
use conceptscope_service::{Service, ServiceConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::args::*;
use crate::output::{slug, OutDir};
use crate::{svg, Cli, CliError};

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: &Cli, argv: Vec<String>) -> Result<()> {
    match &cli.command {
        Command::Serve(a) => return serve(a),
        Command::Progress(a) => return progress(a),
        _ => {}
    }
    if cli.k == 0 {
        return Err(CliError::usage("--k must be at least 1"));
    }
    if cli.bins == 0 {
        return Err(CliError::usage("--bins must be at least 1"));
    }
    let mut out = OutDir::prepare(&cli.out, cli.force)?;
    match &cli.command {
        Command::Ingest(a) => ingest(a, &mut out)?,
        Command::Diagnose(a) => diagnose(a, &mut out)?,
        Command::Topk(a) => topk(cli, a, &mut out)?,
        Command::Overlap(a) => overlap(cli, a, &mut out)?,
        Command::Separate(a) => separate(cli, a, &mut out)?,
        Command::Project(a) => project(cli, a, &mut out)?,
        Command::Monotonic(a) => monotonic(cli, a, &mut out)?,
        Command::Locality(a) => locality(cli, a, &mut out)?,
        Command::Outliers(a) => outliers(cli, a, &mut out)?,
        Command::Synth(a) => synth_cmd(cli, a, &mut out)?,
        Command::Pack(a) => pack(cli, a, &mut out)?,
        Command::Report(a) => report(a, &mut out)?,
        Command::Serve(_) | Command::Progress(_) => unreachable!(),
    }
    out.finish(argv, cli.seed())
}

/// One store per dataset, in the order the datasets first appear.
fn load_units(args: &StoreArgs, out: &mut OutDir) -> Result<Vec<EmbeddingStore>> {
    let mut units = Vec::new();
    let mut seen = HashSet::new();
    for path in &args.stores {
        out.input(path);
        out.input(&store::metadata_path(path));
        let s = store::load_store(path)?;
        for (tag, part) in s.partitions()? {
            if !args.datasets.is_empty() && !args.datasets.contains(&tag) {
                continue;
            }
            if !seen.insert(tag.clone()) {
                return Err(CliError::data(
                    "duplicate-dataset",
                    format!("dataset {tag:?} appears in more than one store"),
                ));
            }
            units.push(part);
        }
    }
    for tag in &args.datasets {
        if !seen.contains(tag) {
            return Err(Error::UnknownDataset(tag.clone()).into());
        }
    }
    if units.is_empty() {
        return Err(Error::EmptyStore.into());
    }
    let dim = units[0].dim();
    if let Some(u) = units.iter().find(|u| u.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: u.dim(),
        }
        .into());
    }
    Ok(units)
}

fn whole(units: &[EmbeddingStore]) -> Result<EmbeddingStore> {
    Ok(EmbeddingStore::concat(units)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct DirectionFileEntry {
    name: String,
    vector: Vec<f64>,
}

fn resolve_directions(
    args: &DirectionArgs,
    dim: usize,
    seed: u64,
    out: &mut OutDir,
    default_all: bool,
) -> Result<Vec<Direction>> {
    let mut dirs = Vec::new();
    for &n in &args.neurons {
        dirs.push(Direction::neuron(n, dim)?);
    }
    if args.all_neurons {
        dirs.extend(directions::all_neurons(dim));
    }
    if args.random > 0 {
        dirs.extend(directions::random_directions(seed, args.random, dim)?);
    }
    if let Some(path) = &args.direction_file {
        out.input(path);
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let entries: Vec<DirectionFileEntry> = serde_json::from_str(&text)
            .map_err(|e| CliError::data("bad-directions", format!("{}: {e}", path.display())))?;
        for e in entries {
            if e.vector.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: e.vector.len(),
                }
                .into());
            }
            dirs.push(Direction::custom(e.name, e.vector)?);
        }
    }
    if dirs.is_empty() {
        if default_all {
            return Ok(directions::all_neurons(dim));
        }
        return Err(CliError::usage(
            "select directions with --neuron, --all-neurons, --random or --directions",
        ));
    }
    Ok(dirs)
}

fn label(d: &Direction) -> String {
    slug(&d.kind.to_string())
}

#[derive(Deserialize)]
struct TextLine {
    text: String,
    #[serde(default)]
    dataset: Option<String>,
    #[serde(default)]
    tokens: Option<Vec<String>>,
}

fn ingest(a: &IngestArgs, out: &mut OutDir) -> Result<()> {
    out.input(&a.texts);
    out.input(&a.embeddings);
    let text = std::fs::read_to_string(&a.texts).map_err(|e| CliError::io(&a.texts, e))?;
    let mut lines = Vec::new();
    for (i, l) in text.lines().enumerate() {
        if l.trim().is_empty() {
            continue;
        }
        let line: TextLine = serde_json::from_str(l).map_err(|e| Error::InvalidMetadata {
            line: i + 1,
            message: e.to_string(),
        })?;
        lines.push((i + 1, line));
    }
    let (dim, matrix) = store::read_matrix(&a.embeddings)?;
    let rows = matrix.len() / dim;
    if rows != lines.len() {
        return Err(Error::RowCountMismatch {
            header: rows,
            metadata: lines.len(),
        }
        .into());
    }
    let with_tokens = lines.iter().filter(|(_, l)| l.tokens.is_some()).count();
    if with_tokens != 0 && with_tokens != lines.len() {
        return Err(CliError::data(
            "mixed-tokens",
            "either every line or no line may carry its own tokens",
        ));
    }
    let scheme = if with_tokens > 0 && !lines.is_empty() {
        TokenScheme::Model
    } else {
        TokenScheme::Whitespace
    };
    let mut records = Vec::with_capacity(lines.len());
    for (id, (line_no, l)) in lines.into_iter().enumerate() {
        let dataset = l.dataset.or_else(|| a.dataset.clone()).ok_or_else(|| {
            CliError::data(
                "missing-dataset",
                format!("line {line_no} has no dataset and no --dataset was given"),
            )
        })?;
        let mut r = SentenceRecord::new(id as u64, dataset, l.text);
        if let Some(t) = l.tokens {
            r.tokens = t;
        }
        records.push(r);
    }
    let mut s = EmbeddingStore::new(dim, matrix, records, false, scheme)?;
    if a.normalize {
        s = s.to_normalized()?;
    }
    let name = format!("{}.embs", a.name);
    let path = out.produced(&name);
    out.produced(&format!("{}.meta.jsonl", a.name));
    store::write_store(&s, &path)?;
    Ok(())
}

fn diagnose(a: &StoreArgs, out: &mut OutDir) -> Result<()> {
    let units = load_units(a, out)?;
    let mut datasets = Vec::new();
    for u in &units {
        datasets.push(json!({
            "dataset": u.dataset_label(),
            "report": store::norm_diagnostics(u)?,
        }));
    }
    let all = store::norm_diagnostics(&whole(&units)?)?;
    out.write_json("norms.json", &json!({ "all": all, "datasets": datasets }))
}

fn topk(cli: &Cli, a: &DirectedArgs, out: &mut OutDir) -> Result<()> {
    let units = load_units(&a.stores, out)?;
    let dirs = resolve_directions(&a.directions, units[0].dim(), cli.seed(), out, false)?;
    for u in &units {
        for d in &dirs {
            let r = directions::top_k(u, d, cli.k)?.with_origin_ids(u);
            let name = format!("topk-{}-{}.json", slug(&r.dataset), label(d));
            out.write_json(&name, &r)?;
        }
    }
    Ok(())
}

fn overlap(cli: &Cli, a: &DirectedArgs, out: &mut OutDir) -> Result<()> {
    let units = load_units(&a.stores, out)?;
    let dirs = resolve_directions(&a.directions, units[0].dim(), cli.seed(), out, true)?;
    let summary = directions::overlap_rate(&units, &dirs, cli.k)?;
    out.write_json("overlap.json", &summary)
}

fn separate(cli: &Cli, a: &SeparateArgs, out: &mut OutDir) -> Result<()> {
    let data = whole(&load_units(&a.stores, out)?)?;
    let (train, test) = separability::split(&data, a.test_fraction, cli.seed())?;
    let config = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.learning_rate,
        lambda: a.lambda,
        seed: cli.seed(),
        standardize: a.standardize,
    };
    let model = separability::train_classifier(&train, &config)?;
    let matrix = separability::confusion(&model, &test)?;
    out.write("confusion.csv", matrix.to_csv())?;
    out.write_json(
        "separability.json",
        &json!({
            "classes": model.classes,
            "train_rows": train.len(),
            "test_rows": test.len(),
            "test_fraction": a.test_fraction,
            "train_accuracy": model.accuracy(&train),
            "test_accuracy": matrix.accuracy(),
            "confusion": matrix,
            "config": config,
        }),
    )?;
    out.write_json("model.json", &model)
}

fn project(cli: &Cli, a: &StoreArgs, out: &mut OutDir) -> Result<()> {
    let data = whole(&load_units(a, out)?)?;
    let p = separability::project_2d(&data, cli.seed())?;
    out.write("projection.csv", p.to_csv(&data))?;
    out.write_json(
        "projection.json",
        &json!({ "rows": data.len(), "variance": p.variance, "degenerate": p.degenerate }),
    )
}

fn monotonic(cli: &Cli, a: &MonotonicArgs, out: &mut OutDir) -> Result<()> {
    let units = load_units(&a.stores, out)?;
    let dirs = resolve_directions(&a.directions, units[0].dim(), cli.seed(), out, true)?;
    let options = CountOptions {
        presence: a.presence,
    };
    let tokens = if a.tokens.is_empty() {
        tokenstats::eligible_tokens(&units, a.min_count, options)
    } else {
        a.tokens.clone()
    };
    if tokens.is_empty() {
        return Err(CliError::data(
            "no-tokens",
            format!("no token occurs at least {} times in every dataset", a.min_count),
        ));
    }
    let matrix = VerdictMatrix::compute(&units, &dirs, &tokens, options)?;
    let same = matrix.combination_table(Orientation::Same);
    let any = matrix.combination_table(Orientation::Any);
    let ranking = matrix.most_monotonic(Orientation::Same);
    out.write("combinations.csv", same.to_csv())?;
    out.write("combinations-any.csv", any.to_csv())?;
    let mut csv = String::from("token,directions\n");
    for (t, n) in &ranking {
        csv.push_str(&format!("{t},{n}\n"));
    }
    out.write("ranking.csv", csv)?;
    out.write_json(
        "monotonic.json",
        &json!({
            "datasets": matrix.datasets,
            "directions": dirs.len(),
            "tokens": tokens,
            "pairs": matrix.pairs(),
            "presence": a.presence,
            "same": same,
            "any": any,
            "ranking": ranking.iter().map(|(t, n)| json!({"token": t, "directions": n})).collect::<Vec<_>>(),
        }),
    )
}

#[derive(Serialize)]
struct GroupedReport<'a> {
    group: &'a str,
    #[serde(flatten)]
    report: &'a LocalityReport,
}

fn locality(cli: &Cli, a: &LocalityArgs, out: &mut OutDir) -> Result<()> {
    let units = load_units(&a.stores, out)?;
    let dim = units[0].dim();
    let selected = resolve_directions(&a.directions, dim, cli.seed(), out, false)?;
    let baseline_seed = rng::derive(cli.seed(), &[rng::label("locality-baseline")]);
    let baseline = directions::random_directions(baseline_seed, a.baseline, dim)?;

    let mut reports: Vec<(&str, LocalityReport)> = Vec::new();
    for u in &units {
        for (group, dirs) in [("selected", &selected), ("baseline", &baseline)] {
            for d in dirs.iter() {
                reports.push((group, geometry::locality_score(u, d, cli.k, cli.bins, cli.seed())?));
            }
        }
    }

    let mut csv = String::from("dataset,direction,group,set,bin,lo,hi,count\n");
    for (group, r) in &reports {
        for (set, h) in [("nearest", &r.h_nearest), ("top", &r.h_top), ("random", &r.h_random)] {
            for (b, c) in h.bins.iter().enumerate() {
                csv.push_str(&format!(
                    "{},{},{group},{set},{b},{},{},{c}\n",
                    r.dataset,
                    r.direction.kind,
                    h.edge(b),
                    h.edge(b + 1)
                ));
            }
        }
        if !a.no_svg {
            let name = format!("locality-{}-{}.svg", slug(&r.dataset), label(&r.direction));
            out.write(&name, svg::locality_plot(r))?;
        }
    }
    out.write("locality-hist.csv", csv)?;

    let mut comparisons = Vec::new();
    if !baseline.is_empty() {
        let mut compare = |dataset: String, pick: &dyn Fn(&LocalityReport) -> bool| -> Result<()> {
            let of = |g: &str| -> Vec<f64> {
                reports
                    .iter()
                    .filter(|(group, r)| *group == g && pick(r))
                    .map(|(_, r)| r.locality)
                    .collect()
            };
            let c = geometry::locality_compare(&of("selected"), &of("baseline"))?;
            comparisons.push(json!({ "dataset": dataset, "comparison": c }));
            Ok(())
        };
        for u in &units {
            let tag = u.dataset_label();
            compare(tag.clone(), &|r| r.dataset == tag)?;
        }
        if units.len() > 1 {
            compare("all".into(), &|_| true)?;
        }
    }
    let listed: Vec<GroupedReport> = reports
        .iter()
        .map(|(group, report)| GroupedReport { group, report })
        .collect();
    out.write_json(
        "locality.json",
        &json!({ "k": cli.k, "bins": cli.bins, "reports": listed, "comparisons": comparisons }),
    )
}

fn outliers(cli: &Cli, a: &OutlierArgs, out: &mut OutDir) -> Result<()> {
    let units = load_units(&a.stores, out)?;
    let dirs = resolve_directions(&a.directions, units[0].dim(), cli.seed(), out, true)?;
    for &f in &a.fractions {
        if !(f > 0.0 && f < 1.0) {
            return Err(CliError::usage(format!("fraction {f} must lie strictly between 0 and 1")));
        }
    }
    let mut per_dataset = Vec::new();
    let mut rankings = Vec::new();
    for u in &units {
        let means = geometry::mean_distances(u)?;
        let ranking = geometry::rank_by_mean_distance(&means);
        let results = dirs
            .iter()
            .map(|d| directions::top_k(u, d, cli.k))
            .collect::<conceptscope_core::Result<Vec<ActivationResult>>>()?;
        let counts = geometry::membership_counts(&results);
        let ranked_ids: Vec<u64> = ranking.iter().map(|&i| i as u64).collect();

        let mut csv = String::from("rank,id,mean_distance,top_k_count\n");
        for (rank, &i) in ranking.iter().enumerate() {
            csv.push_str(&format!(
                "{rank},{},{},{}\n",
                u.record(i).origin_id(),
                means[i],
                counts.get(&(i as u64)).copied().unwrap_or(0)
            ));
        }
        let tag = u.dataset_label();
        out.write(&format!("outliers-{}.csv", slug(&tag)), csv)?;
        let shares: Vec<_> = a
            .fractions
            .iter()
            .map(|&f| {
                json!({
                    "fraction": f,
                    "removed": geometry::trim_count(u.len(), f),
                    "share": geometry::outlier_share(&ranked_ids, &counts, f),
                })
            })
            .collect();
        per_dataset.push(json!({ "dataset": tag, "rows": u.len(), "shares": shares }));
        rankings.push(ranking);
    }

    let overlap = if units.len() > 1 {
        let mut trimmed_runs = Vec::new();
        for &f in &a.fractions {
            let trimmed = units
                .iter()
                .zip(&rankings)
                .map(|(u, r)| geometry::trim_ranked(u, r, f))
                .collect::<conceptscope_core::Result<Vec<_>>>()?;
            trimmed_runs.push(json!({
                "fraction": f,
                "summary": directions::overlap_rate(&trimmed, &dirs, cli.k)?,
            }));
        }
        json!({
            "untrimmed": directions::overlap_rate(&units, &dirs, cli.k)?,
            "trimmed": trimmed_runs,
        })
    } else {
        serde_json::Value::Null
    };
    out.write_json(
        "outliers.json",
        &json!({ "k": cli.k, "directions": dirs.len(), "datasets": per_dataset, "overlap": overlap }),
    )
}

fn parse_dataset(s: &str) -> Result<(String, usize)> {
    let (name, rows) = s
        .split_once(':')
        .ok_or_else(|| CliError::usage(format!("dataset {s:?} is not of the form name:rows")))?;
    let rows = rows
        .parse()
        .map_err(|_| CliError::usage(format!("bad row count in {s:?}")))?;
    Ok((name.to_string(), rows))
}

fn synth_cmd(cli: &Cli, a: &SynthArgs, out: &mut OutDir) -> Result<()> {
    let spec = match &a.spec {
        Some(path) => {
            out.input(path);
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let mut spec: SynthSpec = serde_json::from_str(&text)
                .map_err(|e| CliError::data("bad-spec", format!("{}: {e}", path.display())))?;
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            spec
        }
        None => {
            if a.datasets.is_empty() {
                return Err(CliError::usage("give --spec or at least one --dataset name:rows"));
            }
            let parsed = a
                .datasets
                .iter()
                .map(|d| parse_dataset(d))
                .collect::<Result<Vec<_>>>()?;
            let borrowed: Vec<(&str, usize)> = parsed.iter().map(|(n, r)| (n.as_str(), *r)).collect();
            let mut spec = SynthSpec::null(a.dim, &borrowed, cli.seed());
            spec.background = BackgroundTokens {
                vocabulary: a.vocabulary,
                rate: a.rate,
            };
            spec
        }
    };
    let generated = synth::generate(&spec)?;
    let path = out.produced(&format!("{}.embs", a.name));
    out.produced(&format!("{}.meta.jsonl", a.name));
    store::write_store(&generated.store, &path)?;
    out.write(&format!("{}.truth.jsonl", a.name), generated.truth_jsonl()?)?;
    let dirs: Vec<DirectionFileEntry> = generated
        .directions
        .iter()
        .map(|(name, d)| DirectionFileEntry {
            name: name.clone(),
            vector: d.vector().to_vec(),
        })
        .collect();
    out.write_json(&format!("{}.directions.json", a.name), &dirs)?;
    out.write_json(&format!("{}.spec.json", a.name), &spec)
}

fn pack(cli: &Cli, a: &PackArgs, out: &mut OutDir) -> Result<()> {
    let units = load_units(&a.stores, out)?;
    let config = PackConfig {
        neurons: a.neurons,
        random_directions: a.random_directions,
        random_sets: a.random_sets,
        k: cli.k,
        seed: cli.seed(),
    };
    let pack = annotation::build_pack(&units, &config)?;
    out.write("tasks.jsonl", pack.tasks_jsonl()?)?;
    out.write("key.jsonl", pack.key_jsonl()?)
}

fn table_csv(report: &ProtocolReport) -> String {
    let mut csv = String::from("condition,dataset,tasks,yes,no,conflicting,yes_pct,no_pct,conflicting_pct\n");
    for c in &report.cells {
        let condition = serde_json::to_value(c.condition)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        csv.push_str(&format!(
            "{condition},{},{},{},{},{},{},{},{}\n",
            c.dataset, c.tasks, c.yes, c.no, c.conflicting, c.yes_pct, c.no_pct, c.conflicting_pct
        ));
    }
    csv
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| CliError::usage(format!("{flag} is required without --url")))
}

fn report(a: &ReportArgs, out: &mut OutDir) -> Result<()> {
    let report = if let Some(url) = &a.url {
        let client = AnnotationClient::new(url.clone());
        runtime()?.block_on(client.report())?
    } else {
        let tasks_path = required(&a.tasks, "--tasks")?;
        let records_path = required(&a.records, "--records")?;
        let key_path = required(&a.key_file, "--key-file")?;
        for p in [tasks_path, records_path, key_path] {
            out.input(p);
        }
        let tasks: Vec<AnnotationTask> = annotation::read_jsonl(tasks_path)?;
        let key: Vec<KeyEntry> = annotation::read_jsonl(key_path)?;
        let ingested = annotation::ingest_records(records_path, &tasks)?;
        for d in &ingested.duplicates {
            eprintln!(
                "warning: {}:{}: repeated submission of task {} by {} ignored",
                records_path.display(),
                d.line,
                d.task_id,
                d.annotator_id
            );
        }
        let merge: BTreeMap<String, String> = match &a.merge_map {
            Some(p) => {
                out.input(p);
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::data("bad-merge-map", format!("{}: {e}", p.display())))?
            }
            None => BTreeMap::new(),
        };
        let mut report =
            annotation::protocol_report(&tasks, &ingested.records, &key, a.annotators_per_task)?;
        report.distinct_patterns = Some(annotation::distinct_patterns(&ingested.records, &key, &merge)?);
        if !ingested.duplicates.is_empty() {
            out.write_json("duplicates.json", &ingested.duplicates)?;
        }
        report
    };
    out.write("table.csv", table_csv(&report))?;
    out.write_json("report.json", &report)
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::data("runtime", e.to_string()))
}

fn serve(a: &ServeArgs) -> Result<()> {
    let config = ServiceConfig {
        tasks: a.tasks.clone(),
        records: a.records.clone(),
        key: a.key_file.clone(),
        annotators_per_task: a.annotators_per_task,
        addr: a.addr,
    };
    runtime()?.block_on(async {
        let service = Service::bind(&config).await?;
        eprintln!("listening on http://{}", service.local_addr());
        service.run().await?;
        Ok(())
    })
}

fn progress(a: &ProgressArgs) -> Result<()> {
    let client = AnnotationClient::new(a.url.clone());
    let p = runtime()?.block_on(client.progress())?;
    println!(
        "{}",
        serde_json::to_string_pretty(&p).map_err(|e| CliError::data("json", e.to_string()))?
    );
    Ok(())
}
