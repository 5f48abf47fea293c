use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_conceptscope"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth_four(dir: &Path) -> PathBuf {
    ok(
        dir,
        &["synth", "--dim", "300", "--dataset", "qqp:60,qnli:60,wiki:60,books:60", "--out", "s", "--seed", "4"],
    );
    dir.join("s/synth.embs")
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let d = TempDir::new().unwrap();
    let o = run(d.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("E:usage:"));
    let o = run(d.path(), &["topk"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_documents_flags() {
    let d = TempDir::new().unwrap();
    let o = ok(d.path(), &["--help"]);
    let text = String::from_utf8_lossy(&o.stdout);
    for flag in ["--seed", "--k", "--bins", "--out", "--force"] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
}

#[test]
fn data_errors_exit_one_with_a_code() {
    let d = TempDir::new().unwrap();
    fs::write(d.path().join("bad.embs"), b"NOPE").unwrap();
    fs::write(d.path().join("bad.meta.jsonl"), b"").unwrap();
    let o = run(d.path(), &["diagnose", "bad.embs"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("E:malformed-header:"), "{}", stderr(&o));

    let store = synth_four(d.path());
    let o = run(d.path(), &["topk", store.to_str().unwrap(), "--neuron", "300"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("E:out-of-range:"), "{}", stderr(&o));
    let o = run(d.path(), &["diagnose", store.to_str().unwrap(), "--dataset", "nope", "--out", "x"]);
    assert!(stderr(&o).starts_with("E:unknown-dataset:"));
}

#[test]
fn topk_writes_one_file_per_store_with_ten_entries() {
    let d = TempDir::new().unwrap();
    let store = synth_four(d.path());
    // split the store into four single-dataset files
    let mut paths = Vec::new();
    for tag in ["qqp", "qnli", "wiki", "books"] {
        let out = format!("p-{tag}");
        let s = conceptscope_core::store::load_store(&store).unwrap();
        let part = s.partition(tag).unwrap();
        let p = d.path().join(format!("{out}.embs"));
        conceptscope_core::store::write_store(&part, &p).unwrap();
        paths.push(p);
    }
    let mut args = vec!["topk".to_string()];
    args.extend(paths.iter().map(|p| p.display().to_string()));
    args.extend(["--neuron", "221", "--k", "10", "--out", "top"].map(String::from));
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(d.path(), &argv);
    let files: Vec<_> = fs::read_dir(d.path().join("top"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("topk-"))
        .collect();
    assert_eq!(files.len(), 4);
    for f in files {
        let v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(d.path().join("top").join(f)).unwrap()).unwrap();
        assert_eq!(v["entries"].as_array().unwrap().len(), 10);
        assert_eq!(v["direction"]["index"], 221);
    }
}

#[test]
fn topk_reports_ids_of_the_input_file() {
    let d = TempDir::new().unwrap();
    let store = synth_four(d.path());
    ok(d.path(), &["topk", store.to_str().unwrap(), "--neuron", "5", "--dataset", "wiki", "--out", "t"]);
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.path().join("t/topk-wiki-neuron-5.json")).unwrap()).unwrap();
    let s = conceptscope_core::store::load_store(&store).unwrap();
    for e in v["entries"].as_array().unwrap() {
        let id = e["id"].as_u64().unwrap() as usize;
        let score = e["score"].as_f64().unwrap();
        assert_eq!(s.record(id).dataset, "wiki");
        assert_eq!(f64::from(s.row(id)[5]), score);
    }
}

#[test]
fn reruns_refuse_to_overwrite_without_force() {
    let d = TempDir::new().unwrap();
    let store = synth_four(d.path());
    let s = store.to_str().unwrap();
    ok(d.path(), &["diagnose", s, "--out", "diag"]);
    let o = run(d.path(), &["diagnose", s, "--out", "diag"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("E:output-exists:"));
    ok(d.path(), &["diagnose", s, "--out", "diag", "--force"]);
}

#[test]
fn manifest_lists_digests_and_outputs() {
    let d = TempDir::new().unwrap();
    let store = synth_four(d.path());
    ok(d.path(), &["overlap", store.to_str().unwrap(), "--out", "ov", "--seed", "9"]);
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.path().join("ov/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 9);
    assert_eq!(m["outputs"], serde_json::json!(["overlap.json"]));
    let inputs = m["inputs"].as_array().unwrap();
    assert_eq!(inputs.len(), 2);
    for i in inputs {
        assert_eq!(i["sha256"].as_str().unwrap().len(), 64);
    }
}

#[test]
fn ingest_builds_a_store_from_text_and_matrix() {
    let d = TempDir::new().unwrap();
    fs::write(
        d.path().join("texts.jsonl"),
        "{\"text\": \"The quick fox.\", \"dataset\": \"wiki\"}\n{\"text\": \"Is it raining?\"}\n{\"text\": \"\\\"Quoted\\\" words\"}\n",
    )
    .unwrap();
    fs::write(d.path().join("emb.txt"), "3 4\n1 0\n1,1\n").unwrap();
    ok(
        d.path(),
        &["ingest", "--texts", "texts.jsonl", "--embeddings", "emb.txt", "--dataset", "qqp", "--out", "st"],
    );
    let s = conceptscope_core::store::load_store(&d.path().join("st/store.embs")).unwrap();
    assert_eq!((s.len(), s.dim()), (3, 2));
    assert_eq!(s.record(0).dataset, "wiki");
    assert_eq!(s.record(1).dataset, "qqp");
    assert_eq!(s.record(0).tokens, ["the", "quick", "fox", "."]);
    assert!(s.record(2).tokens.contains(&"\"".to_string()));
    assert!(!s.is_normalized());

    fs::write(d.path().join("short.txt"), "3 4\n").unwrap();
    let o = run(
        d.path(),
        &["ingest", "--texts", "texts.jsonl", "--embeddings", "short.txt", "--dataset", "q", "--out", "x"],
    );
    assert!(stderr(&o).starts_with("E:row-count-mismatch:"), "{}", stderr(&o));

    ok(
        d.path(),
        &["ingest", "--texts", "texts.jsonl", "--embeddings", "emb.txt", "--dataset", "qqp", "--normalize", "--out", "nz"],
    );
    let o = ok(d.path(), &["diagnose", "nz/store.embs", "--out", "nzd"]);
    drop(o);
    let n: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.path().join("nzd/norms.json")).unwrap()).unwrap();
    assert!((n["all"]["max_norm"].as_f64().unwrap() - 1.0).abs() < 1e-6);
}

#[test]
fn synth_null_store_calibrates_monotonic_fraction() {
    let d = TempDir::new().unwrap();
    ok(
        d.path(),
        &["synth", "--dim", "200", "--dataset", "a:2000", "--vocabulary", "20", "--rate", "3", "--out", "s"],
    );
    ok(d.path(), &["monotonic", "s/synth.embs", "--min-count", "100", "--out", "m"]);
    let csv = fs::read_to_string(d.path().join("m/combinations.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "a");
    let frac: f64 = row[1].parse().unwrap();
    // 4000 pairs; the binomial standard error around 1/60 is 0.2 pp
    assert!((frac - 1.0 / 60.0).abs() < 0.008, "monotonic fraction {frac}");
}

#[test]
fn annotation_round_trip_through_report() {
    let d = TempDir::new().unwrap();
    let store = synth_four(d.path());
    ok(d.path(), &["pack", store.to_str().unwrap(), "--neurons", "2", "--out", "pack"]);
    let tasks = fs::read_to_string(d.path().join("pack/tasks.jsonl")).unwrap();
    assert_eq!(tasks.lines().count(), 16);
    assert!(!tasks.contains("neuron") && !tasks.contains("random"));

    let mut records = String::new();
    for (i, line) in tasks.lines().enumerate() {
        let t: serde_json::Value = serde_json::from_str(line).unwrap();
        let id = t["task_id"].as_str().unwrap();
        for who in ["ann-a", "ann-b"] {
            let found = (i + (who == "ann-b") as usize) % 3 != 0;
            let rec = if found {
                serde_json::json!({"task_id": id, "annotator_id": who, "patterns": [{"description": "x", "members": [0, 1, 2]}], "no_pattern": false})
            } else {
                serde_json::json!({"task_id": id, "annotator_id": who, "patterns": [], "no_pattern": true})
            };
            records.push_str(&rec.to_string());
            records.push('\n');
        }
    }
    fs::write(d.path().join("records.jsonl"), records).unwrap();
    ok(
        d.path(),
        &["report", "--tasks", "pack/tasks.jsonl", "--records", "records.jsonl", "--key-file", "pack/key.jsonl", "--out", "rep"],
    );
    let r: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.path().join("rep/report.json")).unwrap()).unwrap();
    let mut total = 0;
    for c in r["cells"].as_array().unwrap() {
        if c["dataset"] == "all" {
            total += c["tasks"].as_u64().unwrap();
        }
    }
    assert_eq!(total, 16);
    assert!(d.path().join("rep/table.csv").exists());
}
