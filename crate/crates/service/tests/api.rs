use std::collections::{HashMap, HashSet};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use conceptscope_client::AnnotationClient;
use conceptscope_core::annotation::{
    build_pack, AnnotationRecord, AnnotationTask, PackConfig, Pattern,
};
use conceptscope_core::store::SentenceRecord;
use conceptscope_core::EmbeddingStore;
use std::sync::Arc;

use conceptscope_core::annotation::RecordSet;
use conceptscope_service::{AppState, RecordLog, RecordSink, Service, ServiceConfig, ServiceError};
use tempfile::TempDir;
use tokio::sync::oneshot;

fn store(tag: &str, seed: usize) -> EmbeddingStore {
    let dim = 8;
    let n = 30;
    let matrix: Vec<f32> = (0..n * dim)
        .map(|i| (((i * 7919 + seed * 104729) % 1000) as f32) / 500.0 - 1.0)
        .collect();
    let records = (0..n as u64)
        .map(|i| SentenceRecord::new(i, tag, format!("{tag} sentence number {i}")))
        .collect();
    EmbeddingStore::new(dim, matrix, records, false, Default::default()).unwrap()
}

struct Fixture {
    dir: TempDir,
    tasks: PathBuf,
    key: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let stores = vec![store("qqp", 1), store("wiki", 2)];
        let pack = build_pack(
            &stores,
            &PackConfig {
                neurons: 2,
                random_directions: 1,
                random_sets: 1,
                k: 10,
                seed: 3,
            },
        )
        .unwrap();
        let tasks = dir.path().join("tasks.jsonl");
        let key = dir.path().join("key.jsonl");
        std::fs::write(&tasks, pack.tasks_jsonl().unwrap()).unwrap();
        std::fs::write(&key, pack.key_jsonl().unwrap()).unwrap();
        Fixture { dir, tasks, key }
    }

    fn records(&self) -> PathBuf {
        self.dir.path().join("records.jsonl")
    }

    fn config(&self) -> ServiceConfig {
        ServiceConfig::new(&self.tasks, self.records(), "127.0.0.1:0".parse().unwrap())
    }
}

struct Running {
    client: AnnotationClient,
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    handle: tokio::task::JoinHandle<()>,
}

impl Running {
    async fn stop(mut self) {
        let _ = self.stop.take().unwrap().send(());
        self.handle.await.unwrap();
    }
}

async fn start(config: ServiceConfig) -> Running {
    run(Service::bind(&config).await.unwrap())
}

fn run(service: Service) -> Running {
    let addr = service.local_addr();
    let (tx, rx) = oneshot::channel();
    let handle = tokio::spawn(async move {
        service
            .run_until(async {
                let _ = rx.await;
            })
            .await
            .unwrap();
    });
    Running {
        client: AnnotationClient::new(format!("http://{addr}")),
        addr,
        stop: Some(tx),
        handle,
    }
}

fn found(task: &AnnotationTask, annotator: &str, members: &[usize]) -> AnnotationRecord {
    AnnotationRecord {
        task_id: task.task_id.clone(),
        annotator_id: annotator.into(),
        patterns: vec![Pattern {
            description: "questions about travel".into(),
            members: members.to_vec(),
        }],
        no_pattern: false,
    }
}

fn nothing(task: &AnnotationTask, annotator: &str) -> AnnotationRecord {
    AnnotationRecord {
        task_id: task.task_id.clone(),
        annotator_id: annotator.into(),
        patterns: vec![],
        no_pattern: true,
    }
}

fn count_lines(p: &Path) -> usize {
    std::fs::read_to_string(p)
        .map(|t| t.lines().filter(|l| !l.is_empty()).count())
        .unwrap_or(0)
}

#[tokio::test]
async fn fresh_annotator_gets_blind_task() {
    let fx = Fixture::new();
    let svc = start(fx.config()).await;
    let resp = reqwest_get(svc.addr, "/api/tasks/next?annotator=ann1").await;
    let v: serde_json::Value = serde_json::from_str(&resp).unwrap();
    let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
    keys.sort();
    assert_eq!(keys, ["dataset", "sentences", "task_id"]);
    assert_eq!(v["sentences"].as_array().unwrap().len(), 10);
    for word in ["neuron", "random", "condition", "seed"] {
        assert!(!resp.contains(word), "{word} leaked");
    }
    svc.stop().await;
}

/// Plain HTTP GET without the client, to look at the raw body.
async fn reqwest_get(addr: SocketAddr, path: &str) -> String {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let mut s = tokio::net::TcpStream::connect(addr).await.unwrap();
    let req = format!("GET {path} HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n");
    s.write_all(req.as_bytes()).await.unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).await.unwrap();
    let body = out.split("\r\n\r\n").nth(1).unwrap_or("").to_string();
    body
}

#[tokio::test]
async fn submitted_task_is_not_served_again() {
    let fx = Fixture::new();
    let svc = start(fx.config()).await;
    let c = &svc.client;
    let t = c.next_task("a").await.unwrap().unwrap();
    // until submitted, the same task comes back
    assert_eq!(c.next_task("a").await.unwrap().unwrap().task_id, t.task_id);
    c.submit(&found(&t, "a", &[0, 1, 2])).await.unwrap();
    assert_eq!(count_lines(&fx.records()), 1);
    let next = c.next_task("a").await.unwrap().unwrap();
    assert_ne!(next.task_id, t.task_id);
    svc.stop().await;
}

#[tokio::test]
async fn rejections_have_the_right_status() {
    let fx = Fixture::new();
    let svc = start(fx.config()).await;
    let c = &svc.client;
    let t = c.next_task("a").await.unwrap().unwrap();

    let eleven: Vec<usize> = (0..11).collect();
    let err = c.submit(&found(&t, "a", &eleven)).await.unwrap_err();
    assert_eq!(err.status().unwrap().as_u16(), 400);

    let mut unknown = found(&t, "a", &[0, 1, 2]);
    unknown.task_id = "ffffffffffffffffffffffffffffffff".into();
    assert_eq!(c.submit(&unknown).await.unwrap_err().status().unwrap().as_u16(), 404);

    let mut both = found(&t, "a", &[0, 1, 2]);
    both.no_pattern = true;
    assert_eq!(c.submit(&both).await.unwrap_err().status().unwrap().as_u16(), 400);

    c.submit(&nothing(&t, "a")).await.unwrap();
    let dup = c.submit(&found(&t, "a", &[0, 1, 2])).await.unwrap_err();
    assert_eq!(dup.status().unwrap().as_u16(), 409);
    assert_eq!(dup.code(), "duplicate-record");
    assert_eq!(count_lines(&fx.records()), 1);

    // a two-member pattern is a valid submission; it only stops counting later
    let t2 = c.next_task("a").await.unwrap().unwrap();
    c.submit(&found(&t2, "a", &[4, 5])).await.unwrap();

    let missing = reqwest_get(svc.addr, "/api/tasks/next").await;
    assert!(missing.contains("missing-annotator"));
    svc.stop().await;
}

#[tokio::test]
async fn partially_annotated_tasks_go_to_the_next_annotator() {
    let fx = Fixture::new();
    let svc = start(fx.config()).await;
    let c = &svc.client;
    let a = c.next_task("a").await.unwrap().unwrap();
    let b = c.next_task("b").await.unwrap().unwrap();
    assert_eq!(a.task_id, b.task_id);
    let third = c.next_task("c").await.unwrap().unwrap();
    assert_ne!(third.task_id, a.task_id);
    svc.stop().await;
}

#[tokio::test]
async fn concurrent_annotators_cover_the_pack_exactly_twice() {
    let fx = Fixture::new();
    let n_tasks = count_lines(&fx.tasks);
    let svc = start(fx.config()).await;
    let mut joins = Vec::new();
    for who in 0..5 {
        let c = svc.client.clone();
        joins.push(tokio::spawn(async move {
            let name = format!("ann{who}");
            let mut done = Vec::new();
            while let Some(t) = c.next_task(&name).await.unwrap() {
                let rec = if t.task_id.as_bytes()[0] % 2 == 0 {
                    found(&t, &name, &[1, 3, 5])
                } else {
                    nothing(&t, &name)
                };
                c.submit(&rec).await.unwrap();
                done.push(t.task_id);
            }
            done
        }));
    }
    let mut per_task: HashMap<String, usize> = HashMap::new();
    for j in joins {
        let done = j.await.unwrap();
        let unique: HashSet<_> = done.iter().collect();
        assert_eq!(unique.len(), done.len(), "task served twice to one annotator");
        for t in done {
            *per_task.entry(t).or_default() += 1;
        }
    }
    assert_eq!(per_task.len(), n_tasks);
    assert!(per_task.values().all(|&c| c == 2));
    let p = svc.client.progress().await.unwrap();
    assert_eq!((p.tasks, p.complete, p.partial, p.untouched), (n_tasks, n_tasks, 0, 0));
    assert_eq!(p.records, 2 * n_tasks);
    assert_eq!(p.in_progress, 0);
    assert_eq!(count_lines(&fx.records()), 2 * n_tasks);
    svc.stop().await;
}

#[tokio::test]
async fn records_survive_a_restart() {
    let fx = Fixture::new();
    let svc = start(fx.config()).await;
    let t = svc.client.next_task("a").await.unwrap().unwrap();
    svc.client.submit(&found(&t, "a", &[0, 1, 2])).await.unwrap();
    svc.stop().await;

    let svc = start(fx.config()).await;
    let p = svc.client.progress().await.unwrap();
    assert_eq!(p.records, 1);
    assert_eq!(p.per_annotator["a"], 1);
    let dup = svc.client.submit(&nothing(&t, "a")).await.unwrap_err();
    assert_eq!(dup.status().unwrap().as_u16(), 409);
    // the partially annotated task is offered to the next annotator first
    assert_eq!(svc.client.next_task("b").await.unwrap().unwrap().task_id, t.task_id);
    svc.stop().await;
}

#[tokio::test]
async fn report_needs_a_key_file() {
    let fx = Fixture::new();
    let svc = start(fx.config()).await;
    let err = svc.client.report().await.unwrap_err();
    assert_eq!(err.status().unwrap().as_u16(), 404);
    assert_eq!(err.code(), "report-disabled");
    svc.stop().await;

    let mut config = fx.config();
    config.key = Some(fx.key.clone());
    let svc = start(config).await;
    let c = &svc.client;
    let t = c.next_task("a").await.unwrap().unwrap();
    c.submit(&found(&t, "a", &[0, 1, 2])).await.unwrap();
    assert_eq!(c.next_task("b").await.unwrap().unwrap().task_id, t.task_id);
    c.submit(&nothing(&t, "b")).await.unwrap();
    let report = c.report().await.unwrap();
    let conflicting: usize = report
        .cells
        .iter()
        .filter(|c| c.dataset == "all")
        .map(|c| c.conflicting)
        .sum();
    assert_eq!(conflicting, 1);
    assert_eq!(report.annotators.len(), 2);
    svc.stop().await;
}

#[tokio::test]
async fn service_without_key_never_opens_it() {
    let fx = Fixture::new();
    // the key file is unreadable garbage; a service without --key-file must not care
    std::fs::write(&fx.key, "not json").unwrap();
    let svc = start(fx.config()).await;
    assert!(svc.client.next_task("a").await.unwrap().is_some());
    svc.stop().await;

    let mut config = fx.config();
    config.key = Some(fx.key.clone());
    assert!(Service::bind(&config).await.is_err());
}

struct FullDisk;

impl RecordSink for FullDisk {
    fn append(&mut self, _: &[u8]) -> std::io::Result<()> {
        Err(std::io::Error::other("no space left on device"))
    }
}

#[tokio::test]
async fn storage_failure_is_a_server_error_without_a_record() {
    let fx = Fixture::new();
    let tasks: Vec<AnnotationTask> = conceptscope_core::annotation::read_jsonl(&fx.tasks).unwrap();
    let records = RecordSet::new(&tasks);
    let state = AppState::new(tasks, None, records, Box::new(FullDisk), 2).unwrap();
    let service = Service::bind_state("127.0.0.1:0".parse().unwrap(), Arc::new(state))
        .await
        .unwrap();
    let svc = run(service);
    let t = svc.client.next_task("a").await.unwrap().unwrap();
    let err = svc.client.submit(&found(&t, "a", &[0, 1, 2])).await.unwrap_err();
    assert_eq!(err.status().unwrap().as_u16(), 500);
    assert_eq!(err.code(), "storage");
    let p = svc.client.progress().await.unwrap();
    assert_eq!(p.records, 0);
    // the assignment stays open, so the annotator can retry
    assert_eq!(svc.client.next_task("a").await.unwrap().unwrap().task_id, t.task_id);
    svc.stop().await;
}

#[test]
fn file_log_appends_on_a_fresh_line() {
    let fx = Fixture::new();
    std::fs::write(fx.records(), "{\"a\":1}").unwrap();
    let mut log = RecordLog::open(&fx.records()).unwrap();
    log.append(b"{}\n").unwrap();
    assert_eq!(std::fs::read_to_string(fx.records()).unwrap(), "{\"a\":1}\n{}\n");
}

#[tokio::test]
async fn busy_port_is_reported() {
    let fx = Fixture::new();
    let first = Service::bind(&fx.config()).await.unwrap();
    let mut config = fx.config();
    config.addr = first.local_addr();
    match Service::bind(&config).await {
        Err(e @ ServiceError::Bind { .. }) => assert_eq!(e.code(), "port-busy"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("second bind succeeded"),
    }
}

#[tokio::test]
async fn unknown_task_in_existing_log_fails_startup() {
    let fx = Fixture::new();
    std::fs::write(
        fx.records(),
        r#"{"task_id":"00","annotator_id":"a","patterns":[],"no_pattern":true}"#,
    )
    .unwrap();
    assert!(Service::bind(&fx.config()).await.is_err());
}
