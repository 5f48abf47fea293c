//! Annotation service.
//!
//! Serves tasks from a pack file, one at a time per annotator, and appends
//! submitted records to a JSONL log. The condition key is only read when a
//! key file is passed explicitly, and only the report endpoint uses it.
//!
//! Endpoints:
//!
//! * `GET /api/tasks/next?annotator=ID`: the next task, or 204 when nothing
//!   is left for that annotator.
//! * `POST /api/records`: an annotation record; 201 on success, 400 for a
//!   malformed record, 404 for an unknown task, 409 for a repeat
//!   submission, 500 if the log could not be written.
//! * `GET /api/progress`: counts.
//! * `GET /api/report`: the protocol report, when a key file was given.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use conceptscope_core::annotation::{
    self, AnnotationError, AnnotationRecord, AnnotationTask, KeyEntry, Progress, RecordSet,
    DEFAULT_ANNOTATORS_PER_TASK,
};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::Mutex;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] conceptscope_core::Error),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("pack has no tasks")]
    EmptyPack,
    #[error("duplicate task id {0:?} in pack")]
    DuplicateTask(String),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Core(e) => e.code(),
            ServiceError::Bind { .. } => "port-busy",
            ServiceError::Io { .. } => "io",
            ServiceError::EmptyPack => "invalid-pack",
            ServiceError::DuplicateTask(_) => "invalid-pack",
        }
    }
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub tasks: PathBuf,
    pub records: PathBuf,
    pub key: Option<PathBuf>,
    pub annotators_per_task: usize,
    pub addr: SocketAddr,
}

impl ServiceConfig {
    pub fn new(tasks: impl Into<PathBuf>, records: impl Into<PathBuf>, addr: SocketAddr) -> Self {
        ServiceConfig {
            tasks: tasks.into(),
            records: records.into(),
            key: None,
            annotators_per_task: DEFAULT_ANNOTATORS_PER_TASK,
            addr,
        }
    }
}

/// Destination for accepted records, one JSON line per call. An `Err`
/// means nothing was stored.
pub trait RecordSink: Send {
    fn append(&mut self, line: &[u8]) -> std::io::Result<()>;
}

/// Append-only JSONL file. A failed append is rolled back so the file never
/// holds a partial line.
pub struct RecordLog {
    file: File,
}

impl RecordLog {
    pub fn open(path: &Path) -> Result<Self> {
        let io = |source| ServiceError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io)?;
        // an interrupted earlier run may have left the file without a final newline
        let len = file.metadata().map_err(io)?.len();
        if len > 0 {
            let text = std::fs::read(path).map_err(io)?;
            if text.last() != Some(&b'\n') {
                file.write_all(b"\n").map_err(io)?;
            }
        }
        Ok(RecordLog { file })
    }
}

impl RecordSink for RecordLog {
    fn append(&mut self, line: &[u8]) -> std::io::Result<()> {
        let start = self.file.seek(SeekFrom::End(0))?;
        let written = self
            .file
            .write_all(line)
            .and_then(|_| self.file.sync_data());
        if let Err(e) = written {
            let _ = self.file.set_len(start);
            return Err(e);
        }
        Ok(())
    }
}

struct Inner {
    records: RecordSet,
    sink: Box<dyn RecordSink>,
    /// Submitted annotations per task.
    filled: Vec<usize>,
    /// Outstanding assignments per task.
    leased: Vec<usize>,
    /// annotator -> task index handed out and not yet submitted.
    pending: HashMap<String, usize>,
    /// Next fresh task to hand out; fresh tasks go out in pack order.
    cursor: usize,
}

pub struct AppState {
    tasks: Vec<AnnotationTask>,
    index: HashMap<String, usize>,
    key: Option<Vec<KeyEntry>>,
    annotators_per_task: usize,
    inner: Mutex<Inner>,
}

impl AppState {
    /// Loads the pack and any existing records. The key is read only when
    /// `config.key` is set.
    pub fn load(config: &ServiceConfig) -> Result<Self> {
        let tasks: Vec<AnnotationTask> = annotation::read_jsonl(&config.tasks)?;
        let key = match &config.key {
            Some(p) => Some(annotation::read_jsonl::<KeyEntry>(p)?),
            None => None,
        };
        let existing = annotation::ingest_records(&config.records, &tasks)?;
        for d in &existing.duplicates {
            tracing::warn!(
                line = d.line,
                task = %d.task_id,
                annotator = %d.annotator_id,
                "skipping repeated submission in record log"
            );
        }
        let log = RecordLog::open(&config.records)?;
        Self::new(
            tasks,
            key,
            existing.records,
            Box::new(log),
            config.annotators_per_task,
        )
    }

    /// State over already validated `records`; new ones go to `sink`.
    pub fn new(
        tasks: Vec<AnnotationTask>,
        key: Option<Vec<KeyEntry>>,
        records: RecordSet,
        sink: Box<dyn RecordSink>,
        annotators_per_task: usize,
    ) -> Result<Self> {
        if tasks.is_empty() {
            return Err(ServiceError::EmptyPack);
        }
        let mut index = HashMap::new();
        for (i, t) in tasks.iter().enumerate() {
            if index.insert(t.task_id.clone(), i).is_some() {
                return Err(ServiceError::DuplicateTask(t.task_id.clone()));
            }
        }
        let mut filled = vec![0; tasks.len()];
        for r in records.records() {
            let t = *index
                .get(&r.task_id)
                .ok_or_else(|| AnnotationError::UnknownTask(r.task_id.clone()))
                .map_err(conceptscope_core::Error::from)?;
            filled[t] += 1;
        }
        let leased = vec![0; tasks.len()];
        Ok(AppState {
            inner: Mutex::new(Inner {
                records,
                sink,
                filled,
                leased,
                pending: HashMap::new(),
                cursor: 0,
            }),
            tasks,
            index,
            key,
            annotators_per_task: annotators_per_task.max(1),
        })
    }

    pub fn tasks(&self) -> &[AnnotationTask] {
        &self.tasks
    }

    /// Picks the task for `annotator`: a pending assignment is served again;
    /// otherwise tasks that already have some annotations come first, then
    /// fresh tasks in pack order.
    pub async fn next_task(&self, annotator: &str) -> Option<&AnnotationTask> {
        let mut inner = self.inner.lock().await;
        if let Some(&t) = inner.pending.get(annotator) {
            return Some(&self.tasks[t]);
        }
        let need = self.annotators_per_task;
        let open = |inner: &Inner, t: usize| {
            inner.filled[t] + inner.leased[t] < need
                && !inner.records.contains(&self.tasks[t].task_id, annotator)
        };
        let n = self.tasks.len();
        let started = (0..n).find(|&t| open(&inner, t) && inner.filled[t] + inner.leased[t] > 0);
        let chosen = started.or_else(|| {
            (0..n)
                .map(|j| (inner.cursor + j) % n)
                .find(|&t| open(&inner, t))
        })?;
        if inner.filled[chosen] + inner.leased[chosen] == 0 {
            inner.cursor = (chosen + 1) % n;
        }
        inner.leased[chosen] += 1;
        inner.pending.insert(annotator.to_string(), chosen);
        Some(&self.tasks[chosen])
    }

    pub async fn submit(&self, record: AnnotationRecord) -> Result<(), SubmitError> {
        let mut inner = self.inner.lock().await;
        inner.records.check(&record)?;
        let t = self.index[&record.task_id];
        let mut line = serde_json::to_vec(&record).expect("records serialize");
        line.push(b'\n');
        inner
            .sink
            .append(&line)
            .map_err(|e| SubmitError::Storage(e.to_string()))?;
        if inner.pending.get(&record.annotator_id) == Some(&t) {
            inner.pending.remove(&record.annotator_id);
            inner.leased[t] -= 1;
        }
        inner.filled[t] += 1;
        inner.records.insert(record)?;
        Ok(())
    }

    pub async fn progress(&self) -> Progress {
        let inner = self.inner.lock().await;
        let need = self.annotators_per_task;
        let mut per_annotator = BTreeMap::new();
        for r in inner.records.records() {
            *per_annotator.entry(r.annotator_id.clone()).or_insert(0) += 1;
        }
        Progress {
            tasks: self.tasks.len(),
            annotators_per_task: need,
            records: inner.records.len(),
            complete: inner.filled.iter().filter(|&&f| f >= need).count(),
            partial: inner.filled.iter().filter(|&&f| f > 0 && f < need).count(),
            untouched: inner.filled.iter().filter(|&&f| f == 0).count(),
            in_progress: inner.pending.len(),
            per_annotator,
        }
    }

    /// `None` when the service was started without a key file.
    pub async fn report(&self) -> Option<conceptscope_core::Result<annotation::ProtocolReport>> {
        let key = self.key.as_ref()?;
        let inner = self.inner.lock().await;
        Some(annotation::protocol_report(
            &self.tasks,
            &inner.records,
            key,
            self.annotators_per_task,
        ))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SubmitError {
    #[error(transparent)]
    Rejected(#[from] AnnotationError),
    #[error("could not store record: {0}")]
    Storage(String),
}

/// Error body returned with every non-2xx response.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

fn error_response(status: StatusCode, code: &str, message: impl Into<String>) -> Response {
    (
        status,
        Json(ErrorBody {
            error: code.to_string(),
            message: message.into(),
        }),
    )
        .into_response()
}

impl IntoResponse for SubmitError {
    fn into_response(self) -> Response {
        let status = match &self {
            SubmitError::Rejected(AnnotationError::UnknownTask(_)) => StatusCode::NOT_FOUND,
            SubmitError::Rejected(AnnotationError::Duplicate { .. }) => StatusCode::CONFLICT,
            SubmitError::Rejected(_) => StatusCode::BAD_REQUEST,
            SubmitError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let code = match &self {
            SubmitError::Rejected(e) => e.code(),
            SubmitError::Storage(_) => "storage",
        };
        error_response(status, code, self.to_string())
    }
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: Option<String>,
}

async fn next_task(State(state): State<Arc<AppState>>, Query(q): Query<NextQuery>) -> Response {
    let Some(annotator) = q.annotator.filter(|a| !a.trim().is_empty()) else {
        return error_response(
            StatusCode::BAD_REQUEST,
            "missing-annotator",
            "query parameter `annotator` is required",
        );
    };
    match state.next_task(&annotator).await {
        Some(task) => Json(task).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn post_record(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let record: AnnotationRecord = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, "malformed-record", e.to_string()),
    };
    let (task, annotator) = (record.task_id.clone(), record.annotator_id.clone());
    match state.submit(record).await {
        Ok(()) => {
            tracing::info!(%task, %annotator, "record stored");
            StatusCode::CREATED.into_response()
        }
        Err(e) => {
            tracing::warn!(%task, %annotator, error = %e, "record rejected");
            e.into_response()
        }
    }
}

async fn progress(State(state): State<Arc<AppState>>) -> Json<Progress> {
    Json(state.progress().await)
}

async fn report(State(state): State<Arc<AppState>>) -> Response {
    match state.report().await {
        None => error_response(
            StatusCode::NOT_FOUND,
            "report-disabled",
            "the service was started without a key file",
        ),
        Some(Ok(r)) => Json(r).into_response(),
        Some(Err(e)) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.code(), e.to_string()),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/records", post(post_record))
        .route("/api/progress", get(progress))
        .route("/api/report", get(report))
        .with_state(state)
}

/// A bound, not yet running service.
pub struct Service {
    listener: TcpListener,
    state: Arc<AppState>,
}

impl Service {
    pub async fn bind(config: &ServiceConfig) -> Result<Self> {
        let state = Arc::new(AppState::load(config)?);
        Self::bind_state(config.addr, state).await
    }

    pub async fn bind_state(addr: SocketAddr, state: Arc<AppState>) -> Result<Self> {
        let listener = TcpListener::bind(addr)
            .await
            .map_err(|source| ServiceError::Bind { addr, source })?;
        Ok(Service { listener, state })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener")
    }

    pub fn state(&self) -> Arc<AppState> {
        self.state.clone()
    }

    pub async fn run_until<F>(self, shutdown: F) -> Result<()>
    where
        F: std::future::Future<Output = ()> + Send + 'static,
    {
        let addr = self.local_addr();
        tracing::info!(%addr, tasks = self.state.tasks.len(), "annotation service listening");
        axum::serve(self.listener, router(self.state))
            .with_graceful_shutdown(shutdown)
            .await
            .map_err(|source| ServiceError::Io {
                path: PathBuf::from(addr.to_string()),
                source,
            })
    }

    pub async fn run(self) -> Result<()> {
        self.run_until(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    }
}
