//! Client for the annotation service HTTP API.

use conceptscope_core::annotation::{AnnotationRecord, AnnotationTask, ProtocolReport, Progress};
use reqwest::StatusCode;
use serde::Deserialize;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    /// The service answered with an error status.
    #[error("{status}: {code}: {message}")]
    Rejected {
        status: StatusCode,
        code: String,
        message: String,
    },
}

impl ClientError {
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            ClientError::Transport(e) => e.status(),
            ClientError::Rejected { status, .. } => Some(*status),
        }
    }

    pub fn code(&self) -> &str {
        match self {
            ClientError::Transport(_) => "transport",
            ClientError::Rejected { code, .. } => code,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Deserialize)]
struct ErrorBody {
    error: String,
    message: String,
}

#[derive(Clone, Debug)]
pub struct AnnotationClient {
    base: String,
    http: reqwest::Client,
}

async fn check(resp: reqwest::Response) -> Result<reqwest::Response> {
    let status = resp.status();
    if status.is_success() {
        return Ok(resp);
    }
    let text = resp.text().await.unwrap_or_default();
    let (code, message) = match serde_json::from_str::<ErrorBody>(&text) {
        Ok(b) => (b.error, b.message),
        Err(_) => ("http".to_string(), text),
    };
    Err(ClientError::Rejected {
        status,
        code,
        message,
    })
}

impl AnnotationClient {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        AnnotationClient {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    /// `None` once nothing is left for this annotator.
    pub async fn next_task(&self, annotator: &str) -> Result<Option<AnnotationTask>> {
        let resp = self
            .http
            .get(self.url("/api/tasks/next"))
            .query(&[("annotator", annotator)])
            .send()
            .await?;
        let resp = check(resp).await?;
        if resp.status() == StatusCode::NO_CONTENT {
            return Ok(None);
        }
        Ok(Some(resp.json().await?))
    }

    pub async fn submit(&self, record: &AnnotationRecord) -> Result<()> {
        let resp = self
            .http
            .post(self.url("/api/records"))
            .json(record)
            .send()
            .await?;
        check(resp).await.map(|_| ())
    }

    pub async fn progress(&self) -> Result<Progress> {
        let resp = self.http.get(self.url("/api/progress")).send().await?;
        Ok(check(resp).await?.json().await?)
    }

    pub async fn report(&self) -> Result<ProtocolReport> {
        let resp = self.http.get(self.url("/api/report")).send().await?;
        Ok(check(resp).await?.json().await?)
    }
}
