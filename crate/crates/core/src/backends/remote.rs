use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{validate_scores, Backend, BackendError, ModelInput, ScoreVector};
use crate::corpus::LabelSet;

#[derive(Serialize)]
struct ScoreRequest<'a> {
    instances: Vec<RequestInstance<'a>>,
}

#[derive(Serialize)]
struct RequestInstance<'a> {
    segments: Vec<&'a str>,
}

#[derive(Deserialize)]
struct ScoreResponse {
    logits: Vec<Vec<f64>>,
}

/// Response of `GET /v1/meta`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteMeta {
    pub labels: Vec<String>,
    pub model_id: String,
}

/// Counting semaphore bounding in-flight HTTP requests.
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("limiter lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("limiter lock");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("limiter lock") += 1;
        self.0.cv.notify_one();
    }
}

/// Client for the `/v1` scoring protocol. The server is a black box that
/// turns raw segment texts into logits.
pub struct RemoteBackend {
    id: String,
    labels: LabelSet,
    segments: Option<Vec<String>>,
    endpoint: String,
    agent: ureq::Agent,
    max_batch: usize,
    limiter: Limiter,
}

impl RemoteBackend {
    pub fn new(
        id: impl Into<String>,
        labels: LabelSet,
        endpoint: impl Into<String>,
        max_in_flight: usize,
        max_batch: usize,
        timeout: Duration,
    ) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        Self {
            id: id.into(),
            labels,
            segments: None,
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            agent,
            max_batch: max_batch.max(1),
            limiter: Limiter::new(max_in_flight),
        }
    }

    pub fn consuming(mut self, segments: Vec<String>) -> Self {
        self.segments = Some(segments);
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn map_err(&self, e: ureq::Error) -> BackendError {
        match e {
            ureq::Error::Status(code, resp) => BackendError::Protocol(format!(
                "{} answered HTTP {code}: {}",
                self.endpoint,
                resp.into_string().unwrap_or_default()
            )),
            ureq::Error::Transport(t) => BackendError::Unreachable {
                endpoint: self.endpoint.clone(),
                message: t.to_string(),
            },
        }
    }

    pub fn fetch_meta(&self) -> Result<RemoteMeta, BackendError> {
        let _permit = self.limiter.acquire();
        let resp = self
            .agent
            .get(&format!("{}/v1/meta", self.endpoint))
            .call()
            .map_err(|e| self.map_err(e))?;
        resp.into_json::<RemoteMeta>()
            .map_err(|e| BackendError::Protocol(format!("bad /v1/meta body: {e}")))
    }

    /// Fails unless the server's label order equals ours.
    pub fn check_meta(&self) -> Result<RemoteMeta, BackendError> {
        let meta = self.fetch_meta()?;
        if meta.labels != self.labels.names() {
            return Err(BackendError::LabelMismatch {
                backend: meta.labels,
                expected: self.labels.names().to_vec(),
            });
        }
        Ok(meta)
    }

    fn score_chunk(&self, inputs: &[ModelInput]) -> Result<Vec<ScoreVector>, BackendError> {
        let body = ScoreRequest {
            instances: inputs
                .iter()
                .map(|i| RequestInstance {
                    segments: i.texts(),
                })
                .collect(),
        };
        let _permit = self.limiter.acquire();
        let resp = self
            .agent
            .post(&format!("{}/v1/score", self.endpoint))
            .send_json(&body)
            .map_err(|e| self.map_err(e))?;
        let parsed: ScoreResponse = resp
            .into_json()
            .map_err(|e| BackendError::Protocol(format!("bad /v1/score body: {e}")))?;
        let scores: Vec<ScoreVector> = parsed.logits.into_iter().map(ScoreVector).collect();
        validate_scores(&self.id, &self.labels, inputs.len(), &scores)?;
        Ok(scores)
    }
}

impl Backend for RemoteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn labels(&self) -> &LabelSet {
        &self.labels
    }

    fn consumed_segments(&self) -> Option<&[String]> {
        self.segments.as_deref()
    }

    fn score_batch(&self, inputs: &[ModelInput]) -> Result<Vec<ScoreVector>, BackendError> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(self.max_batch) {
            out.extend(self.score_chunk(chunk)?);
        }
        Ok(out)
    }
}
