//! Uniform scoring over classifiers.
//!
//! Every backend maps a batch of per-segment texts to one logit vector per
//! input. Logits are the only currency: nothing in the pipeline applies a
//! softmax. Built-in analytic models ([`LexiconModel`], [`LinearBowModel`])
//! serve as exact oracles; [`RemoteBackend`] speaks the `/v1` scoring
//! protocol; [`CachedBackend`] puts a content-addressed logit store in front
//! of any of them.

mod cache;
pub mod conformance;
mod descriptor;
mod lexicon;
mod remote;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LabelSet, Segment};

pub use cache::{CacheEntry, CacheMode, CachedBackend, LogitCache};
pub use descriptor::{
    load_backend, BackendDescriptor, BackendKind, CacheConfig, LexiconConfig, LinearBowConfig,
    RemoteConfig,
};
pub use lexicon::{LexiconModel, LinearBowModel};
pub use remote::{RemoteBackend, RemoteMeta};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unreachable at {endpoint}: {message}")]
    Unreachable { endpoint: String, message: String },
    #[error("cache miss for {0}")]
    CacheMiss(ScoreKey),
    #[error("cache corrupt at line {line}: {message}")]
    CacheCorrupt { line: usize, message: String },
    #[error("cache already holds different logits for {0}")]
    CacheConflict(ScoreKey),
    #[error("expected {expected} logits per input, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("expected {expected} score vectors, got {got}")]
    CountMismatch { expected: usize, got: usize },
    #[error("non-finite logit from backend `{0}`")]
    NonFinite(String),
    #[error("empty scoring batch")]
    EmptyBatch,
    #[error("input does not match the backend's segment schema: {0}")]
    SchemaMismatch(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid backend descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("label set mismatch: backend has {backend:?}, expected {expected:?}")]
    LabelMismatch {
        backend: Vec<String>,
        expected: Vec<String>,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-class logits, ordered by the run's [`LabelSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScoreVector(pub Vec<f64>);

impl ScoreVector {
    pub fn new(logits: Vec<f64>) -> Self {
        Self(logits)
    }

    pub fn logits(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn logit(&self, class: usize) -> f64 {
        self.0[class]
    }

    /// Index of the largest logit; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate().skip(1) {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// The texts a backend sees for one (possibly perturbed) input, restricted
/// to the segments it consumes and in its declared order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelInput {
    pub segments: Vec<Segment>,
}

impl ModelInput {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self { segments }
    }

    pub fn texts(&self) -> Vec<&str> {
        self.segments.iter().map(|s| s.text.as_str()).collect()
    }
}

/// A single omitted token: segment name and 0-based token position.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Omission {
    pub segment: String,
    pub position: usize,
}

/// Cache address of one scoring: backend, instance and omitted token
/// (`None` is the unperturbed input).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ScoreKey {
    pub backend: String,
    pub instance: String,
    pub omit: Option<Omission>,
}

impl ScoreKey {
    pub fn full(backend: impl Into<String>, instance: impl Into<String>) -> Self {
        Self {
            backend: backend.into(),
            instance: instance.into(),
            omit: None,
        }
    }

    pub fn omitted(
        backend: impl Into<String>,
        instance: impl Into<String>,
        segment: impl Into<String>,
        position: usize,
    ) -> Self {
        Self {
            backend: backend.into(),
            instance: instance.into(),
            omit: Some(Omission {
                segment: segment.into(),
                position,
            }),
        }
    }
}

impl std::fmt::Display for ScoreKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.omit {
            None => write!(f, "({}, {}, full)", self.backend, self.instance),
            Some(o) => write!(
                f,
                "({}, {}, {}@{})",
                self.backend, self.instance, o.segment, o.position
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyedInput {
    pub key: ScoreKey,
    pub input: ModelInput,
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    fn labels(&self) -> &LabelSet;

    /// Segments this backend reads, in order. `None` means every segment of
    /// the corpus schema. A partial-input model lists only its segment.
    fn consumed_segments(&self) -> Option<&[String]> {
        None
    }

    fn score_batch(&self, inputs: &[ModelInput]) -> Result<Vec<ScoreVector>, BackendError>;

    /// Scores inputs that carry their cache address. Only caching backends
    /// make use of the keys.
    fn score_keyed(&self, requests: &[KeyedInput]) -> Result<Vec<ScoreVector>, BackendError> {
        let inputs: Vec<ModelInput> = requests.iter().map(|r| r.input.clone()).collect();
        self.score_batch(&inputs)
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn labels(&self) -> &LabelSet {
        (**self).labels()
    }
    fn consumed_segments(&self) -> Option<&[String]> {
        (**self).consumed_segments()
    }
    fn score_batch(&self, inputs: &[ModelInput]) -> Result<Vec<ScoreVector>, BackendError> {
        (**self).score_batch(inputs)
    }
    fn score_keyed(&self, requests: &[KeyedInput]) -> Result<Vec<ScoreVector>, BackendError> {
        (**self).score_keyed(requests)
    }
}

/// Checks a backend response: one vector per input, each of label-set length
/// with finite entries.
pub fn validate_scores(
    backend: &str,
    labels: &LabelSet,
    expected: usize,
    scores: &[ScoreVector],
) -> Result<(), BackendError> {
    if scores.len() != expected {
        return Err(BackendError::CountMismatch {
            expected,
            got: scores.len(),
        });
    }
    for s in scores {
        if s.len() != labels.len() {
            return Err(BackendError::DimensionMismatch {
                expected: labels.len(),
                got: s.len(),
            });
        }
        if s.0.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::NonFinite(backend.to_string()));
        }
    }
    Ok(())
}

/// `score_batch` with response validation.
pub fn score_batch(
    backend: &dyn Backend,
    inputs: &[ModelInput],
) -> Result<Vec<ScoreVector>, BackendError> {
    if inputs.is_empty() {
        return Err(BackendError::EmptyBatch);
    }
    let scores = backend.score_batch(inputs)?;
    validate_scores(backend.id(), backend.labels(), inputs.len(), &scores)?;
    Ok(scores)
}

/// `score_keyed` with response validation.
pub fn score_keyed(
    backend: &dyn Backend,
    requests: &[KeyedInput],
) -> Result<Vec<ScoreVector>, BackendError> {
    if requests.is_empty() {
        return Err(BackendError::EmptyBatch);
    }
    let scores = backend.score_keyed(requests)?;
    validate_scores(backend.id(), backend.labels(), requests.len(), &scores)?;
    Ok(scores)
}

pub fn predict(backend: &dyn Backend, input: &ModelInput) -> Result<usize, BackendError> {
    let scores = score_batch(backend, std::slice::from_ref(input))?;
    Ok(scores[0].argmax())
}

/// Multiplies every logit of the wrapped backend by a constant.
pub struct ScaledBackend<B> {
    inner: B,
    factor: f64,
}

impl<B: Backend> ScaledBackend<B> {
    pub fn new(inner: B, factor: f64) -> Self {
        Self { inner, factor }
    }

    fn scale(&self, scores: Vec<ScoreVector>) -> Vec<ScoreVector> {
        scores
            .into_iter()
            .map(|s| ScoreVector(s.0.into_iter().map(|v| v * self.factor).collect()))
            .collect()
    }
}

impl<B: Backend> Backend for ScaledBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn labels(&self) -> &LabelSet {
        self.inner.labels()
    }
    fn consumed_segments(&self) -> Option<&[String]> {
        self.inner.consumed_segments()
    }
    fn score_batch(&self, inputs: &[ModelInput]) -> Result<Vec<ScoreVector>, BackendError> {
        self.inner.score_batch(inputs).map(|s| self.scale(s))
    }
    fn score_keyed(&self, requests: &[KeyedInput]) -> Result<Vec<ScoreVector>, BackendError> {
        self.inner.score_keyed(requests).map(|s| self.scale(s))
    }
}

/// Counts how many inputs reach the wrapped backend.
pub struct CountingBackend<B> {
    inner: B,
    scored: AtomicUsize,
}

impl<B: Backend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            scored: AtomicUsize::new(0),
        }
    }

    pub fn scored(&self) -> usize {
        self.scored.load(Ordering::SeqCst)
    }
}

impl<B: Backend> Backend for CountingBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn labels(&self) -> &LabelSet {
        self.inner.labels()
    }
    fn consumed_segments(&self) -> Option<&[String]> {
        self.inner.consumed_segments()
    }
    fn score_batch(&self, inputs: &[ModelInput]) -> Result<Vec<ScoreVector>, BackendError> {
        self.scored.fetch_add(inputs.len(), Ordering::SeqCst);
        self.inner.score_batch(inputs)
    }
    fn score_keyed(&self, requests: &[KeyedInput]) -> Result<Vec<ScoreVector>, BackendError> {
        self.scored.fetch_add(requests.len(), Ordering::SeqCst);
        self.inner.score_keyed(requests)
    }
}

/// Returns the same logits for every input.
pub struct ConstantBackend {
    id: String,
    labels: LabelSet,
    logits: ScoreVector,
}

impl ConstantBackend {
    pub fn new(id: impl Into<String>, labels: LabelSet, logits: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            labels,
            logits: ScoreVector(logits),
        }
    }
}

impl Backend for ConstantBackend {
    fn id(&self) -> &str {
        &self.id
    }
    fn labels(&self) -> &LabelSet {
        &self.labels
    }
    fn score_batch(&self, inputs: &[ModelInput]) -> Result<Vec<ScoreVector>, BackendError> {
        Ok(vec![self.logits.clone(); inputs.len()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> LabelSet {
        LabelSet::new(["entailment", "neutral", "contradiction"]).unwrap()
    }

    #[test]
    fn argmax_and_tie_break() {
        assert_eq!(ScoreVector(vec![0.1, 0.9, 0.3]).argmax(), 1);
        assert_eq!(ScoreVector(vec![0.5, 0.5, 0.1]).argmax(), 0);
        assert_eq!(ScoreVector(vec![0.0, 0.0, 2.0]).argmax(), 2);
    }

    #[test]
    fn validation_catches_dimension_and_count() {
        let l = labels();
        let two = vec![ScoreVector(vec![0.0, 1.0])];
        assert!(matches!(
            validate_scores("r", &l, 1, &two),
            Err(BackendError::DimensionMismatch { expected: 3, got: 2 })
        ));
        let ok = vec![ScoreVector(vec![0.0, 1.0, 2.0])];
        assert!(matches!(
            validate_scores("r", &l, 2, &ok),
            Err(BackendError::CountMismatch { .. })
        ));
        let nan = vec![ScoreVector(vec![0.0, f64::NAN, 2.0])];
        assert!(matches!(
            validate_scores("r", &l, 1, &nan),
            Err(BackendError::NonFinite(_))
        ));
    }

    #[test]
    fn empty_batch_rejected() {
        let b = ConstantBackend::new("c", labels(), vec![0.0; 3]);
        assert!(matches!(score_batch(&b, &[]), Err(BackendError::EmptyBatch)));
    }

    #[test]
    fn scaled_and_counting_wrappers() {
        let b = CountingBackend::new(ScaledBackend::new(
            ConstantBackend::new("c", labels(), vec![1.0, -2.0, 0.5]),
            3.0,
        ));
        let input = ModelInput::new(vec![Segment::new("hypothesis", "x")]);
        let out = score_batch(&b, &[input.clone(), input]).unwrap();
        assert_eq!(out[0].0, vec![3.0, -6.0, 1.5]);
        assert_eq!(b.scored(), 2);
    }
}
