//! Word-omission attribution.
//!
//! The effect of token `j` on model `f` for an instance with gold label `y`
//! is `f(x)_y - f(x \ {x_j})_y`: the drop in the gold-class logit when that
//! single token occurrence is removed and the remaining tokens are re-joined
//! by the tokenizer's join rule. Effects are raw logit differences with no
//! per-instance normalization.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    score_keyed, Backend, BackendError, KeyedInput, ModelInput, ScoreKey, ScoreVector,
};
use crate::corpus::{tokenize, Corpus, Instance, Segment, SegmentTokens, Tokenizer};
use crate::exec::Execution;
use crate::jsonl::{self, JsonlError};

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("invalid attribution scope: {0}")]
    InvalidScope(String),
    #[error("token position {position} out of range for segment `{segment}` ({len} tokens)")]
    PositionOutOfRange {
        segment: String,
        position: usize,
        len: usize,
    },
    #[error("segment `{0}` not present in instance")]
    UnknownSegment(String),
    #[error("backend labels {backend:?} differ from corpus labels {corpus:?}")]
    LabelMismatch {
        backend: Vec<String>,
        corpus: Vec<String>,
    },
    #[error("non-finite omission effect for instance `{0}`")]
    NonFinite(String),
    #[error("instance `{instance}`: {source}")]
    Instance {
        instance: String,
        #[source]
        source: Box<AttributionError>,
    },
    #[error(transparent)]
    File(#[from] JsonlError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Which tokens enter an attribution vector: all of them, or only those of
/// one segment (the partial-input setting).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum AttributionScope {
    Full,
    Partial(String),
}

impl AttributionScope {
    pub fn includes(&self, segment: &str) -> bool {
        match self {
            AttributionScope::Full => true,
            AttributionScope::Partial(s) => s == segment,
        }
    }

    pub fn validate(&self, schema: &[String]) -> Result<(), AttributionError> {
        match self {
            AttributionScope::Full => Ok(()),
            AttributionScope::Partial(s) if schema.contains(s) => Ok(()),
            AttributionScope::Partial(s) => Err(AttributionError::InvalidScope(format!(
                "segment `{s}` is not in the schema {schema:?}"
            ))),
        }
    }
}

impl fmt::Display for AttributionScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttributionScope::Full => f.write_str("full"),
            AttributionScope::Partial(s) => write!(f, "partial:{s}"),
        }
    }
}

impl FromStr for AttributionScope {
    type Err = AttributionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            None if s == "full" => Ok(AttributionScope::Full),
            Some(("partial", seg)) if !seg.is_empty() => {
                Ok(AttributionScope::Partial(seg.to_string()))
            }
            _ => Err(AttributionError::InvalidScope(format!(
                "expected `full` or `partial:<segment>`, got `{s}`"
            ))),
        }
    }
}

impl Serialize for AttributionScope {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AttributionScope {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRef {
    pub segment: String,
    pub pos: usize,
    pub text: String,
}

/// Per-token omission effects of one instance under one backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionVector {
    pub instance: String,
    pub backend: String,
    pub scope: AttributionScope,
    pub gold: usize,
    pub tokens: Vec<TokenRef>,
    pub effects: Vec<f64>,
    pub full_logits: ScoreVector,
    pub predicted: usize,
    pub correct: bool,
}

impl AttributionVector {
    /// True when the instance had no tokens inside the scope.
    pub fn is_empty_scope(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Builds the input a backend sees, optionally with one token removed.
/// `omit` is (index into `tokens`, token position).
fn render_input(
    consumed: Option<&[String]>,
    tokens: &[SegmentTokens],
    tokenizer: &dyn Tokenizer,
    omit: Option<(usize, usize)>,
) -> Result<ModelInput, AttributionError> {
    let render = |idx: usize| {
        let seg = &tokens[idx];
        let kept: Vec<&str> = seg
            .tokens
            .iter()
            .enumerate()
            .filter(|(pos, _)| omit != Some((idx, *pos)))
            .map(|(_, t)| t.as_str())
            .collect();
        Segment::new(seg.name.clone(), tokenizer.join(&kept))
    };
    let segments = match consumed {
        None => (0..tokens.len()).map(render).collect(),
        Some(names) => names
            .iter()
            .map(|name| {
                tokens
                    .iter()
                    .position(|t| &t.name == name)
                    .map(render)
                    .ok_or_else(|| AttributionError::UnknownSegment(name.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?,
    };
    Ok(ModelInput::new(segments))
}

fn check_labels(backend: &dyn Backend, corpus: &Corpus) -> Result<(), AttributionError> {
    if backend.labels() != &corpus.label_set {
        return Err(AttributionError::LabelMismatch {
            backend: backend.labels().names().to_vec(),
            corpus: corpus.label_set.names().to_vec(),
        });
    }
    Ok(())
}

/// Effect of removing the token at (`segment`, `position`) on the logit of
/// class `gold`.
pub fn omission_effect(
    backend: &dyn Backend,
    instance: &Instance,
    tokenizer: &dyn Tokenizer,
    segment: &str,
    position: usize,
    gold: usize,
) -> Result<f64, AttributionError> {
    let tokens = tokenize(instance, tokenizer);
    let seg_idx = tokens
        .iter()
        .position(|t| t.name == segment)
        .ok_or_else(|| AttributionError::UnknownSegment(segment.to_string()))?;
    let len = tokens[seg_idx].tokens.len();
    if position >= len {
        return Err(AttributionError::PositionOutOfRange {
            segment: segment.to_string(),
            position,
            len,
        });
    }
    let consumed = backend.consumed_segments();
    let requests = [
        KeyedInput {
            key: ScoreKey::full(backend.id(), &instance.id),
            input: render_input(consumed, &tokens, tokenizer, None)?,
        },
        KeyedInput {
            key: ScoreKey::omitted(backend.id(), &instance.id, segment, position),
            input: render_input(consumed, &tokens, tokenizer, Some((seg_idx, position)))?,
        },
    ];
    let scores = score_keyed(backend, &requests)?;
    let effect = scores[0].logit(gold) - scores[1].logit(gold);
    if !effect.is_finite() {
        return Err(AttributionError::NonFinite(instance.id.clone()));
    }
    Ok(effect)
}

/// Scores the unperturbed instance and every in-scope single-token omission
/// in one batch, yielding the instance's attribution vector.
pub fn attribute_instance(
    backend: &dyn Backend,
    instance: &Instance,
    tokenizer: &dyn Tokenizer,
    scope: &AttributionScope,
) -> Result<AttributionVector, AttributionError> {
    if let AttributionScope::Partial(seg) = scope {
        if instance.segment(seg).is_none() {
            return Err(AttributionError::UnknownSegment(seg.clone()));
        }
    }
    let tokens = tokenize(instance, tokenizer);
    let consumed = backend.consumed_segments();

    let mut refs = Vec::new();
    let mut requests = vec![KeyedInput {
        key: ScoreKey::full(backend.id(), &instance.id),
        input: render_input(consumed, &tokens, tokenizer, None)?,
    }];
    for (seg_idx, seg) in tokens.iter().enumerate() {
        if !scope.includes(&seg.name) {
            continue;
        }
        for (pos, text) in seg.tokens.iter().enumerate() {
            refs.push(TokenRef {
                segment: seg.name.clone(),
                pos,
                text: text.clone(),
            });
            requests.push(KeyedInput {
                key: ScoreKey::omitted(backend.id(), &instance.id, &seg.name, pos),
                input: render_input(consumed, &tokens, tokenizer, Some((seg_idx, pos)))?,
            });
        }
    }

    let scores = score_keyed(backend, &requests)?;
    let full = &scores[0];
    let gold = instance.gold;
    if gold >= full.len() {
        return Err(BackendError::DimensionMismatch {
            expected: gold + 1,
            got: full.len(),
        }
        .into());
    }
    let effects: Vec<f64> = scores[1..]
        .iter()
        .map(|s| full.logit(gold) - s.logit(gold))
        .collect();
    if effects.iter().any(|e| !e.is_finite()) {
        return Err(AttributionError::NonFinite(instance.id.clone()));
    }
    let predicted = full.argmax();
    Ok(AttributionVector {
        instance: instance.id.clone(),
        backend: backend.id().to_string(),
        scope: scope.clone(),
        gold,
        tokens: refs,
        effects,
        full_logits: full.clone(),
        predicted,
        correct: predicted == gold,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct AttributeOptions {
    pub execution: Execution,
    /// Abort on the first failing instance instead of collecting failures.
    pub fail_fast: bool,
    /// Instances attributed per parallel wave; output is flushed per wave.
    pub chunk_size: usize,
}

impl Default for AttributeOptions {
    fn default() -> Self {
        Self {
            execution: Execution::default(),
            fail_fast: false,
            chunk_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceFailure {
    pub instance: String,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub written: usize,
    pub failures: Vec<InstanceFailure>,
}

#[derive(Debug, Clone, Default)]
pub struct AttributionRun {
    pub vectors: Vec<AttributionVector>,
    pub failures: Vec<InstanceFailure>,
}

/// Attributes every instance of `corpus` and hands vectors to `sink` in
/// corpus order, whatever the completion order of the workers.
pub fn attribute_corpus_with<F>(
    backend: &dyn Backend,
    corpus: &Corpus,
    scope: &AttributionScope,
    options: &AttributeOptions,
    mut sink: F,
) -> Result<RunReport, AttributionError>
where
    F: FnMut(AttributionVector) -> Result<(), AttributionError>,
{
    check_labels(backend, corpus)?;
    scope.validate(&corpus.manifest.segments)?;
    if let Some(consumed) = backend.consumed_segments() {
        for s in consumed {
            if !corpus.manifest.segments.contains(s) {
                return Err(AttributionError::UnknownSegment(s.clone()));
            }
        }
    }
    let tokenizer = corpus.tokenizer();
    let tokenizer = tokenizer.as_ref();
    let mut report = RunReport::default();
    for chunk in corpus.instances.chunks(options.chunk_size.max(1)) {
        let results = options
            .execution
            .map(chunk, |inst| attribute_instance(backend, inst, tokenizer, scope));
        for (inst, result) in chunk.iter().zip(results) {
            match result {
                Ok(v) => {
                    sink(v)?;
                    report.written += 1;
                }
                Err(e) if options.fail_fast => {
                    return Err(AttributionError::Instance {
                        instance: inst.id.clone(),
                        source: Box::new(e),
                    });
                }
                Err(e) => {
                    log::warn!("attribution failed for `{}`: {e}", inst.id);
                    report.failures.push(InstanceFailure {
                        instance: inst.id.clone(),
                        error: e.to_string(),
                    });
                }
            }
        }
    }
    Ok(report)
}

pub fn attribute_corpus(
    backend: &dyn Backend,
    corpus: &Corpus,
    scope: &AttributionScope,
    options: &AttributeOptions,
) -> Result<AttributionRun, AttributionError> {
    let mut vectors = Vec::with_capacity(corpus.len());
    let report = attribute_corpus_with(backend, corpus, scope, options, |v| {
        vectors.push(v);
        Ok(())
    })?;
    Ok(AttributionRun {
        vectors,
        failures: report.failures,
    })
}

/// Streams the attribution file to `path`, one record per line.
pub fn attribute_corpus_to_file(
    backend: &dyn Backend,
    corpus: &Corpus,
    scope: &AttributionScope,
    options: &AttributeOptions,
    path: &Path,
) -> Result<RunReport, AttributionError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let report = attribute_corpus_with(backend, corpus, scope, options, |v| {
        serde_json::to_writer(&mut out, &v).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        Ok(())
    })?;
    out.flush()?;
    Ok(report)
}

pub fn read_attributions(path: &Path) -> Result<Vec<AttributionVector>, AttributionError> {
    Ok(jsonl::read(path)?)
}

pub fn write_attributions(path: &Path, vectors: &[AttributionVector]) -> Result<(), AttributionError> {
    Ok(jsonl::write(path, vectors)?)
}
