//! Labeled pair-classification corpora: label sets, instances, manifests and
//! the engine-level tokenizer used to address individual tokens.
//!
//! A corpus is a UTF-8 JSONL file with one instance per line:
//!
//! ```text
//! {"id":"m1","segments":[{"name":"premise","text":"He worked."},{"name":"hypothesis","text":"He never worked."}],"label":"contradiction"}
//! ```
//!
//! The accompanying manifest declares the dataset name, split, label order
//! and the segment schema every instance must follow.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: schema violation in field `{field}`: {message}")]
    SchemaViolation {
        line: usize,
        field: String,
        message: String,
    },
    #[error("line {line}: unknown label `{label}`")]
    UnknownLabel { line: usize, label: String },
    #[error("line {line}: duplicate instance id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("corpus contains no instances")]
    EmptyCorpus,
    #[error("invalid label set: {0}")]
    InvalidLabelSet(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("unknown tokenizer `{0}`")]
    UnknownTokenizer(String),
}

/// Ordered class names. The order defines logit indexing for every backend
/// scored against the corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSet {
    names: Vec<String>,
}

impl LabelSet {
    pub fn new<I, S>(names: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(CorpusError::InvalidLabelSet("label set is empty".into()));
        }
        let mut seen = HashSet::new();
        for name in &names {
            if name.is_empty() {
                return Err(CorpusError::InvalidLabelSet("empty label name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(CorpusError::InvalidLabelSet(format!(
                    "duplicate label `{name}`"
                )));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

impl TryFrom<Vec<String>> for LabelSet {
    type Error = CorpusError;

    fn try_from(names: Vec<String>) -> Result<Self, Self::Error> {
        LabelSet::new(names)
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(set: LabelSet) -> Self {
        set.names
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub text: String,
}

impl Segment {
    pub fn new(name: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            text: text.into(),
        }
    }
}

/// One labeled example. `gold` indexes into the corpus [`LabelSet`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub id: String,
    pub segments: Vec<Segment>,
    pub gold: usize,
}

impl Instance {
    pub fn segment(&self, name: &str) -> Option<&str> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.text.as_str())
    }
}

fn default_tokenizer() -> String {
    WHITESPACE.to_string()
}

/// Corpus descriptor: dataset, split, label order, segment schema and the
/// engine tokenizer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub dataset: String,
    pub split: String,
    pub labels: Vec<String>,
    pub segments: Vec<String>,
    #[serde(default = "default_tokenizer")]
    pub tokenizer: String,
}

impl Manifest {
    /// Reads a manifest from TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let raw = read_to_string(path)?;
        let manifest: Manifest = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&raw).map_err(|e| CorpusError::InvalidManifest(e.to_string()))?
        } else {
            toml::from_str(&raw).map_err(|e| CorpusError::InvalidManifest(e.to_string()))?
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        LabelSet::new(self.labels.iter().cloned())?;
        if self.segments.is_empty() {
            return Err(CorpusError::InvalidManifest(
                "segment schema must name at least one segment".into(),
            ));
        }
        let unique: HashSet<_> = self.segments.iter().collect();
        if unique.len() != self.segments.len() {
            return Err(CorpusError::InvalidManifest(
                "segment names must be unique".into(),
            ));
        }
        tokenizer_by_id(&self.tokenizer)?;
        Ok(())
    }

    pub fn label_set(&self) -> Result<LabelSet, CorpusError> {
        LabelSet::new(self.labels.iter().cloned())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes to toml")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub label_set: LabelSet,
    pub instances: Vec<Instance>,
    pub manifest: Manifest,
}

#[derive(Serialize)]
struct InstanceLine<'a> {
    id: &'a str,
    segments: &'a [Segment],
    label: &'a str,
}

impl Corpus {
    /// Builds a corpus from in-memory parts, enforcing the same invariants as
    /// [`load_corpus`].
    pub fn new(manifest: Manifest, instances: Vec<Instance>) -> Result<Self, CorpusError> {
        manifest.validate()?;
        let label_set = manifest.label_set()?;
        if instances.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut ids = HashSet::new();
        for (i, inst) in instances.iter().enumerate() {
            let line = i + 1;
            if !ids.insert(inst.id.as_str()) {
                return Err(CorpusError::DuplicateId {
                    line,
                    id: inst.id.clone(),
                });
            }
            if inst.gold >= label_set.len() {
                return Err(CorpusError::UnknownLabel {
                    line,
                    label: format!("#{}", inst.gold),
                });
            }
            check_schema(line, &inst.segments, &manifest.segments)?;
        }
        Ok(Self {
            label_set,
            instances,
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Instance> {
        self.instances.iter().find(|i| i.id == id)
    }

    pub fn tokenizer(&self) -> Box<dyn Tokenizer> {
        tokenizer_by_id(&self.manifest.tokenizer).expect("manifest validated on construction")
    }

    /// One-line description, e.g. `mnli/validation_matched: 9,815 instances`.
    pub fn summary(&self) -> String {
        format!(
            "{}/{}: {} instances",
            self.manifest.dataset,
            self.manifest.split,
            crate::report::thousands(self.len())
        )
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for inst in &self.instances {
            let line = InstanceLine {
                id: &inst.id,
                segments: &inst.segments,
                label: self.label_set.name(inst.gold).expect("gold validated"),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn read_to_string(path: &Path) -> Result<String, CorpusError> {
    if !path.exists() {
        return Err(CorpusError::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn check_schema(line: usize, segments: &[Segment], schema: &[String]) -> Result<(), CorpusError> {
    let names: Vec<&str> = segments.iter().map(|s| s.name.as_str()).collect();
    if names != schema.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(CorpusError::SchemaViolation {
            line,
            field: "segments".into(),
            message: format!("expected segments {schema:?}, found {names:?}"),
        });
    }
    Ok(())
}

fn schema_err(line: usize, field: &str, message: impl Into<String>) -> CorpusError {
    CorpusError::SchemaViolation {
        line,
        field: field.into(),
        message: message.into(),
    }
}

fn parse_line(line: usize, raw: &str, labels: &LabelSet) -> Result<Instance, CorpusError> {
    let value: Value =
        serde_json::from_str(raw).map_err(|e| schema_err(line, "<record>", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| schema_err(line, "<record>", "expected a JSON object"))?;
    for key in obj.keys() {
        if !matches!(key.as_str(), "id" | "segments" | "label") {
            return Err(schema_err(line, key, "unexpected field"));
        }
    }
    let id = match obj.get("id") {
        Some(Value::String(s)) if !s.is_empty() => s.clone(),
        Some(Value::String(_)) => return Err(schema_err(line, "id", "must be non-empty")),
        Some(_) => return Err(schema_err(line, "id", "must be a string")),
        None => return Err(schema_err(line, "id", "missing")),
    };
    let raw_segments = match obj.get("segments") {
        Some(Value::Array(a)) => a,
        Some(_) => return Err(schema_err(line, "segments", "must be an array")),
        None => return Err(schema_err(line, "segments", "missing")),
    };
    let mut segments = Vec::with_capacity(raw_segments.len());
    for (k, seg) in raw_segments.iter().enumerate() {
        let field = format!("segments[{k}]");
        let seg = seg
            .as_object()
            .ok_or_else(|| schema_err(line, &field, "expected an object"))?;
        if seg.len() != 2 {
            return Err(schema_err(line, &field, "expected exactly {name, text}"));
        }
        let name = seg
            .get("name")
            .and_then(Value::as_str)
            .ok_or_else(|| schema_err(line, &format!("{field}.name"), "missing or not a string"))?;
        let text = seg
            .get("text")
            .and_then(Value::as_str)
            .ok_or_else(|| schema_err(line, &format!("{field}.text"), "missing or not a string"))?;
        segments.push(Segment::new(name, text));
    }
    let label = match obj.get("label") {
        Some(Value::String(s)) => s,
        Some(_) => return Err(schema_err(line, "label", "must be a string")),
        None => return Err(schema_err(line, "label", "missing")),
    };
    let gold = labels
        .index_of(label)
        .ok_or_else(|| CorpusError::UnknownLabel {
            line,
            label: label.clone(),
        })?;
    Ok(Instance { id, segments, gold })
}

/// Loads and validates a JSONL corpus against `manifest`. Blank lines are
/// skipped; reported line numbers are 1-based physical lines.
pub fn load_corpus(path: &Path, manifest: &Manifest) -> Result<Corpus, CorpusError> {
    manifest.validate()?;
    if !path.exists() {
        return Err(CorpusError::MissingFile(path.to_path_buf()));
    }
    let file = fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let labels = manifest.label_set()?;
    let mut instances = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let inst = parse_line(line_no, &line, &labels)?;
        check_schema(line_no, &inst.segments, &manifest.segments)?;
        if !ids.insert(inst.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: line_no,
                id: inst.id,
            });
        }
        instances.push(inst);
    }
    if instances.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    Ok(Corpus {
        label_set: labels,
        instances,
        manifest: manifest.clone(),
    })
}

pub const WHITESPACE: &str = "whitespace";

/// Engine-level tokenizer. Omission happens on these tokens, and perturbed
/// inputs are rebuilt with [`Tokenizer::join`].
pub trait Tokenizer: Send + Sync {
    fn id(&self) -> &str;
    fn tokenize(&self, text: &str) -> Vec<String>;
    fn join(&self, tokens: &[&str]) -> String;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn id(&self) -> &str {
        WHITESPACE
    }

    fn tokenize(&self, text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_owned).collect()
    }

    fn join(&self, tokens: &[&str]) -> String {
        tokens.join(" ")
    }
}

pub fn tokenizer_by_id(id: &str) -> Result<Box<dyn Tokenizer>, CorpusError> {
    match id {
        WHITESPACE => Ok(Box::new(WhitespaceTokenizer)),
        other => Err(CorpusError::UnknownTokenizer(other.to_string())),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentTokens {
    pub name: String,
    pub tokens: Vec<String>,
}

/// Per-segment token lists, in instance segment order.
pub fn tokenize(instance: &Instance, tokenizer: &dyn Tokenizer) -> Vec<SegmentTokens> {
    instance
        .segments
        .iter()
        .map(|s| SegmentTokens {
            name: s.name.clone(),
            tokens: tokenizer.tokenize(&s.text),
        })
        .collect()
}

/// m_i: total token count over all segments.
pub fn token_count(tokens: &[SegmentTokens]) -> usize {
    tokens.iter().map(|s| s.tokens.len()).sum()
}
