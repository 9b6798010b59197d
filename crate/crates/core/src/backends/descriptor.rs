use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    Backend, BackendError, CacheMode, CachedBackend, LexiconModel, LinearBowModel, LogitCache,
    RemoteBackend,
};
use crate::corpus::LabelSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Lexicon,
    LinearBow,
    Cache,
    Remote,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LexiconConfig {
    #[serde(default)]
    pub bias: Option<Vec<f64>>,
    #[serde(default)]
    pub weights: BTreeMap<String, Vec<f64>>,
    /// JSON object `{token: [w_0, ..., w_k]}`, merged under inline weights.
    #[serde(default)]
    pub weights_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearBowConfig {
    #[serde(default)]
    pub bias: Option<Vec<f64>>,
    #[serde(default)]
    pub weights: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub weights_path: Option<PathBuf>,
    #[serde(default = "yes")]
    pub lowercase: bool,
    #[serde(default)]
    pub binary: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheConfig {
    pub path: PathBuf,
    #[serde(default)]
    pub mode: CacheMode,
    /// Descriptor of the wrapped backend. Without it the cache is served
    /// offline in strict mode.
    #[serde(default)]
    pub inner: Option<PathBuf>,
}

fn default_in_flight() -> usize {
    4
}

fn default_batch() -> usize {
    64
}

fn default_timeout() -> u64 {
    60
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteConfig {
    pub endpoint: String,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_batch")]
    pub max_batch: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "yes")]
    pub check_meta: bool,
}

/// Declarative backend configuration, usually a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendDescriptor {
    pub id: String,
    pub kind: BackendKind,
    pub labels: Vec<String>,
    /// Consumed segments; omitted means all corpus segments.
    #[serde(default)]
    pub segments: Option<Vec<String>>,
    #[serde(default)]
    pub lexicon: Option<LexiconConfig>,
    #[serde(default)]
    pub linear_bow: Option<LinearBowConfig>,
    #[serde(default)]
    pub cache: Option<CacheConfig>,
    #[serde(default)]
    pub remote: Option<RemoteConfig>,
}

fn invalid(msg: impl Into<String>) -> BackendError {
    BackendError::InvalidDescriptor(msg.into())
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_weights(
    base: &Path,
    inline: &BTreeMap<String, Vec<f64>>,
    path: Option<&PathBuf>,
) -> Result<BTreeMap<String, Vec<f64>>, BackendError> {
    let mut weights = BTreeMap::new();
    if let Some(p) = path {
        let raw = std::fs::read_to_string(resolve(base, p))?;
        weights = serde_json::from_str(&raw)
            .map_err(|e| invalid(format!("weights file {}: {e}", p.display())))?;
    }
    weights.extend(inline.iter().map(|(k, v)| (k.clone(), v.clone())));
    Ok(weights)
}

impl BackendDescriptor {
    pub fn from_toml(raw: &str) -> Result<Self, BackendError> {
        toml::from_str(raw).map_err(|e| invalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let raw = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&raw).map_err(|e| invalid(e.to_string()))
        } else {
            Self::from_toml(&raw)
        }
    }

    pub fn label_set(&self) -> Result<LabelSet, BackendError> {
        LabelSet::new(self.labels.iter().cloned()).map_err(|e| invalid(e.to_string()))
    }

    /// Instantiates the backend. Relative paths resolve against `base_dir`.
    pub fn build(&self, base_dir: &Path) -> Result<Arc<dyn Backend>, BackendError> {
        if self.id.is_empty() {
            return Err(invalid("empty backend id"));
        }
        let labels = self.label_set()?;
        let zeros = vec![0.0; labels.len()];
        match self.kind {
            BackendKind::Lexicon => {
                let cfg = self
                    .lexicon
                    .as_ref()
                    .ok_or_else(|| invalid("kind = \"lexicon\" requires a [lexicon] table"))?;
                let weights = load_weights(base_dir, &cfg.weights, cfg.weights_path.as_ref())?;
                let bias = cfg.bias.clone().unwrap_or(zeros);
                let mut model = LexiconModel::new(self.id.clone(), labels, bias, weights)?;
                if let Some(s) = &self.segments {
                    model = model.consuming(s.clone());
                }
                Ok(Arc::new(model))
            }
            BackendKind::LinearBow => {
                let cfg = self.linear_bow.as_ref().ok_or_else(|| {
                    invalid("kind = \"linear-bow\" requires a [linear_bow] table")
                })?;
                let weights = load_weights(base_dir, &cfg.weights, cfg.weights_path.as_ref())?;
                let bias = cfg.bias.clone().unwrap_or(zeros);
                let mut model = LinearBowModel::new(
                    self.id.clone(),
                    labels,
                    bias,
                    weights,
                    cfg.lowercase,
                    cfg.binary,
                )?;
                if let Some(s) = &self.segments {
                    model = model.consuming(s.clone());
                }
                Ok(Arc::new(model))
            }
            BackendKind::Remote => {
                let cfg = self
                    .remote
                    .as_ref()
                    .ok_or_else(|| invalid("kind = \"remote\" requires a [remote] table"))?;
                let mut remote = RemoteBackend::new(
                    self.id.clone(),
                    labels,
                    cfg.endpoint.clone(),
                    cfg.max_in_flight,
                    cfg.max_batch,
                    Duration::from_secs(cfg.timeout_secs),
                );
                if let Some(s) = &self.segments {
                    remote = remote.consuming(s.clone());
                }
                if cfg.check_meta {
                    remote.check_meta()?;
                }
                Ok(Arc::new(remote))
            }
            BackendKind::Cache => {
                let cfg = self
                    .cache
                    .as_ref()
                    .ok_or_else(|| invalid("kind = \"cache\" requires a [cache] table"))?;
                let cache = Arc::new(LogitCache::open(&resolve(base_dir, &cfg.path))?);
                match &cfg.inner {
                    Some(inner_path) => {
                        let inner_path = resolve(base_dir, inner_path);
                        let inner = load_backend(&inner_path)?;
                        if inner.id() != self.id {
                            return Err(invalid(format!(
                                "cache id `{}` must equal wrapped backend id `{}`",
                                self.id,
                                inner.id()
                            )));
                        }
                        if inner.labels() != &labels {
                            return Err(BackendError::LabelMismatch {
                                backend: inner.labels().names().to_vec(),
                                expected: labels.names().to_vec(),
                            });
                        }
                        Ok(Arc::new(CachedBackend::wrap(inner, cache, cfg.mode)))
                    }
                    None => {
                        if cfg.mode == CacheMode::Lazy {
                            return Err(invalid("lazy cache mode requires an inner backend"));
                        }
                        Ok(Arc::new(CachedBackend::offline(
                            self.id.clone(),
                            labels,
                            self.segments.clone(),
                            cache,
                        )))
                    }
                }
            }
        }
    }
}

/// Loads a descriptor file and builds its backend.
pub fn load_backend(path: &Path) -> Result<Arc<dyn Backend>, BackendError> {
    let desc = BackendDescriptor::load(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    desc.build(base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{score_batch, ModelInput};
    use crate::corpus::Segment;

    const LEXICON: &str = r#"
id = "biased"
kind = "lexicon"
labels = ["entailment", "neutral", "contradiction"]
segments = ["hypothesis"]

[lexicon]
bias = [0.0, 0.1, 0.0]

[lexicon.weights]
never = [0.0, 0.0, 2.0]
"#;

    #[test]
    fn builds_lexicon_from_toml() {
        let desc = BackendDescriptor::from_toml(LEXICON).unwrap();
        let b = desc.build(Path::new(".")).unwrap();
        assert_eq!(b.id(), "biased");
        assert_eq!(b.consumed_segments(), Some(&["hypothesis".to_string()][..]));
        let out = score_batch(
            b.as_ref(),
            &[ModelInput::new(vec![Segment::new("hypothesis", "He never worked.")])],
        )
        .unwrap();
        assert_eq!(out[0].0, vec![0.0, 0.1, 2.0]);
    }

    #[test]
    fn missing_table_and_bad_kind_rejected() {
        let no_table = "id=\"x\"\nkind=\"lexicon\"\nlabels=[\"a\",\"b\"]\n";
        let desc = BackendDescriptor::from_toml(no_table).unwrap();
        assert!(matches!(
            desc.build(Path::new(".")),
            Err(BackendError::InvalidDescriptor(_))
        ));
        assert!(BackendDescriptor::from_toml("id=\"x\"\nkind=\"bert\"\nlabels=[\"a\"]\n").is_err());
    }

    #[test]
    fn cache_descriptor_wraps_inner_by_path() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("inner.toml"), LEXICON).unwrap();
        let cache_toml = r#"
id = "biased"
kind = "cache"
labels = ["entailment", "neutral", "contradiction"]

[cache]
path = "biased.cache.jsonl"
mode = "lazy"
inner = "inner.toml"
"#;
        std::fs::write(dir.path().join("cache.toml"), cache_toml).unwrap();
        let b = load_backend(&dir.path().join("cache.toml")).unwrap();
        assert_eq!(b.id(), "biased");
        assert_eq!(b.consumed_segments(), Some(&["hypothesis".to_string()][..]));

        let mismatched = cache_toml.replace("id = \"biased\"", "id = \"other\"");
        std::fs::write(dir.path().join("bad.toml"), mismatched).unwrap();
        assert!(load_backend(&dir.path().join("bad.toml")).is_err());
    }
}
