use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    Backend, BackendError, KeyedInput, ModelInput, Omission, ScoreKey, ScoreVector,
};
use crate::corpus::LabelSet;

/// One line of the cache file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheEntry {
    pub backend: String,
    pub instance: String,
    pub omit: Option<Omission>,
    pub logits: Vec<f64>,
    pub checksum: String,
}

impl CacheEntry {
    pub fn new(key: &ScoreKey, logits: &ScoreVector) -> Self {
        Self {
            backend: key.backend.clone(),
            instance: key.instance.clone(),
            omit: key.omit.clone(),
            logits: logits.0.clone(),
            checksum: checksum(key, &logits.0),
        }
    }

    pub fn key(&self) -> ScoreKey {
        ScoreKey {
            backend: self.backend.clone(),
            instance: self.instance.clone(),
            omit: self.omit.clone(),
        }
    }

    pub fn verify(&self) -> bool {
        self.checksum == checksum(&self.key(), &self.logits)
    }
}

/// SHA-256 over the key fields and the exact bit patterns of the logits.
fn checksum(key: &ScoreKey, logits: &[f64]) -> String {
    let mut h = Sha256::new();
    h.update(key.backend.as_bytes());
    h.update([0x1f]);
    h.update(key.instance.as_bytes());
    h.update([0x1f]);
    match &key.omit {
        None => h.update(b"full"),
        Some(o) => {
            h.update(o.segment.as_bytes());
            h.update([0x1e]);
            h.update(o.position.to_le_bytes());
        }
    }
    h.update([0x1f]);
    for v in logits {
        h.update(v.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Append-only, content-addressed logit store.
///
/// Readers take a shared lock on the index; appends are serialized through
/// the writer mutex so every line hits the file whole.
pub struct LogitCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<ScoreKey, ScoreVector>>,
    writer: Mutex<Option<BufWriter<File>>>,
}

impl std::fmt::Debug for LogitCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogitCache")
            .field("path", &self.path)
            .field("len", &self.len())
            .finish()
    }
}

impl LogitCache {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            entries: RwLock::new(HashMap::new()),
            writer: Mutex::new(None),
        }
    }

    /// Opens (or creates) a cache file, verifying every entry's checksum.
    /// A trailing line without a newline is the residue of an interrupted
    /// append; if it does not parse it is truncated away.
    pub fn open(path: &Path) -> Result<Self, BackendError> {
        let mut entries = HashMap::new();
        if path.exists() {
            let bytes = std::fs::read(path)?;
            let mut offset = 0usize;
            let mut line_no = 0usize;
            let mut valid_len = 0usize;
            while offset < bytes.len() {
                line_no += 1;
                let end = bytes[offset..]
                    .iter()
                    .position(|&b| b == b'\n')
                    .map(|p| offset + p);
                let (line, next, terminated) = match end {
                    Some(e) => (&bytes[offset..e], e + 1, true),
                    None => (&bytes[offset..], bytes.len(), false),
                };
                if line.iter().all(u8::is_ascii_whitespace) {
                    offset = next;
                    valid_len = next;
                    continue;
                }
                match serde_json::from_slice::<CacheEntry>(line) {
                    Ok(entry) => {
                        if !entry.verify() {
                            return Err(BackendError::CacheCorrupt {
                                line: line_no,
                                message: "checksum mismatch".into(),
                            });
                        }
                        let key = entry.key();
                        let logits = ScoreVector(entry.logits);
                        if let Some(prev) = entries.get(&key) {
                            if prev != &logits {
                                return Err(BackendError::CacheCorrupt {
                                    line: line_no,
                                    message: format!("conflicting entries for {key}"),
                                });
                            }
                        }
                        entries.insert(key, logits);
                        valid_len = next;
                    }
                    Err(e) if terminated => {
                        return Err(BackendError::CacheCorrupt {
                            line: line_no,
                            message: e.to_string(),
                        });
                    }
                    Err(_) => {
                        log::warn!(
                            "dropping incomplete trailing cache line {line_no} in {}",
                            path.display()
                        );
                    }
                }
                offset = next;
            }
            if valid_len < bytes.len() {
                OpenOptions::new().write(true).open(path)?.set_len(valid_len as u64)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(BufWriter::new(file))),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, key: &ScoreKey) -> bool {
        self.entries.read().expect("cache lock").contains_key(key)
    }

    pub fn get(&self, key: &ScoreKey) -> Result<ScoreVector, BackendError> {
        self.entries
            .read()
            .expect("cache lock")
            .get(key)
            .cloned()
            .ok_or_else(|| BackendError::CacheMiss(key.clone()))
    }

    /// Stores `logits` under `key`. Re-putting identical logits is a no-op;
    /// different logits for an existing key are rejected.
    pub fn put(&self, key: &ScoreKey, logits: &ScoreVector) -> Result<(), BackendError> {
        if key.backend.is_empty() || key.instance.is_empty() {
            return Err(BackendError::Protocol("empty cache key component".into()));
        }
        if logits.0.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::NonFinite(key.backend.clone()));
        }
        let mut writer = self.writer.lock().expect("cache writer lock");
        {
            let entries = self.entries.read().expect("cache lock");
            if let Some(prev) = entries.get(key) {
                return if prev == logits {
                    Ok(())
                } else {
                    Err(BackendError::CacheConflict(key.clone()))
                };
            }
        }
        if let Some(w) = writer.as_mut() {
            let mut line = serde_json::to_vec(&CacheEntry::new(key, logits))
                .map_err(|e| BackendError::Protocol(e.to_string()))?;
            line.push(b'\n');
            w.write_all(&line)?;
            w.flush()?;
        }
        self.entries
            .write()
            .expect("cache lock")
            .insert(key.clone(), logits.clone());
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheMode {
    /// Every lookup must hit.
    Strict,
    /// Misses fall through to the wrapped backend and are back-filled.
    #[default]
    Lazy,
}

/// Backend view over a [`LogitCache`], optionally wrapping the backend that
/// produced the logits.
pub struct CachedBackend {
    id: String,
    labels: LabelSet,
    segments: Option<Vec<String>>,
    inner: Option<Arc<dyn Backend>>,
    cache: Arc<LogitCache>,
    mode: CacheMode,
}

impl CachedBackend {
    /// Wraps `inner`; the cached backend reports the inner id so that
    /// attribution records are identical with or without the cache.
    pub fn wrap(inner: Arc<dyn Backend>, cache: Arc<LogitCache>, mode: CacheMode) -> Self {
        Self {
            id: inner.id().to_string(),
            labels: inner.labels().clone(),
            segments: inner.consumed_segments().map(<[String]>::to_vec),
            inner: Some(inner),
            cache,
            mode,
        }
    }

    /// Offline view over a pre-filled cache; always strict.
    pub fn offline(
        id: impl Into<String>,
        labels: LabelSet,
        segments: Option<Vec<String>>,
        cache: Arc<LogitCache>,
    ) -> Self {
        Self {
            id: id.into(),
            labels,
            segments,
            inner: None,
            cache,
            mode: CacheMode::Strict,
        }
    }

    pub fn cache(&self) -> &Arc<LogitCache> {
        &self.cache
    }

    pub fn mode(&self) -> CacheMode {
        self.mode
    }
}

impl Backend for CachedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn labels(&self) -> &LabelSet {
        &self.labels
    }

    fn consumed_segments(&self) -> Option<&[String]> {
        self.segments.as_deref()
    }

    /// Unkeyed inputs have no cache address: lazy mode passes them through,
    /// strict mode cannot serve them.
    fn score_batch(&self, inputs: &[ModelInput]) -> Result<Vec<ScoreVector>, BackendError> {
        match (&self.inner, self.mode) {
            (Some(inner), CacheMode::Lazy) => inner.score_batch(inputs),
            _ => Err(BackendError::Protocol(format!(
                "strict cache backend `{}` can only serve keyed requests",
                self.id
            ))),
        }
    }

    fn score_keyed(&self, requests: &[KeyedInput]) -> Result<Vec<ScoreVector>, BackendError> {
        let mut out: Vec<Option<ScoreVector>> = Vec::with_capacity(requests.len());
        let mut missing = Vec::new();
        for (i, req) in requests.iter().enumerate() {
            match self.cache.get(&req.key) {
                Ok(v) => out.push(Some(v)),
                Err(BackendError::CacheMiss(key)) => {
                    if self.mode == CacheMode::Strict || self.inner.is_none() {
                        return Err(BackendError::CacheMiss(key));
                    }
                    out.push(None);
                    missing.push(i);
                }
                Err(e) => return Err(e),
            }
        }
        if !missing.is_empty() {
            let inner = self.inner.as_ref().expect("lazy mode has an inner backend");
            let batch: Vec<KeyedInput> = missing.iter().map(|&i| requests[i].clone()).collect();
            let scored = inner.score_keyed(&batch)?;
            super::validate_scores(inner.id(), inner.labels(), batch.len(), &scored)?;
            for (&i, v) in missing.iter().zip(scored) {
                self.cache.put(&requests[i].key, &v)?;
                out[i] = Some(v);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{CountingBackend, LexiconModel};
    use crate::corpus::Segment;

    fn labels() -> LabelSet {
        LabelSet::new(["entailment", "neutral", "contradiction"]).unwrap()
    }

    #[test]
    fn put_then_get_is_bit_exact() {
        let cache = LogitCache::in_memory();
        let key = ScoreKey::full("main", "m1");
        let v = ScoreVector(vec![0.1 + 0.2, -1e-300, 12345.678901234567]);
        cache.put(&key, &v).unwrap();
        let got = cache.get(&key).unwrap();
        for (a, b) in got.0.iter().zip(&v.0) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn absent_key_misses() {
        let cache = LogitCache::in_memory();
        assert!(matches!(
            cache.get(&ScoreKey::full("main", "nope")),
            Err(BackendError::CacheMiss(_))
        ));
    }

    #[test]
    fn file_round_trip_is_bit_exact_and_detects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let key = ScoreKey::omitted("main", "m1", "hypothesis", 2);
        let v = ScoreVector(vec![std::f64::consts::PI, -0.0, 1.0 / 3.0]);
        {
            let cache = LogitCache::open(&path).unwrap();
            cache.put(&key, &v).unwrap();
            cache.put(&key, &v).unwrap();
            assert!(matches!(
                cache.put(&key, &ScoreVector(vec![0.0; 3])),
                Err(BackendError::CacheConflict(_))
            ));
        }
        let reopened = LogitCache::open(&path).unwrap();
        assert_eq!(reopened.len(), 1);
        let got = reopened.get(&key).unwrap();
        assert!(got.0.iter().zip(&v.0).all(|(a, b)| a.to_bits() == b.to_bits()));

        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("3.14159", "3.14158")).unwrap();
        assert!(matches!(
            LogitCache::open(&path),
            Err(BackendError::CacheCorrupt { line: 1, .. })
        ));
    }

    #[test]
    fn truncated_trailing_line_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        {
            let cache = LogitCache::open(&path).unwrap();
            cache.put(&ScoreKey::full("b", "i1"), &ScoreVector(vec![1.0])).unwrap();
        }
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(br#"{"backend":"b","inst"#);
        std::fs::write(&path, &bytes).unwrap();
        let cache = LogitCache::open(&path).unwrap();
        assert_eq!(cache.len(), 1);
        cache.put(&ScoreKey::full("b", "i2"), &ScoreVector(vec![2.0])).unwrap();
        drop(cache);
        assert_eq!(LogitCache::open(&path).unwrap().len(), 2);
    }

    #[test]
    fn strict_mode_errors_lazy_mode_backfills() {
        let inner = Arc::new(CountingBackend::new(
            LexiconModel::empty("main", labels()).with_weight("x", vec![1.0, 0.0, 0.0]),
        ));
        let cache = Arc::new(LogitCache::in_memory());
        let req = KeyedInput {
            key: ScoreKey::full("main", "i1"),
            input: ModelInput::new(vec![Segment::new("hypothesis", "x y")]),
        };

        let strict = CachedBackend::wrap(inner.clone(), cache.clone(), CacheMode::Strict);
        assert!(matches!(
            strict.score_keyed(std::slice::from_ref(&req)),
            Err(BackendError::CacheMiss(_))
        ));

        let lazy = CachedBackend::wrap(inner.clone(), cache.clone(), CacheMode::Lazy);
        let first = lazy.score_keyed(std::slice::from_ref(&req)).unwrap();
        assert_eq!(inner.scored(), 1);
        let second = strict.score_keyed(std::slice::from_ref(&req)).unwrap();
        assert_eq!(first, second);
        assert_eq!(inner.scored(), 1);
        assert_eq!(lazy.id(), "main");
    }
}
