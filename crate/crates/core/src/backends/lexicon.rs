use std::collections::{BTreeMap, HashSet};

use super::{Backend, BackendError, ModelInput, ScoreVector};
use crate::corpus::LabelSet;

fn check_row(labels: &LabelSet, what: &str, row: &[f64]) -> Result<(), BackendError> {
    if row.len() != labels.len() {
        return Err(BackendError::InvalidDescriptor(format!(
            "{what}: expected {} values, got {}",
            labels.len(),
            row.len()
        )));
    }
    if row.iter().any(|v| !v.is_finite()) {
        return Err(BackendError::InvalidDescriptor(format!(
            "{what}: non-finite weight"
        )));
    }
    Ok(())
}

/// Additive token model: `logit_c(x) = b_c + Σ_t w_c(t)` over every
/// whitespace token of every consumed segment. Tokens without an entry
/// contribute nothing.
#[derive(Debug, Clone)]
pub struct LexiconModel {
    id: String,
    labels: LabelSet,
    bias: Vec<f64>,
    weights: BTreeMap<String, Vec<f64>>,
    segments: Option<Vec<String>>,
}

impl LexiconModel {
    pub fn new(
        id: impl Into<String>,
        labels: LabelSet,
        bias: Vec<f64>,
        weights: BTreeMap<String, Vec<f64>>,
    ) -> Result<Self, BackendError> {
        check_row(&labels, "bias", &bias)?;
        for (token, row) in &weights {
            check_row(&labels, &format!("weight `{token}`"), row)?;
        }
        Ok(Self {
            id: id.into(),
            labels,
            bias,
            weights,
            segments: None,
        })
    }

    /// Zero bias, no weights.
    pub fn empty(id: impl Into<String>, labels: LabelSet) -> Self {
        let n = labels.len();
        Self {
            id: id.into(),
            labels,
            bias: vec![0.0; n],
            weights: BTreeMap::new(),
            segments: None,
        }
    }

    /// Restricts the model to the named segments (partial-input model).
    pub fn consuming(mut self, segments: Vec<String>) -> Self {
        self.segments = Some(segments);
        self
    }

    pub fn with_weight(mut self, token: impl Into<String>, row: Vec<f64>) -> Self {
        assert_eq!(row.len(), self.labels.len(), "weight row length");
        self.weights.insert(token.into(), row);
        self
    }

    pub fn weight(&self, token: &str, class: usize) -> f64 {
        self.weights.get(token).map_or(0.0, |w| w[class])
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    fn score_one(&self, input: &ModelInput) -> ScoreVector {
        let mut logits = self.bias.clone();
        for seg in &input.segments {
            for token in seg.text.split_whitespace() {
                if let Some(row) = self.weights.get(token) {
                    for (l, w) in logits.iter_mut().zip(row) {
                        *l += w;
                    }
                }
            }
        }
        ScoreVector(logits)
    }
}

impl Backend for LexiconModel {
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
        Ok(inputs.iter().map(|i| self.score_one(i)).collect())
    }
}

/// Linear bag-of-words classifier over segment-qualified features.
///
/// A weight keyed `"hypothesis:never"` fires only for `never` inside the
/// hypothesis segment; a bare key `"never"` fires in any segment. With
/// `binary` set, each feature counts once per segment regardless of
/// repetitions.
#[derive(Debug, Clone)]
pub struct LinearBowModel {
    id: String,
    labels: LabelSet,
    bias: Vec<f64>,
    weights: BTreeMap<String, Vec<f64>>,
    lowercase: bool,
    binary: bool,
    segments: Option<Vec<String>>,
}

impl LinearBowModel {
    pub fn new(
        id: impl Into<String>,
        labels: LabelSet,
        bias: Vec<f64>,
        weights: BTreeMap<String, Vec<f64>>,
        lowercase: bool,
        binary: bool,
    ) -> Result<Self, BackendError> {
        check_row(&labels, "bias", &bias)?;
        for (feature, row) in &weights {
            check_row(&labels, &format!("weight `{feature}`"), row)?;
        }
        Ok(Self {
            id: id.into(),
            labels,
            bias,
            weights,
            lowercase,
            binary,
            segments: None,
        })
    }

    pub fn consuming(mut self, segments: Vec<String>) -> Self {
        self.segments = Some(segments);
        self
    }

    fn add(&self, logits: &mut [f64], key: &str) {
        if let Some(row) = self.weights.get(key) {
            for (l, w) in logits.iter_mut().zip(row) {
                *l += w;
            }
        }
    }

    fn score_one(&self, input: &ModelInput) -> ScoreVector {
        let mut logits = self.bias.clone();
        for seg in &input.segments {
            let mut seen = HashSet::new();
            for raw in seg.text.split_whitespace() {
                let token = if self.lowercase {
                    raw.to_lowercase()
                } else {
                    raw.to_string()
                };
                if self.binary && !seen.insert(token.clone()) {
                    continue;
                }
                self.add(&mut logits, &token);
                self.add(&mut logits, &format!("{}:{}", seg.name, token));
            }
        }
        ScoreVector(logits)
    }
}

impl Backend for LinearBowModel {
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
        Ok(inputs.iter().map(|i| self.score_one(i)).collect())
    }
}
