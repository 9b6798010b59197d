//! Human-in-the-loop calibration of the similar/different threshold.
//!
//! Instances are sampled uniformly across equal-width similarity bins for
//! annotation. Annotators judge each one `similar` (positive class) or
//! `different` (negative class). The threshold classifier labels an instance
//! `different` iff its similarity is strictly below the threshold, and the
//! threshold is chosen to maximize F1 on the negative class.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agreement::{AgreementError, AgreementRecord, Histogram};
use crate::jsonl::{self, JsonlError};

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("no easy instance with a defined similarity to sample from")]
    EmptyPool,
    #[error("invalid sample plan: {0}")]
    InvalidPlan(String),
    #[error("labels must contain at least one `similar` and one `different` judgment")]
    SingleClassInput,
    #[error("all labeled similarities are equal; no midpoint threshold exists")]
    NoCandidateThreshold,
    #[error("similarity for `{0}` is not a finite number")]
    NonFinite(String),
    #[error("no instance was judged by two or more annotators")]
    NoOverlap,
    #[error("duplicate judgment by `{annotator}` on `{instance}`")]
    DuplicateJudgment { instance: String, annotator: String },
    #[error(transparent)]
    Agreement(#[from] AgreementError),
    #[error(transparent)]
    File(#[from] JsonlError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid calibration file: {0}")]
    Format(String),
}

/// Binary human judgment. `Different` is the negative class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Judgment {
    Similar,
    Different,
}

impl Judgment {
    pub fn is_negative(self) -> bool {
        self == Judgment::Different
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub instance: String,
    pub annotator: String,
    pub judgment: Judgment,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

pub fn validate_annotations(records: &[AnnotationRecord]) -> Result<(), CalibrationError> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert((r.instance.as_str(), r.annotator.as_str())) {
            return Err(CalibrationError::DuplicateJudgment {
                instance: r.instance.clone(),
                annotator: r.annotator.clone(),
            });
        }
    }
    Ok(())
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>, CalibrationError> {
    let records: Vec<AnnotationRecord> = jsonl::read(path)?;
    validate_annotations(&records)?;
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub bins: usize,
    /// Maximum items drawn per bin.
    pub quota: usize,
    /// Items judged by every annotator.
    pub overlap: usize,
    pub seed: u64,
    pub annotators: Vec<String>,
}

impl Default for SamplePlan {
    fn default() -> Self {
        Self {
            bins: 20,
            quota: 12,
            overlap: 40,
            seed: 0,
            annotators: vec!["a1".into(), "a2".into()],
        }
    }
}

impl SamplePlan {
    /// Per-bin quota for a total budget: `total / bins`, so the plan never
    /// exceeds `total` items.
    pub fn for_total(total: usize, bins: usize) -> Self {
        Self {
            bins,
            quota: total / bins.max(1),
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), CalibrationError> {
        if self.bins == 0 {
            return Err(CalibrationError::InvalidPlan("bins must be at least 1".into()));
        }
        if self.annotators.is_empty() {
            return Err(CalibrationError::InvalidPlan("no annotators".into()));
        }
        let unique: HashSet<_> = self.annotators.iter().collect();
        if unique.len() != self.annotators.len() {
            return Err(CalibrationError::InvalidPlan("duplicate annotator".into()));
        }
        if self.overlap > 0 && self.annotators.len() < 2 {
            return Err(CalibrationError::InvalidPlan(
                "overlap items need at least two annotators".into(),
            ));
        }
        Ok(())
    }
}

/// One annotation task. Similarity values are deliberately absent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampledTask {
    pub instance: String,
    pub bin: usize,
    pub overlap: bool,
    pub assignees: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskList {
    pub tasks: Vec<SampledTask>,
    pub histogram: Histogram,
    /// Items drawn per bin.
    pub per_bin: Vec<usize>,
}

/// Splits `total` across bins proportionally to `weights` by largest
/// remainder; ties go to the lower bin index.
fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut shares: Vec<usize> = weights.iter().map(|w| total * w / sum).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = total * weights[a] % sum;
        let rb = total * weights[b] % sum;
        rb.cmp(&ra).then(a.cmp(&b))
    });
    let missing = total - shares.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        shares[i] += 1;
    }
    shares
}

/// Draws up to `plan.quota` items per equal-width similarity bin from the
/// easy, non-degenerate records and designates the overlap subset.
pub fn sample_for_annotation(
    records: &[AgreementRecord],
    plan: &SamplePlan,
) -> Result<TaskList, CalibrationError> {
    plan.validate()?;
    let pool: Vec<(&str, f64)> = records
        .iter()
        .filter(|r| r.easy)
        .filter_map(|r| r.similarity.map(|s| (r.instance.as_str(), s)))
        .collect();
    if pool.is_empty() {
        return Err(CalibrationError::EmptyPool);
    }
    let values: Vec<f64> = pool.iter().map(|p| p.1).collect();
    let histogram = Histogram::build(&values, plan.bins)?;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); histogram.bins()];
    for (i, &v) in values.iter().enumerate() {
        members[histogram.bin_of(v)].push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut drawn: Vec<Vec<usize>> = Vec::with_capacity(members.len());
    for bin in &members {
        let take = plan.quota.min(bin.len());
        let mut picks: Vec<usize> = index::sample(&mut rng, bin.len(), take)
            .into_iter()
            .map(|k| bin[k])
            .collect();
        picks.sort_unstable();
        drawn.push(picks);
    }
    let per_bin: Vec<usize> = drawn.iter().map(Vec::len).collect();
    let total: usize = per_bin.iter().sum();
    if plan.overlap > total {
        return Err(CalibrationError::InvalidPlan(format!(
            "overlap {} exceeds the {total} sampled items",
            plan.overlap
        )));
    }

    let overlap_per_bin = apportion(plan.overlap, &per_bin);
    let mut tasks = Vec::with_capacity(total);
    for (bin, picks) in drawn.iter().enumerate() {
        let shared: HashSet<usize> = index::sample(&mut rng, picks.len(), overlap_per_bin[bin])
            .into_iter()
            .collect();
        for (k, &p) in picks.iter().enumerate() {
            tasks.push(SampledTask {
                instance: pool[p].0.to_string(),
                bin,
                overlap: shared.contains(&k),
                assignees: Vec::new(),
            });
        }
    }
    // presentation order must not reveal the similarity bin
    tasks.shuffle(&mut rng);
    let mut next = 0usize;
    for task in &mut tasks {
        if task.overlap {
            task.assignees = plan.annotators.clone();
        } else {
            task.assignees = vec![plan.annotators[next % plan.annotators.len()].clone()];
            next += 1;
        }
    }
    Ok(TaskList {
        tasks,
        histogram,
        per_bin,
    })
}

fn split_by_class(labeled: &[(f64, Judgment)]) -> Result<(Vec<f64>, Vec<f64>), CalibrationError> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, &(s, j)) in labeled.iter().enumerate() {
        if !s.is_finite() {
            return Err(CalibrationError::NonFinite(format!("#{i}")));
        }
        match j {
            Judgment::Similar => pos.push(s),
            Judgment::Different => neg.push(s),
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(CalibrationError::SingleClassInput);
    }
    Ok((pos, neg))
}

/// Probability that a random `similar` item has a higher similarity than a
/// random `different` one, ties counting one half. Computed from mid-ranks
/// in O(n log n).
pub fn auc(labeled: &[(f64, Judgment)]) -> Result<f64, CalibrationError> {
    let (pos, neg) = split_by_class(labeled)?;
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // twice the positive rank sum, in exact integer arithmetic
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i + 1;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let twice_mid_rank = (i + 1 + j) as u128;
        let positives = all[i..j].iter().filter(|e| e.1).count() as u128;
        twice_rank_sum += twice_mid_rank * positives;
        i = j;
    }
    let n_pos = pos.len() as u128;
    let n_neg = neg.len() as u128;
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// F1 of the negative class from confusion counts.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub similar: usize,
    pub different: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutMetrics {
    pub f1_negative: f64,
    pub auc: Option<f64>,
    pub counts: ClassCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub threshold: f64,
    pub f1_negative: f64,
    pub auc: f64,
    /// Accuracy-style agreement on items judged by several annotators.
    pub iaa: Option<f64>,
    pub counts: ClassCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout: Option<HoldoutMetrics>,
}

impl CalibrationResult {
    pub fn load(path: &Path) -> Result<Self, CalibrationError> {
        let raw = std::fs::read_to_string(path)?;
        serde_json::from_str(&raw).map_err(|e| CalibrationError::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), CalibrationError> {
        let mut json =
            serde_json::to_string_pretty(self).map_err(|e| CalibrationError::Format(e.to_string()))?;
        json.push('\n');
        std::fs::write(path, json)?;
        Ok(())
    }
}

fn negative_f1_at(labeled: &[(f64, Judgment)], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for &(s, j) in labeled {
        match (s < threshold, j.is_negative()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    f1_from_counts(tp, fp, fn_)
}

/// Picks the midpoint threshold maximizing negative-class F1, preferring the
/// smallest threshold among ties.
pub fn tune_threshold(labeled: &[(f64, Judgment)]) -> Result<CalibrationResult, CalibrationError> {
    let (pos, neg) = split_by_class(labeled)?;
    let mut sorted: Vec<(f64, bool)> = labeled
        .iter()
        .map(|&(s, j)| (s, j.is_negative()))
        .collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total_neg = neg.len();

    let mut best: Option<(f64, f64)> = None;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if i == sorted.len() {
            break;
        }
        // every value <= v is now below the candidate midpoint
        let threshold = (v + sorted[i].0) / 2.0;
        let f1 = f1_from_counts(tp, fp, total_neg - tp);
        if best.is_none_or(|(_, b)| f1 > b) {
            best = Some((threshold, f1));
        }
    }
    let (threshold, f1_negative) = best.ok_or(CalibrationError::NoCandidateThreshold)?;
    Ok(CalibrationResult {
        threshold,
        f1_negative,
        auc: auc(labeled)?,
        iaa: None,
        counts: ClassCounts {
            similar: pos.len(),
            different: neg.len(),
        },
        holdout: None,
    })
}

/// Fraction of multiply-judged instances on which all annotators agree.
pub fn iaa(annotations: &[AnnotationRecord]) -> Result<f64, CalibrationError> {
    let mut by_instance: BTreeMap<&str, Vec<Judgment>> = BTreeMap::new();
    for a in annotations {
        by_instance.entry(&a.instance).or_default().push(a.judgment);
    }
    let shared: Vec<&Vec<Judgment>> = by_instance.values().filter(|j| j.len() >= 2).collect();
    if shared.is_empty() {
        return Err(CalibrationError::NoOverlap);
    }
    let agree = shared
        .iter()
        .filter(|j| j.iter().all(|&x| x == j[0]))
        .count();
    Ok(agree as f64 / shared.len() as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    /// (instance, similarity, consensus judgment), in agreement-file order.
    pub items: Vec<(String, f64, Judgment)>,
    /// Multiply-judged instances whose annotators disagreed.
    pub disagreements: usize,
    /// Judged instances absent from the agreement file or without a defined
    /// similarity.
    pub unmatched: usize,
}

impl LabeledSet {
    pub fn pairs(&self) -> Vec<(f64, Judgment)> {
        self.items.iter().map(|(_, s, j)| (*s, *j)).collect()
    }
}

/// Joins judgments with similarities. Unanimous judgments become labels;
/// split decisions are left out and counted.
pub fn join_labels(
    records: &[AgreementRecord],
    annotations: &[AnnotationRecord],
) -> Result<LabeledSet, CalibrationError> {
    validate_annotations(annotations)?;
    let mut by_instance: HashMap<&str, Vec<Judgment>> = HashMap::new();
    for a in annotations {
        by_instance.entry(&a.instance).or_default().push(a.judgment);
    }
    let mut out = LabeledSet::default();
    let mut matched = HashSet::new();
    for r in records {
        let (Some(judgments), Some(sim)) = (by_instance.get(r.instance.as_str()), r.similarity)
        else {
            continue;
        };
        if !r.easy {
            continue;
        }
        matched.insert(r.instance.as_str());
        if judgments.iter().all(|&j| j == judgments[0]) {
            out.items.push((r.instance.clone(), sim, judgments[0]));
        } else {
            out.disagreements += 1;
        }
    }
    out.unmatched = by_instance.len() - matched.len();
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CalibrateOptions {
    /// Fraction of labeled items held out from tuning and used only for
    /// evaluation.
    pub holdout: Option<f64>,
    pub seed: u64,
}

/// Tunes the threshold on annotated agreement records and attaches IAA (and
/// holdout metrics when requested).
pub fn calibrate(
    records: &[AgreementRecord],
    annotations: &[AnnotationRecord],
    options: &CalibrateOptions,
) -> Result<CalibrationResult, CalibrationError> {
    let labeled = join_labels(records, annotations)?;
    let pairs = labeled.pairs();
    let mut result = match options.holdout {
        None => tune_threshold(&pairs)?,
        Some(frac) => {
            if !(0.0..1.0).contains(&frac) {
                return Err(CalibrationError::InvalidPlan(format!(
                    "holdout fraction {frac} not in [0, 1)"
                )));
            }
            let mut order: Vec<usize> = (0..pairs.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(options.seed));
            let n_hold = (pairs.len() as f64 * frac).round() as usize;
            let (hold_idx, train_idx) = order.split_at(n_hold);
            let train: Vec<_> = train_idx.iter().map(|&i| pairs[i]).collect();
            let hold: Vec<_> = hold_idx.iter().map(|&i| pairs[i]).collect();
            let mut r = tune_threshold(&train)?;
            if !hold.is_empty() {
                let negatives = hold.iter().filter(|p| p.1.is_negative()).count();
                r.holdout = Some(HoldoutMetrics {
                    f1_negative: negative_f1_at(&hold, r.threshold),
                    auc: auc(&hold).ok(),
                    counts: ClassCounts {
                        similar: hold.len() - negatives,
                        different: negatives,
                    },
                });
            }
            r
        }
    };
    result.iaa = match iaa(annotations) {
        Ok(v) => Some(v),
        Err(CalibrationError::NoOverlap) => None,
        Err(e) => return Err(e),
    };
    Ok(result)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub threshold: f64,
    /// All easy records, degenerate ones included.
    pub easy: usize,
    pub degenerate: usize,
    pub different: Vec<String>,
    pub similar: Vec<String>,
}

impl Partition {
    pub fn different_count(&self) -> usize {
        self.different.len()
    }

    /// Different items as a percentage of the easy set.
    pub fn different_pct(&self) -> f64 {
        if self.easy == 0 {
            0.0
        } else {
            100.0 * self.different.len() as f64 / self.easy as f64
        }
    }
}

/// Splits the easy, scored records at `threshold`: strictly below is
/// `different`.
pub fn classify_different(records: &[AgreementRecord], threshold: f64) -> Partition {
    let mut p = Partition {
        threshold,
        ..Default::default()
    };
    for r in records.iter().filter(|r| r.easy) {
        p.easy += 1;
        match r.similarity {
            Some(s) if s < threshold => p.different.push(r.instance.clone()),
            Some(_) => p.similar.push(r.instance.clone()),
            None => p.degenerate += 1,
        }
    }
    p
}
