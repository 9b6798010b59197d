//! Corpus-level audit artifacts: the easy/different summary table, label
//! distributions over total/easy/different subsets, and per-instance token
//! heatmap pages.
//!
//! Percent conventions: easy% is relative to the corpus size, different% is
//! relative to the easy count. Counts carry thousands separators and
//! percentages one decimal, e.g. `5,381 (54.8)`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agreement::{AgreementRecord, DegenerateFlag, Histogram};
use crate::attribution::AttributionVector;
use crate::calibration::classify_different;
use crate::corpus::{Corpus, LabelSet};
use crate::exec::Execution;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("input mismatch: {0}")]
    InputMismatch(String),
    #[error("instance `{0}` missing from {1}")]
    MissingId(String, &'static str),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// `9815` → `9,815`.
pub fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

pub fn percent(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        100.0 * part as f64 / whole as f64
    }
}

/// `count (pct)` with one decimal, e.g. `1,723 (32.0)`.
pub fn count_with_percent(count: usize, whole: usize) -> String {
    format!("{} ({:.1})", thousands(count), percent(count, whole))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsetSelector {
    Total,
    Easy,
    Different,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub subset: SubsetSelector,
    pub size: usize,
    /// Per-label counts, in label-set order.
    pub counts: Vec<usize>,
    /// Per-label fractions; all zero when the subset is empty.
    pub fractions: Vec<f64>,
}

impl Distribution {
    fn from_golds(subset: SubsetSelector, labels: &LabelSet, golds: impl Iterator<Item = usize>) -> Self {
        let mut counts = vec![0usize; labels.len()];
        for g in golds {
            counts[g] += 1;
        }
        let size: usize = counts.iter().sum();
        let fractions = counts
            .iter()
            .map(|&c| if size == 0 { 0.0 } else { c as f64 / size as f64 })
            .collect();
        Self {
            subset,
            size,
            counts,
            fractions,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }
}

/// Gold-label distribution of one subset of the corpus.
pub fn label_distribution(
    selector: SubsetSelector,
    corpus: &Corpus,
    records: &[AgreementRecord],
    threshold: f64,
) -> Distribution {
    let labels = &corpus.label_set;
    let dist = match selector {
        SubsetSelector::Total => {
            Distribution::from_golds(selector, labels, corpus.instances.iter().map(|i| i.gold))
        }
        SubsetSelector::Easy => Distribution::from_golds(
            selector,
            labels,
            records.iter().filter(|r| r.easy).map(|r| r.gold),
        ),
        SubsetSelector::Different => Distribution::from_golds(
            selector,
            labels,
            records
                .iter()
                .filter(|r| r.easy && r.similarity.is_some_and(|s| s < threshold))
                .map(|r| r.gold),
        ),
    };
    if dist.is_empty() {
        log::warn!("label distribution: subset {selector:?} is empty");
    }
    dist
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub setting: String,
    pub dataset: String,
    pub split: String,
    pub labels: Vec<String>,
    pub corpus_size: usize,
    pub easy: usize,
    /// Percent of the corpus.
    pub easy_pct: f64,
    pub different: usize,
    /// Percent of the easy count.
    pub different_pct: f64,
    pub threshold: f64,
    pub classifier_f1: Option<f64>,
    pub degenerate: BTreeMap<String, usize>,
    pub distributions: Vec<Distribution>,
    pub histogram: Option<Histogram>,
}

impl AuditSummary {
    pub fn easy_cell(&self) -> String {
        count_with_percent(self.easy, self.corpus_size)
    }

    pub fn different_cell(&self) -> String {
        count_with_percent(self.different, self.easy)
    }

    pub fn f1_cell(&self) -> String {
        self.classifier_f1
            .map_or_else(|| "-".to_string(), |f| format!("{:.1}", 100.0 * f))
    }

    /// One row in the easy/F1/different table layout.
    pub fn table_row(&self) -> String {
        format!(
            "{} | {} | {} | {}",
            self.setting,
            self.easy_cell(),
            self.f1_cell(),
            self.different_cell()
        )
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }

    pub fn to_html(&self) -> String {
        let mut h = String::new();
        h.push_str("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">");
        let _ = write!(h, "<title>Audit: {}</title>", escape(&self.setting));
        h.push_str(
            "<style>body{font-family:sans-serif;margin:2em}table{border-collapse:collapse;margin:1em 0}\
             td,th{border:1px solid #999;padding:4px 10px;text-align:right}th{background:#eee}\
             td:first-child{text-align:left}</style></head><body>\n",
        );
        let _ = writeln!(
            h,
            "<h1>{}</h1>\n<p>{} / {}: {} instances; threshold {:.6}</p>",
            escape(&self.setting),
            escape(&self.dataset),
            escape(&self.split),
            thousands(self.corpus_size),
            self.threshold
        );
        h.push_str("<table><tr><th>Setting</th><th>Easy (% of total)</th><th>F1</th><th>Different (% of easy)</th></tr>\n");
        let _ = writeln!(
            h,
            "<tr><td>{}</td><td>{}</td><td>{}</td><td>{}</td></tr></table>",
            escape(&self.setting),
            self.easy_cell(),
            self.f1_cell(),
            self.different_cell()
        );
        h.push_str("<h2>Label distribution</h2>\n<table><tr><th>Subset</th><th>n</th>");
        for l in &self.labels {
            let _ = write!(h, "<th>{}</th>", escape(l));
        }
        h.push_str("</tr>\n");
        for d in &self.distributions {
            let _ = write!(h, "<tr><td>{:?}</td><td>{}</td>", d.subset, thousands(d.size));
            for (c, f) in d.counts.iter().zip(&d.fractions) {
                let _ = write!(h, "<td>{:.1}% ({})</td>", 100.0 * f, thousands(*c));
            }
            h.push_str("</tr>\n");
        }
        h.push_str("</table>\n");
        if !self.degenerate.is_empty() {
            h.push_str("<h2>Excluded easy instances</h2>\n<table><tr><th>Flag</th><th>Count</th></tr>\n");
            for (flag, n) in &self.degenerate {
                let _ = writeln!(h, "<tr><td>{}</td><td>{}</td></tr>", escape(flag), thousands(*n));
            }
            h.push_str("</table>\n");
        }
        if let Some(hist) = &self.histogram {
            h.push_str("<h2>Similarity histogram</h2>\n<table><tr><th>Bin</th><th>Count</th></tr>\n");
            for (i, c) in hist.counts.iter().enumerate() {
                let _ = writeln!(
                    h,
                    "<tr><td>[{:.3}, {:.3}{}</td><td>{}</td></tr>",
                    hist.edges[i],
                    hist.edges[i + 1],
                    if i + 1 == hist.counts.len() { "]" } else { ")" },
                    thousands(*c)
                );
            }
            h.push_str("</table>\n");
        }
        h.push_str("</body></html>\n");
        h
    }
}

fn flag_name(flag: DegenerateFlag) -> String {
    serde_json::to_value(flag)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

/// Aggregates an agreement file against its corpus at a fixed threshold.
pub fn build_summary(
    setting: &str,
    corpus: &Corpus,
    records: &[AgreementRecord],
    threshold: f64,
    classifier_f1: Option<f64>,
    histogram_bins: usize,
) -> Result<AuditSummary, ReportError> {
    let golds: HashMap<&str, usize> = corpus
        .instances
        .iter()
        .map(|i| (i.id.as_str(), i.gold))
        .collect();
    for r in records {
        match golds.get(r.instance.as_str()) {
            None => {
                return Err(ReportError::InputMismatch(format!(
                    "instance `{}` is not in corpus {}",
                    r.instance,
                    corpus.summary()
                )))
            }
            Some(&g) if g != r.gold => {
                return Err(ReportError::InputMismatch(format!(
                    "gold label of `{}` differs from the corpus",
                    r.instance
                )))
            }
            _ => {}
        }
    }
    let partition = classify_different(records, threshold);
    let mut degenerate = BTreeMap::new();
    for r in records.iter().filter(|r| r.easy) {
        if r.degenerate_flag != DegenerateFlag::None {
            *degenerate.entry(flag_name(r.degenerate_flag)).or_insert(0) += 1;
        }
    }
    let distributions = [SubsetSelector::Total, SubsetSelector::Easy, SubsetSelector::Different]
        .into_iter()
        .map(|s| label_distribution(s, corpus, records, threshold))
        .collect();
    let sims: Vec<f64> = records
        .iter()
        .filter(|r| r.easy)
        .filter_map(|r| r.similarity)
        .collect();
    let histogram = if histogram_bins > 0 && !sims.is_empty() {
        Histogram::build(&sims, histogram_bins).ok()
    } else {
        None
    };
    Ok(AuditSummary {
        setting: setting.to_string(),
        dataset: corpus.manifest.dataset.clone(),
        split: corpus.manifest.split.clone(),
        labels: corpus.label_set.names().to_vec(),
        corpus_size: corpus.len(),
        easy: partition.easy,
        easy_pct: percent(partition.easy, corpus.len()),
        different: partition.different_count(),
        different_pct: percent(partition.different_count(), partition.easy),
        threshold,
        classifier_f1,
        degenerate,
        distributions,
        histogram,
    })
}

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

/// Effects divided by the vector's largest |effect|, so values lie in
/// [-1, 1] and the dominant token sits at ±1. An all-zero vector stays zero.
pub fn normalized_intensities(effects: &[f64]) -> Vec<f64> {
    let max = effects.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    if max == 0.0 {
        return vec![0.0; effects.len()];
    }
    effects.iter().map(|e| e / max).collect()
}

const POSITIVE_RGB: &str = "214,39,40";
const NEGATIVE_RGB: &str = "31,119,180";

fn token_span(text: &str, intensity: f64, effect: f64) -> String {
    if intensity == 0.0 {
        return format!(
            "<span class=\"tok\" title=\"{effect:.6}\">{}</span>",
            escape(text)
        );
    }
    let rgb = if intensity > 0.0 { POSITIVE_RGB } else { NEGATIVE_RGB };
    format!(
        "<span class=\"tok\" title=\"{effect:.6}\" data-intensity=\"{:.3}\" style=\"background:rgba({rgb},{:.3})\">{}</span>",
        intensity,
        intensity.abs(),
        escape(text)
    )
}

fn pane(title: &str, v: &AttributionVector, labels: &LabelSet) -> String {
    let mut h = String::new();
    let intensities = normalized_intensities(&v.effects);
    let _ = writeln!(
        h,
        "<div class=\"pane\"><h2>{} <small>({}), predicted: {}</small></h2>",
        escape(title),
        escape(&v.backend),
        escape(labels.name(v.predicted).unwrap_or("?"))
    );
    let mut current: Option<&str> = None;
    for ((tok, inten), eff) in v.tokens.iter().zip(&intensities).zip(&v.effects) {
        if current != Some(tok.segment.as_str()) {
            if current.is_some() {
                h.push_str("</p>\n");
            }
            let _ = write!(h, "<p><b>{}:</b> ", escape(&tok.segment));
            current = Some(&tok.segment);
        }
        h.push_str(&token_span(&tok.text, *inten, *eff));
        h.push(' ');
    }
    if current.is_some() {
        h.push_str("</p>\n");
    }
    h.push_str("</div>\n");
    h
}

/// Self-contained page showing both models' token effects for one instance.
pub fn heatmap_page(
    main: &AttributionVector,
    biased: &AttributionVector,
    record: Option<&AgreementRecord>,
    labels: &LabelSet,
) -> String {
    let mut h = String::new();
    h.push_str("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">");
    let _ = write!(h, "<title>{}</title>", escape(&main.instance));
    h.push_str(
        "<style>body{font-family:sans-serif;margin:2em}.tok{padding:2px 3px;border-radius:3px;line-height:2}\
         .pane{margin-bottom:1.5em}small{color:#555;font-weight:normal}</style></head><body>\n",
    );
    let similarity = record
        .and_then(|r| r.similarity)
        .map_or_else(|| "undefined".to_string(), |s| format!("{s:.4}"));
    let _ = writeln!(
        h,
        "<h1>{}</h1>\n<p>gold: <b>{}</b>; similarity: <b>{}</b></p>",
        escape(&main.instance),
        escape(labels.name(main.gold).unwrap_or("?")),
        similarity
    );
    h.push_str(&pane("Main model", main, labels));
    h.push_str(&pane("Biased model", biased, labels));
    h.push_str("</body></html>\n");
    h
}

fn file_stem(id: &str) -> String {
    let clean: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    if clean == id {
        clean
    } else {
        let digest = hex::encode(&Sha256::digest(id.as_bytes())[..4]);
        format!("{clean}-{digest}")
    }
}

/// Writes one heatmap page per id into `out_dir`; returns the page paths in
/// `ids` order.
pub fn render_heatmaps(
    ids: &[String],
    main: &[AttributionVector],
    biased: &[AttributionVector],
    records: &[AgreementRecord],
    labels: &LabelSet,
    out_dir: &Path,
    execution: Execution,
) -> Result<Vec<PathBuf>, ReportError> {
    let main_by: HashMap<&str, &AttributionVector> =
        main.iter().map(|v| (v.instance.as_str(), v)).collect();
    let biased_by: HashMap<&str, &AttributionVector> =
        biased.iter().map(|v| (v.instance.as_str(), v)).collect();
    let rec_by: HashMap<&str, &AgreementRecord> =
        records.iter().map(|r| (r.instance.as_str(), r)).collect();
    let mut jobs = Vec::with_capacity(ids.len());
    for id in ids {
        let m = main_by
            .get(id.as_str())
            .ok_or_else(|| ReportError::MissingId(id.clone(), "main attributions"))?;
        let b = biased_by
            .get(id.as_str())
            .ok_or_else(|| ReportError::MissingId(id.clone(), "biased attributions"))?;
        jobs.push((id, *m, *b, rec_by.get(id.as_str()).copied()));
    }
    std::fs::create_dir_all(out_dir)?;
    execution
        .map(&jobs, |(id, m, b, r)| {
            let path = out_dir.join(format!("{}.html", file_stem(id)));
            std::fs::write(&path, heatmap_page(m, b, *r, labels))?;
            Ok(path)
        })
        .into_iter()
        .collect()
}
