//! Pairing of main/biased attribution vectors, easy-instance selection and
//! inter-model cosine similarity.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{AttributionScope, AttributionVector};
use crate::exec::Execution;
use crate::jsonl::{self, JsonlError};

#[derive(Debug, Error)]
pub enum AgreementError {
    #[error("vector lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("cosine of empty vectors")]
    Empty,
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("instance `{instance}`: {message}")]
    AlignmentFailure { instance: String, message: String },
    #[error("instance `{instance}` in {file} file has scope `{found}`, expected `{expected}`")]
    ScopeMismatch {
        instance: String,
        file: &'static str,
        found: AttributionScope,
        expected: AttributionScope,
    },
    #[error("duplicate instance `{instance}` in {file} file")]
    DuplicateInstance { instance: String, file: &'static str },
    #[error("no defined similarities")]
    NoDefinedSimilarities,
    #[error("bin count must be at least 1")]
    ZeroBins,
    #[error(transparent)]
    File(#[from] JsonlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DegenerateFlag {
    None,
    ZeroMain,
    ZeroBiased,
    ZeroBoth,
    EmptyScope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRecord {
    pub instance: String,
    pub gold: usize,
    pub easy: bool,
    pub similarity: Option<f64>,
    pub degenerate_flag: DegenerateFlag,
}

impl AgreementRecord {
    /// Easy and scored: the population the threshold classifier acts on.
    pub fn is_scored(&self) -> bool {
        self.easy && self.similarity.is_some()
    }
}

/// Cosine similarity clamped to [-1, 1].
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, AgreementError> {
    if u.len() != v.len() {
        return Err(AgreementError::LengthMismatch(u.len(), v.len()));
    }
    if u.is_empty() {
        return Err(AgreementError::Empty);
    }
    let (mut dot, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return Err(AgreementError::ZeroNorm);
    }
    Ok((dot / (uu.sqrt() * vv.sqrt())).clamp(-1.0, 1.0))
}

fn degenerate(main: &[f64], biased: &[f64]) -> DegenerateFlag {
    if main.is_empty() {
        return DegenerateFlag::EmptyScope;
    }
    let zero = |v: &[f64]| v.iter().all(|&x| x == 0.0);
    match (zero(main), zero(biased)) {
        (true, true) => DegenerateFlag::ZeroBoth,
        (true, false) => DegenerateFlag::ZeroMain,
        (false, true) => DegenerateFlag::ZeroBiased,
        (false, false) => DegenerateFlag::None,
    }
}

fn score_pair(
    main: &AttributionVector,
    biased: &AttributionVector,
) -> Result<AgreementRecord, AgreementError> {
    let fail = |message: String| AgreementError::AlignmentFailure {
        instance: main.instance.clone(),
        message,
    };
    if main.tokens != biased.tokens {
        return Err(fail("token lists differ between the two files".into()));
    }
    if main.gold != biased.gold {
        return Err(fail(format!(
            "gold labels differ ({} vs {})",
            main.gold, biased.gold
        )));
    }
    if main.effects.len() != main.tokens.len() || biased.effects.len() != biased.tokens.len() {
        return Err(fail("effect count does not match token count".into()));
    }
    let easy = main.correct && biased.correct;
    let flag = degenerate(&main.effects, &biased.effects);
    let similarity = if easy && flag == DegenerateFlag::None {
        Some(cosine(&main.effects, &biased.effects)?)
    } else {
        None
    };
    Ok(AgreementRecord {
        instance: main.instance.clone(),
        gold: main.gold,
        easy,
        similarity,
        degenerate_flag: flag,
    })
}

#[derive(Debug, Clone, Default)]
pub struct Pairing {
    /// One record per instance present in both files, in main-file order.
    pub records: Vec<AgreementRecord>,
    pub only_main: Vec<String>,
    pub only_biased: Vec<String>,
}

impl Pairing {
    pub fn easy_count(&self) -> usize {
        self.records.iter().filter(|r| r.easy).count()
    }

    pub fn degenerate_counts(&self) -> HashMap<DegenerateFlag, usize> {
        let mut counts = HashMap::new();
        for r in self.records.iter().filter(|r| r.easy) {
            if r.degenerate_flag != DegenerateFlag::None {
                *counts.entry(r.degenerate_flag).or_insert(0) += 1;
            }
        }
        counts
    }
}

fn index<'a>(
    vectors: &'a [AttributionVector],
    scope: &AttributionScope,
    file: &'static str,
) -> Result<HashMap<&'a str, &'a AttributionVector>, AgreementError> {
    let mut map = HashMap::with_capacity(vectors.len());
    for v in vectors {
        if &v.scope != scope {
            return Err(AgreementError::ScopeMismatch {
                instance: v.instance.clone(),
                file,
                found: v.scope.clone(),
                expected: scope.clone(),
            });
        }
        if map.insert(v.instance.as_str(), v).is_some() {
            return Err(AgreementError::DuplicateInstance {
                instance: v.instance.clone(),
                file,
            });
        }
    }
    Ok(map)
}

/// Pairs vectors by instance id and scores every pair. Instances present in
/// only one file are reported, not scored.
pub fn pair_and_score(
    main: &[AttributionVector],
    biased: &[AttributionVector],
    scope: &AttributionScope,
    execution: Execution,
) -> Result<Pairing, AgreementError> {
    let main_ids = index(main, scope, "main")?;
    let biased_ids = index(biased, scope, "biased")?;
    let pairs: Vec<(&AttributionVector, &AttributionVector)> = main
        .iter()
        .filter_map(|m| biased_ids.get(m.instance.as_str()).map(|b| (m, *b)))
        .collect();
    let records = execution
        .map(&pairs, |(m, b)| score_pair(m, b))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let only_main = main
        .iter()
        .filter(|m| !biased_ids.contains_key(m.instance.as_str()))
        .map(|m| m.instance.clone())
        .collect();
    let only_biased = biased
        .iter()
        .filter(|b| !main_ids.contains_key(b.instance.as_str()))
        .map(|b| b.instance.clone())
        .collect();
    Ok(Pairing {
        records,
        only_main,
        only_biased,
    })
}

/// Equal-width histogram over [min, max] of the values. Bins are
/// left-closed except the last, which is closed on both sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn build(values: &[f64], bins: usize) -> Result<Self, AgreementError> {
        if bins == 0 {
            return Err(AgreementError::ZeroBins);
        }
        if values.is_empty() {
            return Err(AgreementError::NoDefinedSimilarities);
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let edges = if hi - lo <= 0.0 {
            // zero-width range: one bin of machine-epsilon width
            vec![lo, lo + f64::EPSILON]
        } else {
            let width = (hi - lo) / bins as f64;
            let mut e: Vec<f64> = (0..bins).map(|i| lo + i as f64 * width).collect();
            e.push(hi);
            e
        };
        let mut hist = Histogram {
            counts: vec![0; edges.len() - 1],
            edges,
        };
        for &v in values {
            let b = hist.bin_of(v);
            hist.counts[b] += 1;
        }
        Ok(hist)
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Bin index of `v`, clamped to the histogram range.
    pub fn bin_of(&self, v: f64) -> usize {
        let n = self.bins();
        let lo = self.edges[0];
        let hi = self.edges[n];
        let width = (hi - lo) / n as f64;
        let mut idx = if width > 0.0 {
            (((v - lo) / width).floor().max(0.0) as usize).min(n - 1)
        } else {
            0
        };
        while idx > 0 && v < self.edges[idx] {
            idx -= 1;
        }
        while idx + 1 < n && v >= self.edges[idx + 1] {
            idx += 1;
        }
        idx
    }
}

/// Histogram of the defined similarities among `records`.
pub fn similarity_histogram(
    records: &[AgreementRecord],
    bins: usize,
) -> Result<Histogram, AgreementError> {
    let values: Vec<f64> = records.iter().filter_map(|r| r.similarity).collect();
    Histogram::build(&values, bins)
}

pub fn read_agreement(path: &Path) -> Result<Vec<AgreementRecord>, AgreementError> {
    let records: Vec<AgreementRecord> = jsonl::read(path)?;
    let mut seen = HashSet::new();
    for r in &records {
        if !seen.insert(r.instance.clone()) {
            return Err(AgreementError::DuplicateInstance {
                instance: r.instance.clone(),
                file: "agreement",
            });
        }
    }
    Ok(records)
}

pub fn write_agreement(path: &Path, records: &[AgreementRecord]) -> Result<(), AgreementError> {
    Ok(jsonl::write(path, records)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::TokenRef;
    use crate::backends::ScoreVector;
    use proptest::prelude::*;

    fn vector(id: &str, effects: Vec<f64>, correct: bool) -> AttributionVector {
        AttributionVector {
            instance: id.into(),
            backend: "x".into(),
            scope: AttributionScope::Full,
            gold: 0,
            tokens: (0..effects.len())
                .map(|pos| TokenRef {
                    segment: "hypothesis".into(),
                    pos,
                    text: format!("t{pos}"),
                })
                .collect(),
            effects,
            full_logits: ScoreVector(vec![1.0, 0.0]),
            predicted: if correct { 0 } else { 1 },
            correct,
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[2.0, 1.0], &[1.0, 2.0]).unwrap() - 0.8).abs() < 1e-15);
        assert!(matches!(cosine(&[1.0], &[1.0, 2.0]), Err(AgreementError::LengthMismatch(1, 2))));
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 2.0]), Err(AgreementError::ZeroNorm)));
        assert!(matches!(cosine(&[], &[]), Err(AgreementError::Empty)));
    }

    #[test]
    fn pairing_examples() {
        let main = vec![
            vector("a", vec![2.0, 0.0], true),
            vector("b", vec![1.0, 1.0], true),
            vector("c", vec![0.0, 0.0], true),
            vector("d", vec![1.0], true),
        ];
        let biased = vec![
            vector("a", vec![2.0, 0.0], true),
            vector("b", vec![1.0, 1.0], false),
            vector("c", vec![1.0, 0.5], true),
            vector("e", vec![1.0], true),
        ];
        let p = pair_and_score(&main, &biased, &AttributionScope::Full, Execution::Serial).unwrap();
        assert_eq!(p.records.len(), 3);
        assert_eq!(p.records[0].similarity, Some(1.0));
        assert!(p.records[0].easy);
        assert!(!p.records[1].easy);
        assert_eq!(p.records[1].similarity, None);
        assert_eq!(p.records[2].degenerate_flag, DegenerateFlag::ZeroMain);
        assert_eq!(p.records[2].similarity, None);
        assert_eq!(p.only_main, vec!["d".to_string()]);
        assert_eq!(p.only_biased, vec!["e".to_string()]);
        assert_eq!(p.easy_count(), 2);
        assert_eq!(p.degenerate_counts()[&DegenerateFlag::ZeroMain], 1);
    }

    #[test]
    fn alignment_and_scope_checks() {
        let mut b = vector("a", vec![1.0, 0.0], true);
        b.tokens[0].text = "other".into();
        let err = pair_and_score(
            &[vector("a", vec![1.0, 0.0], true)],
            &[b],
            &AttributionScope::Full,
            Execution::Serial,
        );
        assert!(matches!(err, Err(AgreementError::AlignmentFailure { .. })));

        let err = pair_and_score(
            &[vector("a", vec![1.0], true)],
            &[vector("a", vec![1.0], true)],
            &AttributionScope::Partial("hypothesis".into()),
            Execution::Serial,
        );
        assert!(matches!(err, Err(AgreementError::ScopeMismatch { .. })));
    }

    #[test]
    fn empty_scope_flagged() {
        let p = pair_and_score(
            &[vector("a", vec![], true)],
            &[vector("a", vec![], true)],
            &AttributionScope::Full,
            Execution::Serial,
        )
        .unwrap();
        assert_eq!(p.records[0].degenerate_flag, DegenerateFlag::EmptyScope);
    }

    #[test]
    fn histogram_examples() {
        let h = Histogram::build(&[0.0, 0.5, 1.0], 2).unwrap();
        assert_eq!(h.edges, vec![0.0, 0.5, 1.0]);
        assert_eq!(h.counts, vec![1, 2]);

        let h = Histogram::build(&[0.3, 0.3, 0.3], 20).unwrap();
        assert_eq!(h.counts, vec![3]);
        assert_eq!(h.edges[1] - h.edges[0], f64::EPSILON);

        assert!(matches!(Histogram::build(&[], 3), Err(AgreementError::NoDefinedSimilarities)));
        assert!(matches!(Histogram::build(&[1.0], 0), Err(AgreementError::ZeroBins)));
    }

    proptest! {
        #[test]
        fn histogram_conserves_counts(
            values in proptest::collection::vec(-1.0f64..=1.0, 1..300),
            bins in 1usize..40,
        ) {
            let h = Histogram::build(&values, bins).unwrap();
            prop_assert_eq!(h.total(), values.len());
            for &v in &values {
                let b = h.bin_of(v);
                prop_assert!(v >= h.edges[b]);
                prop_assert!(v < h.edges[b + 1] || (b + 1 == h.bins() && v <= h.edges[b + 1]));
            }
        }

        #[test]
        fn cosine_symmetric_scale_invariant(
            u in proptest::collection::vec(-10.0f64..10.0, 1..20),
            c in 0.01f64..100.0,
        ) {
            let v: Vec<f64> = u.iter().rev().cloned().collect();
            if let (Ok(a), Ok(b)) = (cosine(&u, &v), cosine(&v, &u)) {
                prop_assert_eq!(a, b);
                let scaled: Vec<f64> = u.iter().map(|x| x * c).collect();
                prop_assert!((cosine(&scaled, &v).unwrap() - a).abs() < 1e-9);
                prop_assert!((-1.0..=1.0).contains(&a));
            }
        }
    }
}
