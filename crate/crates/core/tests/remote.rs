mod common;

use std::time::Duration;

use omission_audit::attribution::{attribute_corpus, AttributeOptions, AttributionScope};
use omission_audit::backends::conformance::{run_suite, ConformanceProbe};
use omission_audit::backends::{score_batch, BackendError, ModelInput, RemoteBackend};

use common::*;

fn label_names() -> Vec<String> {
    NLI_LABELS.iter().map(|s| s.to_string()).collect()
}

fn probe(ignored: &[&str]) -> ConformanceProbe {
    let corpus = toy_nli_corpus(5, 6);
    ConformanceProbe {
        inputs: corpus
            .instances
            .iter()
            .map(|i| ModelInput::new(i.segments.clone()))
            .collect(),
        ignored_segments: ignored.iter().map(|s| s.to_string()).collect(),
    }
}

#[test]
fn remote_matches_local_model() {
    let corpus = toy_nli_corpus(1, 25);
    let (main, _) = toy_models(2);
    let url = spawn_stub(label_names(), "main", segment_scorer(main.clone(), 0));
    let remote = RemoteBackend::new("main", labels(), url, 3, 4, Duration::from_secs(10))
        .consuming(vec!["premise".into()]);
    let local = main.consuming(vec!["premise".into()]);
    let scope = AttributionScope::Partial("premise".into());
    let opts = AttributeOptions::default();
    let a = attribute_corpus(&remote, &corpus, &scope, &opts).unwrap();
    let b = attribute_corpus(&local, &corpus, &scope, &opts).unwrap();
    assert_eq!(a.vectors.len(), 25);
    for (x, y) in a.vectors.iter().zip(&b.vectors) {
        assert_eq!(x.tokens, y.tokens);
        for (p, q) in x.effects.iter().zip(&y.effects) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}

#[test]
fn wrong_dimension_is_rejected() {
    let url = spawn_stub(label_names(), "bad", Box::new(|_: &[String]| vec![0.0, 1.0]));
    let remote = RemoteBackend::new("bad", labels(), url, 1, 8, Duration::from_secs(10));
    let err = score_batch(&remote, &probe(&[]).inputs).unwrap_err();
    assert!(matches!(err, BackendError::DimensionMismatch { expected: 3, got: 2 }), "{err}");
}

#[test]
fn label_order_mismatch_is_rejected() {
    let mut swapped = label_names();
    swapped.swap(0, 2);
    let url = spawn_stub(swapped, "swapped", Box::new(|_: &[String]| vec![0.0; 3]));
    let remote = RemoteBackend::new("swapped", labels(), url, 1, 8, Duration::from_secs(10));
    assert!(matches!(remote.check_meta(), Err(BackendError::LabelMismatch { .. })));
}

#[test]
fn unreachable_endpoint_is_typed() {
    let remote = RemoteBackend::new("gone", labels(), "http://127.0.0.1:9", 1, 8, Duration::from_secs(2));
    assert!(matches!(
        score_batch(&remote, &probe(&[]).inputs),
        Err(BackendError::Unreachable { .. })
    ));
}

#[test]
fn conforming_stub_passes_suite() {
    let (_, biased) = toy_models(3);
    let url = spawn_stub(label_names(), "hyp-only", segment_scorer(biased, 1));
    let remote = RemoteBackend::new("hyp-only", labels(), url, 2, 2, Duration::from_secs(10));
    let report = run_suite(&remote, &probe(&["premise"]));
    assert!(report.passed(), "{report}");
    assert!(report.to_string().contains("[PASS] segment-invariance"));
}

#[test]
fn server_reading_ignored_segment_fails_invariance() {
    let (main, _) = toy_models(4);
    let url = spawn_stub(label_names(), "reads-all", segment_scorer(main, 0));
    let remote = RemoteBackend::new("reads-all", labels(), url, 2, 8, Duration::from_secs(10));
    let report = run_suite(&remote, &probe(&["premise"]));
    assert!(!report.passed());
    assert!(report.to_string().contains("[FAIL] segment-invariance"), "{report}");
}

#[test]
fn nondeterministic_server_fails_suite() {
    let counter = std::sync::atomic::AtomicUsize::new(0);
    let url = spawn_stub(
        label_names(),
        "noisy",
        Box::new(move |_: &[String]| {
            let n = counter.fetch_add(1, std::sync::atomic::Ordering::SeqCst) as f64;
            vec![n, 0.0, 0.0]
        }),
    );
    let remote = RemoteBackend::new("noisy", labels(), url, 1, 8, Duration::from_secs(10));
    let report = run_suite(&remote, &probe(&[]));
    assert!(report.to_string().contains("[FAIL] determinism"), "{report}");
}
