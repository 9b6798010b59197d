use std::collections::BTreeMap;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use omission_audit::agreement::pair_and_score;
use omission_audit::attribution::{attribute_corpus, AttributeOptions, AttributionScope, AttributionVector};
use omission_audit::backends::LexiconModel;
use omission_audit::corpus::{Corpus, Instance, LabelSet, Manifest, Segment};
use omission_audit::Execution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Execution); 2] = [("serial", Execution::Serial), ("parallel", Execution::Parallel)];

fn setup(n: usize) -> (Corpus, LexiconModel, LexiconModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let words: Vec<String> = (0..500).map(|i| format!("w{i}")).collect();
    let labels = LabelSet::new(["entailment", "neutral", "contradiction"]).unwrap();
    let model = |rng: &mut ChaCha8Rng, id: &str| {
        let weights: BTreeMap<String, Vec<f64>> = words
            .iter()
            .map(|w| (w.clone(), (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        LexiconModel::new(id, labels.clone(), vec![0.0; 3], weights).unwrap()
    };
    let main = model(&mut rng, "main");
    let biased = model(&mut rng, "biased");
    let instances = (0..n)
        .map(|i| {
            let len = rng.gen_range(10..40);
            let text: Vec<&str> = (0..len).map(|_| words[rng.gen_range(0..words.len())].as_str()).collect();
            Instance {
                id: format!("b{i:06}"),
                segments: vec![Segment::new("text", text.join(" "))],
                gold: rng.gen_range(0..3),
            }
        })
        .collect();
    let manifest = Manifest {
        dataset: "bench".into(),
        split: "dev".into(),
        labels: labels.names().to_vec(),
        segments: vec!["text".into()],
        tokenizer: "whitespace".into(),
    };
    (Corpus::new(manifest, instances).unwrap(), main, biased)
}

fn attribution(c: &mut Criterion) {
    let (corpus, main, _) = setup(2000);
    let mut group = c.benchmark_group("attribute_corpus");
    group.sample_size(10);
    for (name, execution) in MODES {
        let opts = AttributeOptions {
            execution,
            ..Default::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(name), &opts, |b, opts| {
            b.iter(|| attribute_corpus(&main, &corpus, &AttributionScope::Full, opts).unwrap())
        });
    }
    group.finish();
}

fn agreement(c: &mut Criterion) {
    let (corpus, main, biased) = setup(20_000);
    let opts = AttributeOptions::default();
    let vm: Vec<AttributionVector> = attribute_corpus(&main, &corpus, &AttributionScope::Full, &opts).unwrap().vectors;
    let vb: Vec<AttributionVector> = attribute_corpus(&biased, &corpus, &AttributionScope::Full, &opts).unwrap().vectors;
    let mut group = c.benchmark_group("pair_and_score");
    for (name, execution) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &execution, |b, &execution| {
            b.iter(|| pair_and_score(black_box(&vm), black_box(&vb), &AttributionScope::Full, execution).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, attribution, agreement);
criterion_main!(benches);
