#![allow(dead_code)]

use std::collections::BTreeMap;

use omission_audit::backends::LexiconModel;
use omission_audit::corpus::{Corpus, Instance, LabelSet, Manifest, Segment};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const NLI_LABELS: [&str; 3] = ["entailment", "neutral", "contradiction"];

pub fn labels() -> LabelSet {
    LabelSet::new(NLI_LABELS).unwrap()
}

pub fn manifest(segments: &[&str]) -> Manifest {
    Manifest {
        dataset: "toy".into(),
        split: "dev".into(),
        labels: NLI_LABELS.iter().map(|s| s.to_string()).collect(),
        segments: segments.iter().map(|s| s.to_string()).collect(),
        tokenizer: "whitespace".into(),
    }
}

pub fn vocab(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("w{i}")).collect()
}

pub fn random_weights(rng: &mut ChaCha8Rng, words: &[String], classes: usize, scale: f64) -> BTreeMap<String, Vec<f64>> {
    words
        .iter()
        .map(|w| {
            let row = (0..classes).map(|_| rng.gen_range(-scale..scale)).collect();
            (w.clone(), row)
        })
        .collect()
}

pub fn random_lexicon(id: &str, seed: u64, words: &[String]) -> LexiconModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bias = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let weights = random_weights(&mut rng, words, 3, 2.0);
    LexiconModel::new(id, labels(), bias, weights).unwrap()
}

pub fn random_text(rng: &mut ChaCha8Rng, words: &[String], min: usize, max: usize) -> String {
    let n = rng.gen_range(min..=max);
    (0..n)
        .map(|_| words[rng.gen_range(0..words.len())].as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Single-segment corpus of random token sequences.
pub fn random_corpus(seed: u64, n: usize, words: &[String], min: usize, max: usize) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances = (0..n)
        .map(|i| Instance {
            id: format!("r{i:05}"),
            segments: vec![Segment::new("text", random_text(&mut rng, words, min, max))],
            gold: rng.gen_range(0..3),
        })
        .collect();
    Corpus::new(manifest(&["text"]), instances).unwrap()
}

/// Premise/hypothesis corpus used by the end-to-end pipeline checks.
pub fn toy_nli_corpus(seed: u64, n: usize) -> Corpus {
    let words = vocab(24);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances = (0..n)
        .map(|i| Instance {
            id: format!("toy-{i:03}"),
            segments: vec![
                Segment::new("premise", random_text(&mut rng, &words, 4, 9)),
                Segment::new("hypothesis", random_text(&mut rng, &words, 2, 6)),
            ],
            gold: rng.gen_range(0..3),
        })
        .collect();
    Corpus::new(manifest(&["premise", "hypothesis"]), instances).unwrap()
}

/// Main model reads both segments; the biased one only the hypothesis.
pub fn toy_models(seed: u64) -> (LexiconModel, LexiconModel) {
    let words = vocab(24);
    let main = random_lexicon("main", seed, &words);
    let biased = random_lexicon("biased", seed + 1, &words).consuming(vec!["hypothesis".into()]);
    (main, biased)
}

/// Every instance carries one A-cue and one B-cue for its gold class plus
/// filler. Model A keys on A-cues, model B on B-cues; both put a small
/// random weight on filler.
pub fn cue_corpus(seed: u64, n: usize) -> (Corpus, LexiconModel, LexiconModel) {
    let filler = vocab(40);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances = (0..n)
        .map(|i| {
            let gold = rng.gen_range(0..3);
            let mut tokens: Vec<String> = random_text(&mut rng, &filler, 3, 10)
                .split(' ')
                .map(str::to_string)
                .collect();
            let a = rng.gen_range(0..=tokens.len());
            tokens.insert(a, format!("cueA{gold}"));
            let b = rng.gen_range(0..=tokens.len());
            tokens.insert(b, format!("cueB{gold}"));
            Instance {
                id: format!("c{i:04}"),
                segments: vec![Segment::new("text", tokens.join(" "))],
                gold,
            }
        })
        .collect();
    let corpus = Corpus::new(manifest(&["text"]), instances).unwrap();
    let model = |id: &str, cue: &str, rng: &mut ChaCha8Rng| {
        let mut weights = random_weights(rng, &filler, 3, 0.02);
        for k in 0..3 {
            let mut row = vec![0.0; 3];
            row[k] = 5.0;
            weights.insert(format!("{cue}{k}"), row);
        }
        LexiconModel::new(id, labels(), vec![0.0; 3], weights).unwrap()
    };
    let a = model("cue-a", "cueA", &mut rng);
    let b = model("cue-b", "cueB", &mut rng);
    (corpus, a, b)
}

pub type StubScorer = dyn Fn(&[String]) -> Vec<f64> + Send + Sync;

/// Minimal `/v1` server on a free local port. Returns the base URL.
pub fn spawn_stub(labels: Vec<String>, model_id: &str, scorer: Box<StubScorer>) -> String {
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let addr = server.server_addr().to_ip().unwrap();
    let meta = serde_json::json!({ "labels": labels, "model_id": model_id }).to_string();
    std::thread::spawn(move || {
        for mut req in server.incoming_requests() {
            let mut body = String::new();
            req.as_reader().read_to_string(&mut body).unwrap();
            let (status, out) = match (req.method(), req.url()) {
                (tiny_http::Method::Get, "/v1/meta") => (200, meta.clone()),
                (tiny_http::Method::Post, "/v1/score") => {
                    let parsed: serde_json::Value = serde_json::from_str(&body).unwrap();
                    let logits: Vec<Vec<f64>> = parsed["instances"]
                        .as_array()
                        .unwrap()
                        .iter()
                        .map(|inst| {
                            let segs: Vec<String> = inst["segments"]
                                .as_array()
                                .unwrap()
                                .iter()
                                .map(|s| s.as_str().unwrap().to_string())
                                .collect();
                            scorer(&segs)
                        })
                        .collect();
                    (200, serde_json::json!({ "logits": logits }).to_string())
                }
                _ => (404, "{}".to_string()),
            };
            let _ = req.respond(tiny_http::Response::from_string(out).with_status_code(status));
        }
    });
    format!("http://{addr}")
}

/// Bag-of-words scorer over the segment at `index`, ignoring the others.
pub fn segment_scorer(model: LexiconModel, index: usize) -> Box<StubScorer> {
    Box::new(move |segs: &[String]| {
        let mut logits = model.bias().to_vec();
        if let Some(text) = segs.get(index) {
            for tok in text.split_whitespace() {
                for (k, l) in logits.iter_mut().enumerate() {
                    *l += model.weight(tok, k);
                }
            }
        }
        logits
    })
}
