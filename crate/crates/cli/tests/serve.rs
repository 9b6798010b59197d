use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_omission-audit"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn run(args: &[&str]) {
    let out = bin().args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn prepare(dir: &Path) {
    let corpus = fixture("corpus.jsonl");
    for (backend, out) in [("main.toml", "main.jsonl"), ("biased.toml", "biased.jsonl")] {
        run(&[
            "attribute", "--corpus", s(&corpus), "--backend", s(&fixture(backend)),
            "--scope", "partial:hypothesis", "--out", s(&dir.join(out)),
        ]);
    }
    run(&[
        "compare", "--main", s(&dir.join("main.jsonl")), "--biased", s(&dir.join("biased.jsonl")),
        "--scope", "partial:hypothesis", "--out", s(&dir.join("agreement.jsonl")),
    ]);
    run(&[
        "sample", "--agreement", s(&dir.join("agreement.jsonl")), "--bins", "4", "--per-bin", "3",
        "--overlap", "3", "--seed", "1", "--out", s(&dir.join("tasks.jsonl")),
    ]);
}

struct Server {
    child: Child,
    base: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn serve(dir: &Path, extra: &[&str]) -> Server {
    let mut child = bin()
        .args([
            "serve-annotation", "--tasks", s(&dir.join("tasks.jsonl")),
            "--manifest", s(&fixture("manifest.toml")),
            "--main", s(&dir.join("main.jsonl")), "--biased", s(&dir.join("biased.jsonl")),
            "--annotations", s(&dir.join("annotations.jsonl")), "--port", "0",
        ])
        .args(extra)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let base = line.trim().strip_prefix("listening on ").expect("address line").to_string();
    Server { child, base }
}

fn next(server: &Server, annotator: &str) -> Option<serde_json::Value> {
    let resp = ureq::get(&format!("{}/tasks/next", server.base))
        .query("annotator", annotator)
        .call()
        .unwrap();
    match resp.status() {
        204 => None,
        200 => Some(resp.into_json().unwrap()),
        other => panic!("status {other}"),
    }
}

fn judge(server: &Server, task: &str, annotator: &str, judgment: &str) -> (u16, serde_json::Value) {
    let result = ureq::post(&format!("{}/tasks/{task}/judgment", server.base))
        .send_json(serde_json::json!({ "annotator": annotator, "judgment": judgment }));
    match result {
        Ok(r) => (r.status(), r.into_json().unwrap()),
        Err(ureq::Error::Status(code, r)) => (code, r.into_json().unwrap()),
        Err(e) => panic!("{e}"),
    }
}

/// Deterministic per-instance rule shared by both scripted annotators.
fn rule(instance: &str) -> &'static str {
    let digit = instance.bytes().last().unwrap() - b'0';
    if digit.is_multiple_of(2) { "similar" } else { "different" }
}

fn lines(path: &Path) -> usize {
    std::fs::read_to_string(path).map(|s| s.lines().count()).unwrap_or(0)
}

#[test]
fn annotation_session_survives_a_crash() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir);
    let tasks: Vec<serde_json::Value> = std::fs::read_to_string(dir.join("tasks.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let assignments: usize = tasks.iter().map(|t| t["assignees"].as_array().unwrap().len()).sum();
    let ann = dir.join("annotations.jsonl");

    let judged = {
        let server = serve(dir, &[]);
        let view = next(&server, "a1").unwrap();
        assert!(view.get("similarity").is_none());
        assert!(view["main"]["predicted"].is_string());
        assert!(!view["biased"]["tokens"].as_array().unwrap().is_empty());
        let id = view["instance"].as_str().unwrap().to_string();

        let (code, body) = judge(&server, &id, "a1", rule(&id));
        assert_eq!((code, body["status"].as_str()), (200, Some("recorded")));
        let (code, body) = judge(&server, &id, "a1", rule(&id));
        assert_eq!((code, body["status"].as_str()), (200, Some("already-stored")));
        let flipped = if rule(&id) == "similar" { "different" } else { "similar" };
        let (code, body) = judge(&server, &id, "a1", flipped);
        assert_eq!((code, body["stored"].as_str()), (409, Some(rule(&id))));
        assert_eq!(judge(&server, "no-such-task", "a1", "similar").0, 404);
        let foreign = tasks
            .iter()
            .find(|t| t["assignees"] == serde_json::json!(["a2"]))
            .unwrap()["instance"]
            .as_str()
            .unwrap();
        assert_eq!(judge(&server, foreign, "a1", "similar").0, 403);
        let bad = ureq::post(&format!("{}/tasks/{id}/judgment", server.base)).send_string("{\"annotator\":1}");
        assert!(matches!(bad, Err(ureq::Error::Status(400, _))));

        let mut judged = 1;
        for _ in 0..2 {
            let v = next(&server, "a2").unwrap();
            let id = v["instance"].as_str().unwrap();
            assert_eq!(judge(&server, id, "a2", rule(id)).0, 200);
            judged += 1;
        }
        judged
        // server is killed here without a clean shutdown
    };
    assert_eq!(lines(&ann), judged);

    let server = serve(dir, &["--hide-predictions"]);
    let mut total = judged;
    for annotator in ["a1", "a2"] {
        while let Some(v) = next(&server, annotator) {
            assert!(v["main"].get("predicted").is_none());
            let id = v["instance"].as_str().unwrap().to_string();
            assert_eq!(judge(&server, &id, annotator, rule(&id)).0, 200);
            total += 1;
        }
    }
    drop(server);
    assert_eq!(total, assignments);
    assert_eq!(lines(&ann), assignments);

    let out = bin()
        .args([
            "calibrate", "--agreement", s(&dir.join("agreement.jsonl")), "--annotations", s(&ann),
            "--out", s(&dir.join("calibration.json")),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cal: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("calibration.json")).unwrap()).unwrap();
    assert_eq!(cal["iaa"], 1.0);
}
