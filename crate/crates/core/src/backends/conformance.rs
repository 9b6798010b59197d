//! Protocol conformance probes for `/v1` scoring servers: meta schema, score
//! schema and dimension, determinism (including batch-composition
//! independence) and invariance to segments the server claims to ignore.

use std::fmt;

use super::{score_batch, ModelInput, RemoteBackend};
use crate::corpus::Segment;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct ConformanceReport {
    pub checks: Vec<CheckOutcome>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    fn record(&mut self, name: &'static str, result: Result<(), String>) {
        let (passed, detail) = match result {
            Ok(()) => (true, String::new()),
            Err(d) => (false, d),
        };
        self.checks.push(CheckOutcome {
            name,
            passed,
            detail,
        });
    }
}

impl fmt::Display for ConformanceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            if c.detail.is_empty() {
                writeln!(f, "[{status}] {}", c.name)?;
            } else {
                writeln!(f, "[{status}] {}: {}", c.name, c.detail)?;
            }
        }
        Ok(())
    }
}

/// Inputs to send, each carrying every schema segment, plus the segments
/// the server is configured to ignore (empty for full-input models).
#[derive(Debug, Clone)]
pub struct ConformanceProbe {
    pub inputs: Vec<ModelInput>,
    pub ignored_segments: Vec<String>,
}

/// Replaces each ignored segment with the same segment of `donor` plus a
/// marker, leaving consumed segments untouched.
fn perturb(input: &ModelInput, donor: &ModelInput, ignored: &[String]) -> ModelInput {
    ModelInput::new(
        input
            .segments
            .iter()
            .map(|s| {
                if ignored.contains(&s.name) {
                    let base = donor
                        .segments
                        .iter()
                        .find(|d| d.name == s.name)
                        .map_or(s.text.as_str(), |d| d.text.as_str());
                    Segment::new(s.name.clone(), format!("{base} zzq perturbation xqv"))
                } else {
                    s.clone()
                }
            })
            .collect(),
    )
}

pub fn run_suite(remote: &RemoteBackend, probe: &ConformanceProbe) -> ConformanceReport {
    let mut report = ConformanceReport::default();
    report.record(
        "meta-schema",
        remote.check_meta().map(|_| ()).map_err(|e| e.to_string()),
    );
    let first = score_batch(remote, &probe.inputs);
    report.record(
        "score-schema-and-dimension",
        first.as_ref().map(|_| ()).map_err(|e| e.to_string()),
    );
    let Ok(first) = first else {
        return report;
    };
    report.record(
        "determinism",
        match score_batch(remote, &probe.inputs) {
            Ok(second) if second == first => Ok(()),
            Ok(_) => Err("repeated batch returned different logits".into()),
            Err(e) => Err(e.to_string()),
        },
    );
    report.record("batch-composition", {
        let mut result = Ok(());
        for (input, expected) in probe.inputs.iter().zip(&first) {
            match score_batch(remote, std::slice::from_ref(input)) {
                Ok(single) if &single[0] == expected => {}
                Ok(_) => {
                    result = Err("single-item scoring differs from batched scoring".into());
                    break;
                }
                Err(e) => {
                    result = Err(e.to_string());
                    break;
                }
            }
        }
        result
    });
    if !probe.ignored_segments.is_empty() {
        let perturbed: Vec<ModelInput> = probe
            .inputs
            .iter()
            .enumerate()
            .map(|(k, i)| {
                let donor = &probe.inputs[(k + 1) % probe.inputs.len()];
                perturb(i, donor, &probe.ignored_segments)
            })
            .collect();
        report.record(
            "segment-invariance",
            match score_batch(remote, &perturbed) {
                Ok(p) if p == first => Ok(()),
                Ok(_) => Err(format!(
                    "logits changed when perturbing {:?}",
                    probe.ignored_segments
                )),
                Err(e) => Err(e.to_string()),
            },
        );
    }
    report
}
