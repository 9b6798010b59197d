//! Annotation session state behind the annotation service: per-annotator
//! task queues in plan order, write-once judgments, and crash-safe resume
//! from the append-only annotation file.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::AttributionVector;
use crate::calibration::{read_annotations, AnnotationRecord, CalibrationError, Judgment, SampledTask};
use crate::corpus::LabelSet;
use crate::report::normalized_intensities;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("task `{task}` is not assigned to `{annotator}`")]
    NotAssigned { task: String, annotator: String },
    #[error("`{annotator}` already judged `{task}` as {stored:?}")]
    AlreadyJudged {
        task: String,
        annotator: String,
        stored: Judgment,
    },
    #[error("corrupt annotation file: {0}")]
    CorruptFile(String),
    #[error("duplicate task `{0}` in task list")]
    DuplicateTask(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Pending,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JudgeOutcome {
    Recorded(Judgment),
    /// Identical re-submission; nothing was written.
    AlreadyStored(Judgment),
}

pub struct AnnotationSession {
    tasks: Vec<SampledTask>,
    index: HashMap<String, usize>,
    judged: HashMap<(String, String), Judgment>,
    log: Option<File>,
}

impl AnnotationSession {
    fn build(tasks: Vec<SampledTask>) -> Result<Self, AnnotationError> {
        let mut index = HashMap::with_capacity(tasks.len());
        for (i, t) in tasks.iter().enumerate() {
            if index.insert(t.instance.clone(), i).is_some() {
                return Err(AnnotationError::DuplicateTask(t.instance.clone()));
            }
        }
        Ok(Self {
            tasks,
            index,
            judged: HashMap::new(),
            log: None,
        })
    }

    pub fn in_memory(tasks: Vec<SampledTask>) -> Result<Self, AnnotationError> {
        Self::build(tasks)
    }

    /// Opens a session appending to `path`, replaying any judgments already
    /// in the file.
    pub fn open(tasks: Vec<SampledTask>, path: &Path) -> Result<Self, AnnotationError> {
        let mut session = Self::build(tasks)?;
        if path.exists() {
            let existing = read_annotations(path).map_err(|e| match e {
                CalibrationError::Io(io) => AnnotationError::Io(io),
                other => AnnotationError::CorruptFile(other.to_string()),
            })?;
            for r in existing {
                let task = session
                    .index
                    .get(&r.instance)
                    .map(|&i| &session.tasks[i])
                    .ok_or_else(|| {
                        AnnotationError::CorruptFile(format!("judgment for unknown task `{}`", r.instance))
                    })?;
                if !task.assignees.contains(&r.annotator) {
                    return Err(AnnotationError::CorruptFile(format!(
                        "`{}` judged `{}` without being assigned",
                        r.annotator, r.instance
                    )));
                }
                session.judged.insert((r.instance, r.annotator), r.judgment);
            }
        }
        session.log = Some(OpenOptions::new().create(true).append(true).open(path)?);
        Ok(session)
    }

    pub fn tasks(&self) -> &[SampledTask] {
        &self.tasks
    }

    pub fn task(&self, id: &str) -> Option<&SampledTask> {
        self.index.get(id).map(|&i| &self.tasks[i])
    }

    pub fn judgment(&self, task: &str, annotator: &str) -> Option<Judgment> {
        self.judged
            .get(&(task.to_string(), annotator.to_string()))
            .copied()
    }

    /// Done once every assignee has judged.
    pub fn status(&self, task: &SampledTask) -> TaskStatus {
        if task
            .assignees
            .iter()
            .all(|a| self.judgment(&task.instance, a).is_some())
        {
            TaskStatus::Done
        } else {
            TaskStatus::Pending
        }
    }

    /// First task in plan order assigned to `annotator` and not yet judged
    /// by them.
    pub fn next_for(&self, annotator: &str) -> Option<&SampledTask> {
        self.tasks.iter().find(|t| {
            t.assignees.iter().any(|a| a == annotator) && self.judgment(&t.instance, annotator).is_none()
        })
    }

    /// (judged, assigned) for one annotator.
    pub fn progress(&self, annotator: &str) -> (usize, usize) {
        let assigned: Vec<&SampledTask> = self
            .tasks
            .iter()
            .filter(|t| t.assignees.iter().any(|a| a == annotator))
            .collect();
        let done = assigned
            .iter()
            .filter(|t| self.judgment(&t.instance, annotator).is_some())
            .count();
        (done, assigned.len())
    }

    pub fn records(&self) -> usize {
        self.judged.len()
    }

    /// Persists a judgment exactly once. The record is flushed to the file
    /// before the in-memory state changes.
    pub fn judge(
        &mut self,
        task: &str,
        annotator: &str,
        judgment: Judgment,
    ) -> Result<JudgeOutcome, AnnotationError> {
        let t = self
            .task(task)
            .ok_or_else(|| AnnotationError::UnknownTask(task.to_string()))?;
        if !t.assignees.iter().any(|a| a == annotator) {
            return Err(AnnotationError::NotAssigned {
                task: task.to_string(),
                annotator: annotator.to_string(),
            });
        }
        if let Some(stored) = self.judgment(task, annotator) {
            return if stored == judgment {
                Ok(JudgeOutcome::AlreadyStored(stored))
            } else {
                Err(AnnotationError::AlreadyJudged {
                    task: task.to_string(),
                    annotator: annotator.to_string(),
                    stored,
                })
            };
        }
        let record = AnnotationRecord {
            instance: task.to_string(),
            annotator: annotator.to_string(),
            judgment,
            timestamp: Some(unix_timestamp()),
        };
        if let Some(log) = self.log.as_mut() {
            let mut line = serde_json::to_vec(&record).expect("record serializes");
            line.push(b'\n');
            log.write_all(&line)?;
            log.sync_data()?;
        }
        self.judged
            .insert((task.to_string(), annotator.to_string()), judgment);
        Ok(JudgeOutcome::Recorded(judgment))
    }
}

fn unix_timestamp() -> String {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("unix:{secs}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenPayload {
    pub segment: String,
    pub text: String,
    /// Effect over the vector's max |effect|, in [-1, 1].
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPayload {
    pub tokens: Vec<TokenPayload>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted: Option<String>,
}

/// What an annotator sees for one task. Similarity is never included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskView {
    pub instance: String,
    pub gold: String,
    pub main: ModelPayload,
    pub biased: ModelPayload,
    pub assignees: Vec<String>,
    pub status: TaskStatus,
}

fn payload(v: &AttributionVector, labels: &LabelSet, show_predictions: bool) -> ModelPayload {
    let intensities = normalized_intensities(&v.effects);
    ModelPayload {
        tokens: v
            .tokens
            .iter()
            .zip(intensities)
            .map(|(t, intensity)| TokenPayload {
                segment: t.segment.clone(),
                text: t.text.clone(),
                intensity,
            })
            .collect(),
        predicted: show_predictions.then(|| labels.name(v.predicted).unwrap_or("?").to_string()),
    }
}

pub fn task_view(
    task: &SampledTask,
    status: TaskStatus,
    main: &AttributionVector,
    biased: &AttributionVector,
    labels: &LabelSet,
    show_predictions: bool,
) -> TaskView {
    TaskView {
        instance: task.instance.clone(),
        gold: labels.name(main.gold).unwrap_or("?").to_string(),
        main: payload(main, labels, show_predictions),
        biased: payload(biased, labels, show_predictions),
        assignees: task.assignees.clone(),
        status,
    }
}
