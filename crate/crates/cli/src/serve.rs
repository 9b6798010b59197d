use std::collections::HashMap;
use std::io::Write;

use anyhow::{anyhow, Context, Result};
use serde::Deserialize;
use tiny_http::{Header, Method, Request, Response, Server};

use omission_audit::annotation::{task_view, AnnotationError, AnnotationSession, JudgeOutcome};
use omission_audit::attribution::{read_attributions, AttributionVector};
use omission_audit::calibration::{Judgment, SampledTask};
use omission_audit::corpus::{LabelSet, Manifest};
use omission_audit::jsonl;

use crate::ServeArgs;

#[derive(Deserialize)]
struct JudgmentBody {
    annotator: String,
    judgment: Judgment,
}

struct State {
    session: AnnotationSession,
    labels: LabelSet,
    main: HashMap<String, AttributionVector>,
    biased: HashMap<String, AttributionVector>,
    show_predictions: bool,
}

type Reply = (u16, serde_json::Value);

fn error(status: u16, message: impl Into<String>) -> Reply {
    (status, serde_json::json!({ "error": message.into() }))
}

fn query_param<'a>(query: &'a str, name: &str) -> Option<&'a str> {
    query.split('&').find_map(|kv| {
        let (k, v) = kv.split_once('=')?;
        (k == name).then_some(v)
    })
}

impl State {
    fn view(&self, task: &SampledTask) -> Result<serde_json::Value, String> {
        let main = self
            .main
            .get(&task.instance)
            .ok_or_else(|| format!("no main attribution for `{}`", task.instance))?;
        let biased = self
            .biased
            .get(&task.instance)
            .ok_or_else(|| format!("no biased attribution for `{}`", task.instance))?;
        let view = task_view(
            task,
            self.session.status(task),
            main,
            biased,
            &self.labels,
            self.show_predictions,
        );
        serde_json::to_value(view).map_err(|e| e.to_string())
    }

    fn handle(&mut self, method: &Method, url: &str, body: &str) -> Reply {
        let (path, query) = url.split_once('?').unwrap_or((url, ""));
        let parts: Vec<&str> = path.trim_matches('/').split('/').collect();
        match (method, parts.as_slice()) {
            (Method::Get, ["tasks", "next"]) => {
                let Some(annotator) = query_param(query, "annotator").filter(|a| !a.is_empty()) else {
                    return error(400, "missing `annotator` query parameter");
                };
                match self.session.next_for(annotator) {
                    Some(task) => match self.view(task) {
                        Ok(v) => (200, v),
                        Err(e) => error(500, e),
                    },
                    None => (204, serde_json::Value::Null),
                }
            }
            (Method::Get, ["progress"]) => {
                let Some(annotator) = query_param(query, "annotator") else {
                    return error(400, "missing `annotator` query parameter");
                };
                let (done, assigned) = self.session.progress(annotator);
                (200, serde_json::json!({ "annotator": annotator, "done": done, "assigned": assigned }))
            }
            (Method::Post, ["tasks", id, "judgment"]) => {
                let parsed: JudgmentBody = match serde_json::from_str(body) {
                    Ok(b) => b,
                    Err(e) => return error(400, format!("bad judgment body: {e}")),
                };
                match self.session.judge(id, &parsed.annotator, parsed.judgment) {
                    Ok(JudgeOutcome::Recorded(j)) => {
                        (200, serde_json::json!({ "status": "recorded", "judgment": j }))
                    }
                    Ok(JudgeOutcome::AlreadyStored(j)) => {
                        (200, serde_json::json!({ "status": "already-stored", "judgment": j }))
                    }
                    Err(e @ AnnotationError::UnknownTask(_)) => error(404, e.to_string()),
                    Err(e @ AnnotationError::NotAssigned { .. }) => error(403, e.to_string()),
                    Err(AnnotationError::AlreadyJudged { stored, .. }) => (
                        409,
                        serde_json::json!({ "error": "already judged", "stored": stored }),
                    ),
                    Err(e) => error(500, e.to_string()),
                }
            }
            _ => error(404, format!("no route for {method} {path}")),
        }
    }
}

fn respond(request: Request, (status, body): Reply) -> std::io::Result<()> {
    let json = Header::from_bytes("Content-Type", "application/json").expect("static header");
    if status == 204 {
        return request.respond(Response::empty(204));
    }
    let response = Response::from_string(body.to_string())
        .with_status_code(status)
        .with_header(json);
    request.respond(response)
}

fn index_by_instance(vectors: Vec<AttributionVector>) -> HashMap<String, AttributionVector> {
    vectors.into_iter().map(|v| (v.instance.clone(), v)).collect()
}

pub fn run(args: &ServeArgs) -> Result<()> {
    let tasks: Vec<SampledTask> = jsonl::read(&args.tasks)
        .with_context(|| format!("reading tasks {}", args.tasks.display()))?;
    let labels = Manifest::load(&args.manifest)?.label_set()?;
    let main = index_by_instance(read_attributions(&args.main)?);
    let biased = index_by_instance(read_attributions(&args.biased)?);
    for t in &tasks {
        if !main.contains_key(&t.instance) || !biased.contains_key(&t.instance) {
            return Err(anyhow!("task `{}` has no attribution in both files", t.instance));
        }
    }
    let session = AnnotationSession::open(tasks, &args.annotations)
        .with_context(|| format!("opening annotations {}", args.annotations.display()))?;
    let mut state = State {
        session,
        labels,
        main,
        biased,
        show_predictions: !args.hide_predictions,
    };

    let server = Server::http((args.host.as_str(), args.port)).map_err(|e| anyhow!("bind failed: {e}"))?;
    let addr = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| anyhow!("server is not bound to an ip address"))?;
    println!("listening on http://{addr}");
    std::io::stdout().flush()?;

    for mut request in server.incoming_requests() {
        let mut body = String::new();
        let reply = match request.as_reader().read_to_string(&mut body) {
            Ok(_) => {
                let method = request.method().clone();
                let url = request.url().to_string();
                state.handle(&method, &url, &body)
            }
            Err(e) => error(400, format!("unreadable body: {e}")),
        };
        log::debug!("{} {} -> {}", request.method(), request.url(), reply.0);
        if let Err(e) = respond(request, reply) {
            log::warn!("failed to respond: {e}");
        }
    }
    Ok(())
}
