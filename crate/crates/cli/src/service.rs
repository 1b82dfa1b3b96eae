//! HTTP annotation service backing the annotation UI and review workflow.
//!
//! One JSON file per task under `<store>/tasks/`, replaced atomically by
//! write-then-rename. Every successful POST is appended to
//! `<store>/events.jsonl`; folding that log over all-pending tasks rebuilds
//! the store.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ivif_rlhf::annotation::parse_annotation_value;
use ivif_rlhf::data_pipeline::{Manifest, TripletEntry};
use ivif_rlhf::image::probe_dims;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Mutex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Pending,
    AutoAnnotated,
    InReview,
    Accepted,
}

impl std::str::FromStr for TaskStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("unknown status `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub triplet_id: String,
    pub status: TaskStatus,
    pub assigned_to: Option<String>,
    /// The record in its document form plus bookkeeping keys.
    pub record: Option<Value>,
}

impl AnnotationTask {
    pub fn pending(triplet_id: &str) -> Self {
        Self {
            triplet_id: triplet_id.to_string(),
            status: TaskStatus::Pending,
            assigned_to: None,
            record: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Annotate { body: Value },
    Review { body: Value },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub triplet_id: String,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("invalid `{field}`: {message}")]
    BadRequest { field: String, message: String },
    #[error("unknown {0}")]
    NotFound(String),
    #[error("cannot {action} a task that is {status:?}")]
    Conflict { action: &'static str, status: TaskStatus },
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    fn bad(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::BadRequest {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            Self::BadRequest { .. } => StatusCode::BAD_REQUEST,
            Self::NotFound(_) => StatusCode::NOT_FOUND,
            Self::Conflict { .. } => StatusCode::CONFLICT,
            Self::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let field = match &self {
            Self::BadRequest { field, .. } => Some(field.clone()),
            _ => None,
        };
        (self.status(), Json(json!({ "error": self.to_string(), "field": field }))).into_response()
    }
}

fn validated_record(doc: &Value, triplet_id: &str, dims: (usize, usize), reviewed: bool, annotator: &str) -> Result<Value, ServiceError> {
    let mut record =
        parse_annotation_value(doc, dims).map_err(|e| ServiceError::bad(e.field(), e.to_string()))?;
    record.triplet_id = triplet_id.to_string();
    record.reviewed = reviewed;
    if !annotator.is_empty() {
        record.annotator = annotator.to_string();
    }
    Ok(record.to_json())
}

fn optional_str<'a>(body: &'a Value, key: &str) -> Result<Option<&'a str>, ServiceError> {
    match body.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(_) => Err(ServiceError::bad(key, "must be a string")),
    }
}

/// The state transition of one action. Annotations move a pending task to
/// `auto_annotated` (body flag `"auto_annotated": true`) or `in_review`,
/// and a human annotation moves an auto-annotated task to `in_review`.
/// Reviews accept an auto-annotated or in-review task, optionally replacing
/// its record, or reject an in-review task back to pending.
pub fn apply(task: &AnnotationTask, action: &Action, dims: (usize, usize)) -> Result<AnnotationTask, ServiceError> {
    let mut next = task.clone();
    match action {
        Action::Annotate { body } => {
            if !body.is_object() {
                return Err(ServiceError::bad("$", "document must be a JSON object"));
            }
            let auto = match body.get("auto_annotated") {
                None | Some(Value::Null) => false,
                Some(Value::Bool(b)) => *b,
                Some(_) => return Err(ServiceError::bad("auto_annotated", "must be a boolean")),
            };
            let annotator = optional_str(body, "annotator")?.unwrap_or("");
            let record = validated_record(body, &task.triplet_id, dims, false, annotator)?;
            next.status = match (task.status, auto) {
                (TaskStatus::Pending, true) => TaskStatus::AutoAnnotated,
                (TaskStatus::Pending, false) | (TaskStatus::AutoAnnotated, false) => TaskStatus::InReview,
                (status, _) => return Err(ServiceError::Conflict { action: "annotate", status }),
            };
            if !annotator.is_empty() {
                next.assigned_to = Some(annotator.to_string());
            }
            next.record = Some(record);
        }
        Action::Review { body } => {
            let decision = optional_str(body, "decision")?
                .ok_or_else(|| ServiceError::bad("decision", "missing key (accept or reject)"))?;
            let reviewer = optional_str(body, "reviewer")?.unwrap_or("");
            let corrected = match body.get("record") {
                None | Some(Value::Null) => None,
                Some(doc) => Some(doc),
            };
            match decision {
                "accept" => {
                    if !matches!(task.status, TaskStatus::AutoAnnotated | TaskStatus::InReview) {
                        return Err(ServiceError::Conflict { action: "accept", status: task.status });
                    }
                    let doc = corrected.or(task.record.as_ref()).ok_or_else(|| {
                        ServiceError::Internal(format!("task `{}` has no record to accept", task.triplet_id))
                    })?;
                    let annotator = doc.get("annotator").and_then(Value::as_str).unwrap_or(reviewer);
                    next.record = Some(validated_record(doc, &task.triplet_id, dims, true, annotator)?);
                    next.status = TaskStatus::Accepted;
                }
                "reject" => {
                    if task.status != TaskStatus::InReview {
                        return Err(ServiceError::Conflict { action: "reject", status: task.status });
                    }
                    next.record = corrected
                        .map(|doc| validated_record(doc, &task.triplet_id, dims, false, reviewer))
                        .transpose()?;
                    next.status = TaskStatus::Pending;
                }
                other => return Err(ServiceError::bad("decision", format!("`{other}` is not accept or reject"))),
            }
        }
    }
    Ok(next)
}

fn internal(e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Internal(e.to_string())
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("json.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

struct TaskSlot {
    entry: TripletEntry,
    dims: (usize, usize),
    task: Mutex<AnnotationTask>,
}

struct EventLog {
    path: PathBuf,
    next_seq: u64,
}

pub struct Store {
    dir: PathBuf,
    tasks: BTreeMap<String, TaskSlot>,
    log: Mutex<EventLog>,
}

fn task_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("tasks").join(format!("{id}.json"))
}

pub fn read_events(dir: &Path) -> std::io::Result<Vec<Event>> {
    let path = dir.join("events.jsonl");
    if !path.exists() {
        return Ok(Vec::new());
    }
    std::fs::read_to_string(&path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
        .collect()
}

impl Store {
    /// Opens (or initializes) the store for every triplet of `manifest`.
    /// Persisted records are re-validated.
    pub fn open(dir: &Path, manifest: &Manifest) -> Result<Self, ServiceError> {
        std::fs::create_dir_all(dir.join("tasks")).map_err(internal)?;
        let mut tasks = BTreeMap::new();
        for entry in &manifest.entries {
            let dims = probe_dims(&entry.fused_path).map_err(internal)?;
            let path = task_path(dir, &entry.triplet_id);
            let task = if path.exists() {
                let text = std::fs::read_to_string(&path).map_err(internal)?;
                let task: AnnotationTask = serde_json::from_str(&text).map_err(internal)?;
                if let Some(record) = &task.record {
                    parse_annotation_value(record, dims).map_err(|e| {
                        ServiceError::Internal(format!("stored record `{}` is invalid: {e}", entry.triplet_id))
                    })?;
                }
                task
            } else {
                let task = AnnotationTask::pending(&entry.triplet_id);
                atomic_write(&path, &serde_json::to_vec_pretty(&task).map_err(internal)?).map_err(internal)?;
                task
            };
            tasks.insert(
                entry.triplet_id.clone(),
                TaskSlot {
                    entry: entry.clone(),
                    dims,
                    task: Mutex::new(task),
                },
            );
        }
        let next_seq = read_events(dir).map_err(internal)?.last().map_or(0, |e| e.seq + 1);
        Ok(Self {
            dir: dir.to_path_buf(),
            tasks,
            log: Mutex::new(EventLog {
                path: dir.join("events.jsonl"),
                next_seq,
            }),
        })
    }

    fn slot(&self, id: &str) -> Result<&TaskSlot, ServiceError> {
        self.tasks.get(id).ok_or_else(|| ServiceError::NotFound(format!("task `{id}`")))
    }

    pub async fn get(&self, id: &str) -> Result<AnnotationTask, ServiceError> {
        Ok(self.slot(id)?.task.lock().await.clone())
    }

    pub async fn list(&self, status: Option<TaskStatus>) -> Vec<AnnotationTask> {
        let mut out = Vec::new();
        for slot in self.tasks.values() {
            let task = slot.task.lock().await.clone();
            if status.is_none_or(|s| s == task.status) {
                out.push(task);
            }
        }
        out
    }

    /// Applies `action` under the task's lock: the transition is checked
    /// against the current status, the task file is replaced atomically and
    /// the event is logged before the lock is released.
    pub async fn submit(&self, id: &str, action: Action) -> Result<AnnotationTask, ServiceError> {
        let slot = self.slot(id)?;
        let mut task = slot.task.lock().await;
        let next = apply(&task, &action, slot.dims)?;
        let bytes = serde_json::to_vec_pretty(&next).map_err(internal)?;
        atomic_write(&task_path(&self.dir, id), &bytes).map_err(internal)?;
        {
            let mut log = self.log.lock().await;
            let event = Event {
                seq: log.next_seq,
                triplet_id: id.to_string(),
                action,
            };
            let mut line = serde_json::to_string(&event).map_err(internal)?;
            line.push('\n');
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&log.path)
                .map_err(internal)?;
            f.write_all(line.as_bytes()).map_err(internal)?;
            f.sync_data().map_err(internal)?;
            log.next_seq += 1;
        }
        *task = next.clone();
        Ok(next)
    }

    /// Every task as persisted on disk.
    pub fn snapshot(dir: &Path) -> std::io::Result<BTreeMap<String, AnnotationTask>> {
        let mut out = BTreeMap::new();
        for entry in std::fs::read_dir(dir.join("tasks"))? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let task: AnnotationTask = serde_json::from_str(&std::fs::read_to_string(&path)?)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            out.insert(task.triplet_id.clone(), task);
        }
        Ok(out)
    }

    pub async fn accepted_records(&self) -> Vec<Value> {
        let mut out = Vec::new();
        for slot in self.tasks.values() {
            let task = slot.task.lock().await;
            if task.status == TaskStatus::Accepted {
                out.extend(task.record.clone());
            }
        }
        out
    }
}

/// Folds `events` over all-pending tasks for the triplets of `manifest`.
pub fn replay(manifest: &Manifest, events: &[Event]) -> Result<BTreeMap<String, AnnotationTask>, ServiceError> {
    let mut dims = BTreeMap::new();
    let mut tasks = BTreeMap::new();
    for e in &manifest.entries {
        dims.insert(e.triplet_id.clone(), probe_dims(&e.fused_path).map_err(internal)?);
        tasks.insert(e.triplet_id.clone(), AnnotationTask::pending(&e.triplet_id));
    }
    for ev in events {
        let task = tasks
            .get(&ev.triplet_id)
            .ok_or_else(|| ServiceError::NotFound(format!("task `{}`", ev.triplet_id)))?;
        let next = apply(task, &ev.action, dims[&ev.triplet_id])?;
        tasks.insert(ev.triplet_id.clone(), next);
    }
    Ok(tasks)
}

type Shared = Arc<Store>;

#[derive(Deserialize)]
struct ListQuery {
    status: Option<String>,
}

async fn list_tasks(State(store): State<Shared>, Query(q): Query<ListQuery>) -> Result<Json<Value>, ServiceError> {
    let status = q
        .status
        .map(|s| s.parse::<TaskStatus>().map_err(|m| ServiceError::bad("status", m)))
        .transpose()?;
    Ok(Json(json!({ "tasks": store.list(status).await })))
}

fn image_urls(id: &str) -> Value {
    json!({
        "visible": format!("/images/{id}/visible"),
        "infrared": format!("/images/{id}/infrared"),
        "fused": format!("/images/{id}/fused"),
    })
}

async fn get_task(State(store): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<Value>, ServiceError> {
    let task = store.get(&id).await?;
    let slot = store.slot(&id)?;
    Ok(Json(json!({
        "task": task,
        "images": image_urls(&id),
        "width": slot.dims.1,
        "height": slot.dims.0,
    })))
}

async fn get_image(
    State(store): State<Shared>,
    UrlPath((id, kind)): UrlPath<(String, String)>,
) -> Result<Response, ServiceError> {
    let slot = store.slot(&id)?;
    let path = match kind.as_str() {
        "visible" => &slot.entry.visible_path,
        "infrared" => &slot.entry.infrared_path,
        "fused" => &slot.entry.fused_path,
        other => return Err(ServiceError::NotFound(format!("image kind `{other}`"))),
    };
    let bytes = tokio::fs::read(path).await.map_err(internal)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

fn json_body(bytes: &Bytes) -> Result<Value, ServiceError> {
    serde_json::from_slice(bytes).map_err(|e| ServiceError::bad("$", format!("malformed JSON: {e}")))
}

async fn post_annotation(
    State(store): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<AnnotationTask>, ServiceError> {
    store.slot(&id)?;
    let body = json_body(&body)?;
    Ok(Json(store.submit(&id, Action::Annotate { body }).await?))
}

async fn post_review(
    State(store): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<AnnotationTask>, ServiceError> {
    store.slot(&id)?;
    let body = json_body(&body)?;
    Ok(Json(store.submit(&id, Action::Review { body }).await?))
}

async fn export(State(store): State<Shared>) -> Json<Value> {
    let records = store.accepted_records().await;
    Json(json!({ "count": records.len(), "records": records }))
}

pub fn router(store: Arc<Store>) -> Router {
    Router::new()
        .route("/tasks", get(list_tasks))
        .route("/tasks/{id}", get(get_task))
        .route("/tasks/{id}/annotation", post(post_annotation))
        .route("/tasks/{id}/review", post(post_review))
        .route("/images/{id}/{kind}", get(get_image))
        .route("/export", get(export))
        .with_state(store)
}

/// Serves until the listener fails or ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, store: Arc<Store>) -> std::io::Result<()> {
    axum::serve(listener, router(store))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(sharpness: f64) -> Value {
        json!({
            "scores": {"Thermal Retention": 4, "Texture Preservation": 3, "Artifacts": 2, "Sharpness": sharpness, "Overall Score": 3},
            "shapes": [{"label": "Artifacts", "points": [[5, 5], [8, 5]], "shape_type": "circle"}]
        })
    }

    #[test]
    fn forward_transitions() {
        let t = AnnotationTask::pending("t");
        let dims = (16, 16);
        let a = apply(&t, &Action::Annotate { body: doc(4.0) }, dims).unwrap();
        assert_eq!(a.status, TaskStatus::InReview);
        let mut auto = doc(4.0);
        auto["auto_annotated"] = json!(true);
        let b = apply(&t, &Action::Annotate { body: auto }, dims).unwrap();
        assert_eq!(b.status, TaskStatus::AutoAnnotated);
        assert_eq!(apply(&b, &Action::Annotate { body: doc(4.0) }, dims).unwrap().status, TaskStatus::InReview);
        let accepted = apply(&a, &Action::Review { body: json!({"decision": "accept"}) }, dims).unwrap();
        assert_eq!(accepted.status, TaskStatus::Accepted);
        assert_eq!(accepted.record.as_ref().unwrap()["reviewed"], json!(true));
        let rejected = apply(&a, &Action::Review { body: json!({"decision": "reject"}) }, dims).unwrap();
        assert_eq!((rejected.status, rejected.record), (TaskStatus::Pending, None));
    }

    #[test]
    fn illegal_transitions_conflict() {
        let dims = (16, 16);
        let t = AnnotationTask::pending("t");
        let in_review = apply(&t, &Action::Annotate { body: doc(4.0) }, dims).unwrap();
        for (task, action) in [
            (&in_review, Action::Annotate { body: doc(4.0) }),
            (&t, Action::Review { body: json!({"decision": "accept"}) }),
            (&t, Action::Review { body: json!({"decision": "reject"}) }),
        ] {
            assert!(matches!(apply(task, &action, dims), Err(ServiceError::Conflict { .. })));
        }
    }

    #[test]
    fn schema_errors_name_the_field() {
        let err = apply(&AnnotationTask::pending("t"), &Action::Annotate { body: doc(7.0) }, (16, 16)).unwrap_err();
        match err {
            ServiceError::BadRequest { field, .. } => assert_eq!(field, "Sharpness"),
            other => panic!("{other}"),
        }
        let err = apply(&AnnotationTask::pending("t"), &Action::Review { body: json!({"decision": "maybe"}) }, (16, 16))
            .unwrap_err();
        assert_eq!(err.status(), StatusCode::BAD_REQUEST);
    }
}
