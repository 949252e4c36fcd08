//! HTTP surface for manual review of QA-failed annotations.
//!
//! Every JSON response carries `status`: `"ok"` with a `data` member, or
//! `"error"` with `code`, `message` and, for validation errors,
//! `failed_checks`.
//!
//! | method | path | body |
//! |---|---|---|
//! | GET | `/review/next` | - |
//! | GET | `/review/{item_id}` | - |
//! | POST | `/review/{item_id}/verdict` | `{status, reviewer, corrected?}` |
//! | GET | `/images/{image_id}/{role}` | - (`original` or `s1_overlay`, PNG) |
//! | GET | `/stats` | - |

use std::collections::BTreeMap;
use std::future::Future;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::net::TcpListener;

use chainbox::layout::LayoutBox;
use chainbox::pipeline::{page_png, Corpus};
use chainbox::render::StyleOverrides;
use chainbox::store::{Dataset, QueueStats, ReviewItem, ReviewQueue, Verdict};
use chainbox::Error as CoreError;

pub const TOKEN_HEADER: &str = "x-review-token";
pub const REVIEWER_HEADER: &str = "x-reviewer";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    Core(#[from] CoreError),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("missing or wrong review token")]
    Unauthorized,
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    fn status_and_code(&self) -> (StatusCode, &'static str) {
        match self {
            ServiceError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            ServiceError::Unauthorized => (StatusCode::UNAUTHORIZED, "unauthorized"),
            ServiceError::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
            ServiceError::Core(e) => match e.root() {
                CoreError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
                CoreError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
                CoreError::State { .. } => (StatusCode::CONFLICT, "state"),
                CoreError::Validation { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "validation"),
                CoreError::Parameter(_) => (StatusCode::BAD_REQUEST, "bad_request"),
                _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
            },
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (status, code) = self.status_and_code();
        let mut body = json!({"status": "error", "code": code, "message": self.to_string()});
        if let ServiceError::Core(e) = &self {
            if let CoreError::Validation { checks } = e.root() {
                body["failed_checks"] = json!(checks);
            }
        }
        if status.is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ServiceError>;

fn ok(data: impl Serialize) -> Json<Value> {
    Json(json!({"status": "ok", "data": data}))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewSession {
    pub reviewer: String,
    pub items_served: u64,
}

struct Inner {
    queue: ReviewQueue,
    datasets: BTreeMap<String, Dataset>,
    sessions: BTreeMap<String, ReviewSession>,
}

/// Shared service state. All queue and dataset writes go through one lock.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Mutex<Inner>>,
    datasets_root: PathBuf,
    corpus: Corpus,
    style: StyleOverrides,
    token: Option<String>,
}

impl AppState {
    pub fn new(
        queue: ReviewQueue,
        datasets_root: impl Into<PathBuf>,
        corpus: Corpus,
        style: StyleOverrides,
        token: Option<String>,
    ) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                queue,
                datasets: BTreeMap::new(),
                sessions: BTreeMap::new(),
            })),
            datasets_root: datasets_root.into(),
            corpus,
            style,
            token,
        }
    }

    fn lock(&self) -> ApiResult<std::sync::MutexGuard<'_, Inner>> {
        self.inner
            .lock()
            .map_err(|_| ServiceError::Internal("state lock poisoned".into()))
    }

    pub fn stats(&self) -> ApiResult<QueueStats> {
        Ok(self.lock()?.queue.stats())
    }
}

/// What a reviewer sees for one item.
#[derive(Debug, Clone, Serialize)]
struct ItemView<'a> {
    item_id: &'a str,
    status: &'a str,
    sample_id: &'a str,
    image_id: &'a str,
    dataset_tag: &'a str,
    question: &'a str,
    answers: &'a [String],
    image_url: String,
    overlay_url: String,
    boxes: &'a [LayoutBox],
    draft: &'a chainbox::datagen::KeyBoxAnnotation,
    failed_checks: Vec<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    verdict: Option<&'a chainbox::store::VerdictRecord>,
}

fn view(item: &ReviewItem) -> Value {
    let d = &item.draft;
    let v = ItemView {
        item_id: &item.item_id,
        status: item.status.name(),
        sample_id: &d.sample_id,
        image_id: &d.image_id,
        dataset_tag: &d.dataset_tag,
        question: &d.question,
        answers: &d.answers,
        image_url: format!("/images/{}/original", d.image_id),
        overlay_url: format!("/images/{}/s1_overlay", d.image_id),
        boxes: &item.layout.boxes,
        draft: &d.annotation,
        failed_checks: item.failed_checks.iter().map(|c| c.name()).collect(),
        verdict: item.verdict.as_ref(),
    };
    serde_json::to_value(v).expect("view serializes")
}

#[derive(Debug, Deserialize)]
struct NextQuery {
    reviewer: Option<String>,
}

async fn review_next(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(q): Query<NextQuery>,
) -> ApiResult<Json<Value>> {
    let reviewer = q
        .reviewer
        .or_else(|| {
            headers
                .get(REVIEWER_HEADER)
                .and_then(|v| v.to_str().ok())
                .map(str::to_owned)
        })
        .filter(|r| !r.trim().is_empty());
    let mut inner = state.lock()?;
    let Some(item) = inner.queue.next_pending().map(view) else {
        return Ok(Json(json!({"status": "ok", "empty": true, "data": null})));
    };
    if let Some(r) = reviewer {
        let session = inner
            .sessions
            .entry(r.clone())
            .or_insert_with(|| ReviewSession {
                reviewer: r,
                items_served: 0,
            });
        session.items_served += 1;
    }
    Ok(Json(json!({"status": "ok", "empty": false, "data": item})))
}

async fn review_item(
    State(state): State<AppState>,
    Path(item_id): Path<String>,
) -> ApiResult<Json<Value>> {
    let inner = state.lock()?;
    let item = inner
        .queue
        .get(&item_id)
        .ok_or_else(|| CoreError::NotFound(format!("review item {item_id}")))?;
    Ok(ok(view(item)))
}

async fn review_verdict(
    State(state): State<AppState>,
    Path(item_id): Path<String>,
    body: Result<Json<Verdict>, JsonRejection>,
) -> ApiResult<Json<Value>> {
    let Json(verdict) = body.map_err(|e| ServiceError::BadRequest(e.body_text()))?;
    let st = state.clone();
    tokio::task::spawn_blocking(move || -> ApiResult<Json<Value>> {
        let mut guard = st.lock()?;
        let inner = &mut *guard;
        let tag = inner
            .queue
            .get(&item_id)
            .ok_or_else(|| CoreError::NotFound(format!("review item {item_id}")))?
            .draft
            .dataset_tag
            .clone();
        if !inner.datasets.contains_key(&tag) {
            let ds = Dataset::open(&st.datasets_root, &tag)?;
            inner.datasets.insert(tag.clone(), ds);
        }
        let dataset = inner.datasets.get_mut(&tag).expect("dataset opened");
        let item = inner.queue.submit_verdict(&item_id, verdict, dataset)?;
        tracing::info!(item_id = %item.item_id, status = item.status.name(), "verdict recorded");
        Ok(ok(view(&item)))
    })
    .await
    .map_err(|e| ServiceError::Internal(e.to_string()))?
}

async fn image(
    State(state): State<AppState>,
    Path((image_id, role)): Path<(String, String)>,
) -> ApiResult<Response> {
    let overlay = match role.as_str() {
        "original" => false,
        "s1_overlay" => true,
        other => {
            return Err(ServiceError::BadRequest(format!(
                "unknown image role {other:?}"
            )))
        }
    };
    let st = state.clone();
    let bytes = tokio::task::spawn_blocking(move || {
        page_png(&st.corpus, &image_id, overlay.then_some(&st.style))
    })
    .await
    .map_err(|e| ServiceError::Internal(e.to_string()))??;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn stats(State(state): State<AppState>) -> ApiResult<Json<Value>> {
    let inner = state.lock()?;
    let s = inner.queue.stats();
    let sessions: Vec<&ReviewSession> = inner.sessions.values().collect();
    Ok(ok(json!({
        "queue": s,
        "conserved": s.enqueued == s.pending + s.accepted + s.corrected + s.rejected,
        "sessions": sessions,
    })))
}

async fn not_found() -> ServiceError {
    ServiceError::Core(CoreError::NotFound("no such route".into()))
}

async fn require_token(State(state): State<AppState>, request: Request, next: Next) -> Response {
    if let Some(expected) = &state.token {
        let given = request
            .headers()
            .get(TOKEN_HEADER)
            .and_then(|v| v.to_str().ok());
        if given != Some(expected.as_str()) {
            return ServiceError::Unauthorized.into_response();
        }
    }
    next.run(request).await
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/review/next", get(review_next))
        .route("/review/{item_id}", get(review_item))
        .route("/review/{item_id}/verdict", post(review_verdict))
        .route("/images/{image_id}/{role}", get(image))
        .route("/stats", get(stats))
        .fallback(not_found)
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

/// Serves until `shutdown` resolves, then finishes in-flight requests.
pub async fn serve(
    listener: TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let addr = listener.local_addr()?;
    tracing::info!(%addr, "review service listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await?;
    tracing::info!("review service stopped");
    Ok(())
}
