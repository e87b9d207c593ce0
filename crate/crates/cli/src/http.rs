//! HTTP mount of the gateway: JSON endpoints plus a server-sent event feed.

use std::convert::Infallible;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use anyhow::Result;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use serde::Deserialize;
use serde_json::json;
use tokio::sync::watch;

use efleet_core::gateway::wire::{AnswerClarification, SubmitInstruction, WireEnvelope, WireMessage};
use efleet_core::memory::StructuredFilter;
use efleet_core::model::{ClarificationId, RobotId, TaskId};
use efleet_core::{Gateway, GatewayError};

#[derive(Clone)]
pub struct AppState {
    gateway: Arc<Mutex<Gateway>>,
    head: watch::Receiver<u64>,
}

pub struct ApiError(GatewayError);

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            GatewayError::RuntimeNotReady => StatusCode::SERVICE_UNAVAILABLE,
            GatewayError::UnknownClarification(_) | GatewayError::UnknownTask(_) => StatusCode::NOT_FOUND,
            GatewayError::AlreadyAnswered(_) => StatusCode::CONFLICT,
            GatewayError::SeqOutOfRange { .. } => StatusCode::RANGE_NOT_SATISFIABLE,
            GatewayError::InvalidRequest(_) | GatewayError::Memory(_) => StatusCode::BAD_REQUEST,
            GatewayError::Log(_) | GatewayError::Setup(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let code = format!("{:?}", self.0).split(['(', ' ', '{']).next().unwrap_or_default().to_owned();
        (status, Json(json!({ "error": self.0.to_string(), "code": code }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Builds the router. `head` is bumped whenever new events exist.
pub fn router(gateway: Arc<Mutex<Gateway>>, head: watch::Receiver<u64>) -> Router {
    Router::new()
        .route("/instructions", post(submit).get(list_tasks))
        .route("/instructions/{id}", get(task))
        .route("/clarifications", get(open_clarifications))
        .route("/clarifications/{id}", post(answer).get(clarification))
        .route("/fleet", get(fleet))
        .route("/memory/semantic", get(semantic))
        .route("/memory/structured", get(structured))
        .route("/anchors", get(anchors))
        .route("/events", get(events))
        .with_state(AppState { gateway, head })
}

/// Accepts a bare payload or a versioned wire envelope.
fn unwrap_envelope<T: for<'de> Deserialize<'de>>(body: serde_json::Value, kind: &str) -> Result<T, ApiError> {
    let invalid = |m: String| ApiError(GatewayError::InvalidRequest(m));
    if body.get("version").is_some() && body.get("kind").is_some() {
        let env: WireEnvelope = serde_json::from_value(body).map_err(|e| invalid(e.to_string()))?;
        if env.kind != kind {
            return Err(invalid(format!("expected a `{kind}` message, got `{}`", env.kind)));
        }
        env.clone().into_message().map_err(|e| invalid(e.to_string()))?;
        return serde_json::from_value(env.payload).map_err(|e| invalid(e.to_string()));
    }
    serde_json::from_value(body).map_err(|e| invalid(e.to_string()))
}

async fn submit(State(s): State<AppState>, Json(body): Json<serde_json::Value>) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    let m: SubmitInstruction = unwrap_envelope(body, "submit_instruction")?;
    let id = s.gateway.lock().expect("gateway lock").submit_instruction(&m.text, m.priority, m.explicit_robot, m.tau_override)?;
    Ok((StatusCode::CREATED, Json(json!({ "task_id": id }))))
}

async fn list_tasks(State(s): State<AppState>) -> ApiResult<serde_json::Value> {
    Ok(Json(json!(s.gateway.lock().expect("gateway lock").tasks())))
}

async fn task(State(s): State<AppState>, Path(id): Path<u64>) -> ApiResult<serde_json::Value> {
    Ok(Json(json!(s.gateway.lock().expect("gateway lock").task(TaskId(id))?)))
}

#[derive(Deserialize)]
struct AnswerBody {
    answer: String,
}

async fn answer(State(s): State<AppState>, Path(id): Path<u64>, Json(body): Json<serde_json::Value>) -> ApiResult<serde_json::Value> {
    let text = if body.get("kind").is_some() {
        let m: AnswerClarification = unwrap_envelope(body, "answer_clarification")?;
        if m.clarification_id != ClarificationId(id) {
            return Err(ApiError(GatewayError::InvalidRequest("clarification id does not match the path".into())));
        }
        m.answer
    } else {
        unwrap_envelope::<AnswerBody>(body, "answer_clarification")?.answer
    };
    s.gateway.lock().expect("gateway lock").answer_clarification(ClarificationId(id), &text)?;
    Ok(Json(json!({ "clarification_id": id, "answer": text })))
}

async fn clarification(State(s): State<AppState>, Path(id): Path<u64>) -> ApiResult<serde_json::Value> {
    Ok(Json(json!(s.gateway.lock().expect("gateway lock").clarification(ClarificationId(id))?)))
}

async fn open_clarifications(State(s): State<AppState>) -> ApiResult<serde_json::Value> {
    Ok(Json(json!(s.gateway.lock().expect("gateway lock").open_clarifications())))
}

async fn fleet(State(s): State<AppState>) -> ApiResult<serde_json::Value> {
    Ok(Json(json!(s.gateway.lock().expect("gateway lock").fleet())))
}

#[derive(Deserialize)]
struct SemanticQuery {
    q: String,
    #[serde(default = "three")]
    k: usize,
}

fn three() -> usize {
    3
}

async fn semantic(State(s): State<AppState>, Query(q): Query<SemanticQuery>) -> ApiResult<serde_json::Value> {
    Ok(Json(json!(s.gateway.lock().expect("gateway lock").memory_semantic(&q.q, q.k, None)?)))
}

#[derive(Deserialize)]
struct StructuredQuery {
    category: Option<String>,
    source_robot: Option<String>,
    from: Option<u64>,
    to: Option<u64>,
}

async fn structured(State(s): State<AppState>, Query(q): Query<StructuredQuery>) -> ApiResult<serde_json::Value> {
    let time_window = match (q.from, q.to) {
        (Some(a), Some(b)) => Some((a, b)),
        (None, None) => None,
        _ => return Err(ApiError(GatewayError::InvalidRequest("time window needs both `from` and `to`".into()))),
    };
    let filter = StructuredFilter { category: q.category, source_robot: q.source_robot.map(RobotId::new), time_window, within_radius: None };
    Ok(Json(json!(s.gateway.lock().expect("gateway lock").memory_structured(&filter)?)))
}

async fn anchors(State(s): State<AppState>) -> ApiResult<serde_json::Value> {
    Ok(Json(json!(s.gateway.lock().expect("gateway lock").anchors())))
}

#[derive(Deserialize)]
struct EventsQuery {
    from_seq: Option<u64>,
}

/// Every event from `from_seq` on, then live ones as they arrive. Each SSE
/// message carries a wire envelope; its id is the event seq.
async fn events(State(s): State<AppState>, Query(q): Query<EventsQuery>) -> Result<Sse<impl Stream<Item = Result<SseEvent, Infallible>>>, ApiError> {
    let start = q.from_seq.unwrap_or(0);
    s.gateway.lock().expect("gateway lock").stream_events(Some(start))?;
    let feed = stream::unfold((s, start), |(mut s, cursor)| async move {
        loop {
            let batch: Vec<_> = {
                let g = s.gateway.lock().expect("gateway lock");
                g.stream_events(Some(cursor)).map(|e| e.to_vec()).unwrap_or_default()
            };
            if !batch.is_empty() {
                let next = cursor + batch.len() as u64;
                let out: Vec<Result<SseEvent, Infallible>> = batch
                    .into_iter()
                    .map(|e| Ok(SseEvent::default().id(e.seq.to_string()).event(e.body.kind()).data(WireMessage::Event(e).encode())))
                    .collect();
                return Some((stream::iter(out), (s, next)));
            }
            if s.head.changed().await.is_err() {
                return None;
            }
        }
    });
    Ok(Sse::new(futures::StreamExt::flatten(feed)).keep_alive(KeepAlive::new().interval(Duration::from_secs(15))))
}

/// Serves until interrupted. With `tick_ms` the runtime advances on a timer.
pub fn serve(gateway: Gateway, listen: &str, tick_ms: Option<u64>) -> Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let (tx, rx) = watch::channel(gateway.head());
        let gateway = Arc::new(Mutex::new(gateway));
        if let Some(ms) = tick_ms {
            let g = gateway.clone();
            tokio::spawn(async move {
                let mut every = tokio::time::interval(Duration::from_millis(ms.max(1)));
                loop {
                    every.tick().await;
                    let head = {
                        let mut g = g.lock().expect("gateway lock");
                        if let Err(e) = g.tick() {
                            log::error!("tick failed: {e}");
                        }
                        g.head()
                    };
                    tx.send_if_modified(|h| std::mem::replace(h, head) != head);
                }
            });
        } else {
            // Read-only: nothing will change, but keep the sender alive.
            std::mem::forget(tx);
        }
        let listener = tokio::net::TcpListener::bind(listen).await?;
        log::info!("listening on {}", listener.local_addr()?);
        println!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(gateway, rx)).await?;
        Ok(())
    })
}
