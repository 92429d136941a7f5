//! HTTP guidance server: clients register brick models, open sessions, and
//! build step by step from ranked next-brick candidates.
//!
//! Every response is JSON with an `"ok"` flag. Each session sits behind its
//! own lock, so requests to one session are serialized while distinct
//! sessions proceed concurrently; model parameters are shared read-only.

pub mod error;
pub mod state;

use std::future::Future;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use brickseq::generate::{commit_step, undo_step};
use brickseq::validity::validate_prefix;
use brickseq::{BrickModel, Placement};

pub use error::ApiError;
pub use state::{
    AppState, CandidateView, LoadedCheckpoint, Mode, ServiceConfig, SessionRecord, Source, DEFAULT_CHECKPOINT,
};

type Shared = Arc<AppState>;
type ApiResult = Result<Json<Value>, ApiError>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/models", post(create_model))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/candidates", get(candidates))
        .route("/sessions/{id}/step", post(step))
        .route("/sessions/{id}/undo", post(undo))
        .route("/sessions/{id}/state", get(session_state))
        .fallback(|| async { ApiError::not_found("no such route") })
        .with_state(state)
}

/// Serves until `shutdown` resolves, then writes the snapshot if one is configured.
pub async fn serve_until(
    state: Shared,
    listener: tokio::net::TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state.clone())).with_graceful_shutdown(shutdown).await?;
    if let Some(path) = &state.config.snapshot {
        match state.save_snapshot(path) {
            Ok(()) => log::info!("wrote session snapshot to {}", path.display()),
            Err(e) => log::error!("failed to write snapshot {}: {e}", path.display()),
        }
    }
    Ok(())
}

/// Serves until Ctrl-C.
pub async fn serve(state: Shared, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    serve_until(state, listener, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}

fn parse_json<T: DeserializeOwned>(headers: &HeaderMap, body: &Bytes) -> Result<T, ApiError> {
    let content_type = headers.get(header::CONTENT_TYPE).and_then(|v| v.to_str().ok()).unwrap_or("");
    if !content_type.starts_with("application/json") {
        return Err(ApiError::bad_request("expected Content-Type: application/json"));
    }
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

/// Runs CPU-bound session work off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(axum::http::StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?
}

async fn health(State(app): State<Shared>) -> Json<Value> {
    let mut checkpoints: Vec<&String> = app.checkpoints.keys().collect();
    checkpoints.sort();
    Json(json!({
        "ok": true,
        "models": app.models.read().unwrap().len(),
        "sessions": app.sessions.read().unwrap().len(),
        "checkpoints": checkpoints,
        "fallback_oracle": app.config.fallback_oracle,
    }))
}

async fn create_model(State(app): State<Shared>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let model: BrickModel = parse_json(&headers, &body)?;
    blocking(move || {
        let (id, n) = app.add_model(model)?;
        log::info!("registered model {id} ({n} bricks)");
        Ok(Json(json!({ "ok": true, "model_id": id, "n_total": n })))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    model_id: String,
    #[serde(default = "default_mode")]
    mode: Mode,
    k: Option<usize>,
    checkpoint: Option<String>,
}

fn default_mode() -> Mode {
    Mode::MultiTrack
}

async fn create_session(State(app): State<Shared>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let req: CreateSession = parse_json(&headers, &body)?;
    let (id, n) = app.create_session(&req.model_id, req.mode, req.k, req.checkpoint.as_deref())?;
    let rec = app.session(&id)?;
    let rec = rec.lock().unwrap();
    Ok(Json(json!({
        "ok": true,
        "session_id": id,
        "model_id": rec.model_id,
        "mode": rec.mode,
        "k": rec.k,
        "checkpoint": rec.checkpoint,
        "n_total": n,
        "step": 0,
    })))
}

#[derive(Debug, Deserialize)]
struct CandidatesQuery {
    k: Option<usize>,
}

async fn candidates(State(app): State<Shared>, Path(id): Path<String>, Query(q): Query<CandidatesQuery>) -> ApiResult {
    let session = app.session(&id)?;
    blocking(move || {
        let rec = session.lock().unwrap();
        let step = rec.state.step();
        let completed = rec.state.is_complete();
        let k = match (rec.mode, q.k) {
            (_, Some(0)) => return Err(ApiError::bad_request("k must be at least 1")),
            (Mode::SingleTrack, _) => 1,
            (Mode::OnDemand, None) => {
                return Ok(Json(json!({
                    "ok": true, "step": step, "completed": completed, "candidates": [], "on_demand": true,
                })));
            }
            (_, Some(k)) => k,
            (_, None) => rec.k,
        };
        match app.candidates(&rec, k) {
            Ok((set, source)) => Ok(Json(json!({
                "ok": true,
                "step": step,
                "completed": completed,
                "source": source,
                "truncated": set.truncated,
                "candidates": state::views(&set),
            }))),
            Err(e) => Err(e.with("step", json!(step)).with("completed", json!(completed))),
        }
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRequest {
    step: usize,
    rank: Option<usize>,
    placement: Option<Placement>,
}

fn check_step(rec: &SessionRecord, client_step: usize) -> Result<(), ApiError> {
    let current = rec.state.step();
    if client_step != current {
        return Err(ApiError::conflict(
            "StaleStep",
            format!("client step {client_step} does not match server step {current}"),
        )
        .with("step", json!(current)));
    }
    Ok(())
}

async fn step(State(app): State<Shared>, Path(id): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let req: StepRequest = parse_json(&headers, &body)?;
    let session = app.session(&id)?;
    blocking(move || {
        let mut rec = session.lock().unwrap();
        check_step(&rec, req.step)?;
        if rec.state.is_complete() {
            return Err(ApiError::conflict("InvalidChoice", "session is already complete"));
        }
        let rank = match (req.rank, req.placement, rec.mode) {
            (Some(_), Some(_), _) => return Err(ApiError::bad_request("give either rank or placement, not both")),
            (None, None, Mode::SingleTrack) => Some(1),
            (None, None, _) => return Err(ApiError::bad_request("rank or placement required")),
            (r, _, _) => r,
        };
        let choice = match (rank, req.placement) {
            (Some(0), _) => return Err(ApiError::bad_request("ranks start at 1")),
            (Some(r), _) => {
                let (set, _) = app.candidates_or_fallback(&rec, r.max(rec.k))?;
                set.candidates
                    .get(r - 1)
                    .map(|c| c.index)
                    .ok_or_else(|| ApiError::conflict("InvalidChoice", format!("no candidate at rank {r}")))?
            }
            (None, Some(p)) => {
                let pm = &rec.state.model;
                (0..pm.len()).find(|&i| !rec.state.occupancy.placed[i] && *pm.placement(i) == p).ok_or_else(|| {
                    ApiError::conflict("InvalidChoice", "placement is not an unplaced brick of this model")
                })?
            }
            (None, None) => unreachable!(),
        };
        commit_step(&mut rec.state, choice)?;
        debug_assert!(validate_prefix(&rec.state.prefix, &rec.state.model).ok);
        rec.updated = state::now();
        Ok(Json(json!({
            "ok": true,
            "step": rec.state.step(),
            "completed": rec.state.is_complete(),
            "placed": { "index": choice, "placement": rec.state.model.placement(choice) },
        })))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct UndoRequest {
    step: usize,
}

async fn undo(State(app): State<Shared>, Path(id): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let req: UndoRequest = parse_json(&headers, &body)?;
    let session = app.session(&id)?;
    let mut rec = session.lock().unwrap();
    check_step(&rec, req.step)?;
    let removed = undo_step(&mut rec.state)?;
    rec.updated = state::now();
    Ok(Json(json!({
        "ok": true,
        "step": rec.state.step(),
        "completed": false,
        "removed": { "index": removed, "placement": rec.state.model.placement(removed) },
    })))
}

async fn session_state(State(app): State<Shared>, Path(id): Path<String>) -> ApiResult {
    let session = app.session(&id)?;
    let rec = session.lock().unwrap();
    let pm = &rec.state.model;
    let placements: Vec<&Placement> = rec.state.prefix.iter().map(|&i| pm.placement(i)).collect();
    Ok(Json(json!({
        "ok": true,
        "session_id": rec.id,
        "model_id": rec.model_id,
        "mode": rec.mode,
        "k": rec.k,
        "checkpoint": rec.checkpoint,
        "step": rec.state.step(),
        "n_total": pm.len(),
        "completed": rec.state.is_complete(),
        "prefix": rec.state.prefix,
        "placements": placements,
        "occupied_cells": rec.occupied(),
        "catalog": pm.model.catalog,
        "state_hash": rec.state_hash(),
        "created": rec.created,
        "updated": rec.updated,
    })))
}
