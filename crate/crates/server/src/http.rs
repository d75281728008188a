//! HTTP/1.1 front end.
//!
//! | route | request | response |
//! |---|---|---|
//! | `POST /v1/upload` | SGUP body, `X-Vehicle-Id`, `X-Session-Id` | 200 `{"version", "duplicate"}`, 400 `{"error", "offset"}`, 500 `{"error"}` |
//! | `GET /v1/map?min_x&min_y&max_x&max_y` | missing bounds are unbounded | 200 SMAP body, `X-Map-Version` |
//! | `GET /v1/status` | | 200 `{"version", "tile_count", "merged_sessions", "updated_at_ms"}` |

use crate::{MapServer, ServerError, SessionUpload};
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use semmap::codec::Region;
use serde::Deserialize;
use serde_json::json;
use std::future::Future;
use std::sync::Arc;
use std::time::Duration;
use tokio::net::TcpListener;

pub const VEHICLE_HEADER: &str = "x-vehicle-id";
pub const SESSION_HEADER: &str = "x-session-id";
pub const VERSION_HEADER: &str = "x-map-version";

/// Largest accepted upload body.
pub const MAX_UPLOAD_BYTES: usize = 1 << 30;

fn error_response(e: ServerError) -> Response {
    match e {
        ServerError::BadPayload(p) => {
            (StatusCode::BAD_REQUEST, Json(json!({ "error": p.to_string(), "offset": p.offset() }))).into_response()
        }
        ServerError::BadRequest(m) => (StatusCode::BAD_REQUEST, Json(json!({ "error": m, "offset": null }))).into_response(),
        other => {
            log::error!("{other}");
            (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({ "error": other.to_string() }))).into_response()
        }
    }
}

fn header_str(h: &HeaderMap, name: &str) -> Result<String, ServerError> {
    let v = h.get(name).ok_or_else(|| ServerError::BadRequest(format!("missing {name} header")))?;
    v.to_str()
        .map(str::to_owned)
        .map_err(|_| ServerError::BadRequest(format!("{name} header is not visible ASCII")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ServerError> + Send + 'static) -> Result<T, ServerError> {
    tokio::task::spawn_blocking(f)
        .await
        .unwrap_or_else(|e| Err(ServerError::Store(format!("worker panicked: {e}"))))
}

async fn upload(State(srv): State<Arc<MapServer>>, headers: HeaderMap, body: Bytes) -> Response {
    let up = match (header_str(&headers, VEHICLE_HEADER), header_str(&headers, SESSION_HEADER)) {
        (Ok(vehicle_id), Ok(session_id)) => SessionUpload {
            vehicle_id,
            session_id,
            payload: body.to_vec(),
        },
        (Err(e), _) | (_, Err(e)) => return error_response(e),
    };
    match blocking(move || srv.handle_upload(&up)).await {
        Ok(ack) => Json(ack).into_response(),
        Err(e) => error_response(e),
    }
}

#[derive(Debug, Deserialize)]
struct Bbox {
    min_x: Option<f64>,
    min_y: Option<f64>,
    max_x: Option<f64>,
    max_y: Option<f64>,
}

async fn map(State(srv): State<Arc<MapServer>>, Query(q): Query<Bbox>) -> Response {
    let region = Region::new(
        q.min_x.unwrap_or(f64::NEG_INFINITY),
        q.min_y.unwrap_or(f64::NEG_INFINITY),
        q.max_x.unwrap_or(f64::INFINITY),
        q.max_y.unwrap_or(f64::INFINITY),
    );
    match blocking(move || srv.handle_fetch_map(&region)).await {
        Ok((bytes, version)) => (
            [
                (header::CONTENT_TYPE, "application/octet-stream".to_string()),
                (header::HeaderName::from_static(VERSION_HEADER), version.to_string()),
            ],
            bytes,
        )
            .into_response(),
        Err(e) => error_response(e),
    }
}

async fn status(State(srv): State<Arc<MapServer>>) -> Response {
    Json(srv.status()).into_response()
}

pub fn router(server: Arc<MapServer>) -> Router {
    Router::new()
        .route("/v1/upload", post(upload))
        .route("/v1/map", get(map))
        .route("/v1/status", get(status))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(server)
}

/// Serve until `shutdown` resolves, compacting dirty tiles every
/// `compact_interval`, then write a final checkpoint.
pub async fn serve(
    server: Arc<MapServer>,
    listener: TcpListener,
    compact_interval: Option<Duration>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServerError> {
    let compactor = compact_interval.map(|every| {
        let srv = server.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(every);
            tick.tick().await;
            loop {
                tick.tick().await;
                let srv = srv.clone();
                match blocking(move || srv.compact_dirty()).await {
                    Ok(s) if s.tiles > 0 => log::debug!("compacted {} tiles, {} bytes", s.tiles, s.bytes),
                    Ok(_) => {}
                    Err(e) => log::warn!("compaction failed: {e}"),
                }
            }
        })
    });
    axum::serve(listener, router(server.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    if let Some(c) = compactor {
        c.abort();
    }
    let srv = server.clone();
    blocking(move || srv.checkpoint()).await
}
