//! Admin HTTP endpoint: journal queries, call table, relay metrics.
//!
//! Every route except `/api/health` needs `Authorization: Bearer <token>`,
//! where the token is the configured admin token or a live session token of
//! an admin user.

use std::sync::Arc;

use axum::extract::{Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use peervoip_core::chat::JournalFilter;
use peervoip_core::protocol::{ErrorBody, ErrorCode};
use peervoip_core::UtcMillis;
use serde::{Deserialize, Serialize};

use crate::hub::Hub;

pub fn router(hub: Arc<Hub>) -> Router {
    Router::new()
        .route("/api/health", get(|| async { Json(serde_json::json!({ "ok": true })) }))
        .route("/api/journal", get(journal))
        .route("/api/calls", get(calls))
        .route("/api/metrics", get(metrics))
        .route("/api/route", get(route))
        .layer(middleware::from_fn(cors))
        .with_state(hub)
}

/// The web console is served from the daemon's port, so admin calls are
/// cross-origin.
async fn cors(req: Request, next: Next) -> Response {
    let mut resp = if req.method() == Method::OPTIONS {
        StatusCode::NO_CONTENT.into_response()
    } else {
        next.run(req).await
    };
    let h = resp.headers_mut();
    h.insert(header::ACCESS_CONTROL_ALLOW_ORIGIN, HeaderValue::from_static("*"));
    h.insert(
        header::ACCESS_CONTROL_ALLOW_HEADERS,
        HeaderValue::from_static("authorization, content-type"),
    );
    h.insert(header::ACCESS_CONTROL_ALLOW_METHODS, HeaderValue::from_static("GET, OPTIONS"));
    resp
}

fn error(status: StatusCode, code: ErrorCode) -> Response {
    (status, Json(ErrorBody::new(0, code))).into_response()
}

fn authorized(hub: &Hub, headers: &HeaderMap) -> bool {
    let token = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim);
    token.is_some_and(|t| hub.is_admin(t))
}

#[derive(Debug, Default, Deserialize)]
pub struct JournalQuery {
    pub user: Option<String>,
    /// ISO-8601 or milliseconds since the epoch.
    pub since: Option<String>,
    pub until: Option<String>,
    pub q: Option<String>,
    pub offset: Option<usize>,
    pub limit: Option<usize>,
}

fn parse_time(s: &str) -> Option<UtcMillis> {
    s.parse::<u64>().ok().map(UtcMillis).or_else(|| UtcMillis::parse_iso8601(s))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JournalRow {
    pub seq: u64,
    pub received_at: String,
    pub received_at_ms: u64,
    pub from: String,
    pub to: String,
    pub body: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JournalPage {
    pub total: usize,
    pub offset: usize,
    pub entries: Vec<JournalRow>,
}

async fn journal(State(hub): State<Arc<Hub>>, headers: HeaderMap, Query(q): Query<JournalQuery>) -> Response {
    if !authorized(&hub, &headers) {
        return error(StatusCode::UNAUTHORIZED, ErrorCode::Unauthorized);
    }
    let mut filter = JournalFilter {
        user: q.user.filter(|u| !u.is_empty()),
        substring: q.q.filter(|s| !s.is_empty()),
        ..JournalFilter::default()
    };
    for (raw, slot) in [(&q.since, &mut filter.since), (&q.until, &mut filter.until)] {
        if let Some(raw) = raw.as_deref().filter(|s| !s.is_empty()) {
            match parse_time(raw) {
                Some(t) => *slot = Some(t),
                None => return error(StatusCode::BAD_REQUEST, ErrorCode::Malformed),
            }
        }
    }
    let hub2 = hub.clone();
    let entries = match tokio::task::spawn_blocking(move || hub2.query_journal(&filter)).await {
        Ok(Ok(e)) => e,
        _ => return error(StatusCode::INTERNAL_SERVER_ERROR, ErrorCode::Internal),
    };
    let total = entries.len();
    let offset = q.offset.unwrap_or(0).min(total);
    let limit = q.limit.unwrap_or(usize::MAX);
    let entries = entries
        .into_iter()
        .skip(offset)
        .take(limit)
        .map(|e| JournalRow {
            seq: e.seq,
            received_at: e.received_at.to_iso8601(),
            received_at_ms: e.received_at.0,
            from: e.from,
            to: e.to,
            body: e.body,
        })
        .collect();
    Json(JournalPage { total, offset, entries }).into_response()
}

async fn calls(State(hub): State<Arc<Hub>>, headers: HeaderMap) -> Response {
    if !authorized(&hub, &headers) {
        return error(StatusCode::UNAUTHORIZED, ErrorCode::Unauthorized);
    }
    Json(hub.call_sessions()).into_response()
}

async fn metrics(State(hub): State<Arc<Hub>>, headers: HeaderMap) -> Response {
    if !authorized(&hub, &headers) {
        return error(StatusCode::UNAUTHORIZED, ErrorCode::Unauthorized);
    }
    Json(hub.metrics_snapshot()).into_response()
}

#[derive(Debug, Deserialize)]
struct RouteQuery {
    from: String,
    to: String,
}

async fn route(State(hub): State<Arc<Hub>>, headers: HeaderMap, Query(q): Query<RouteQuery>) -> Response {
    if !authorized(&hub, &headers) {
        return error(StatusCode::UNAUTHORIZED, ErrorCode::Unauthorized);
    }
    let r = hub.graph().route_between_users(&q.from, &q.to);
    match r {
        Ok(route) => Json(route).into_response(),
        Err(_) => error(StatusCode::NOT_FOUND, ErrorCode::Unreachable),
    }
}
