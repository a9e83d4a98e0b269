use axum::body::Bytes;
use axum::extract::{Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use raven_core::audit::{verify_segment, AuditError};
use raven_core::engine::{EngineError, IngestMeta, OperatorAction};
use raven_core::personas::PersonaError;
use raven_core::worldstate::{ParseMode, Patch};
use serde::Deserialize;
use serde_json::{json, Value as Json_};

use crate::stream;
use crate::AppState;

/// JSON error body: `{"error": {"code": ..., "message": ...}}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> ApiError {
        ApiError { status, code, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> ApiError {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "code": self.code, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> ApiError {
        let message = e.to_string();
        let (status, code) = match &e {
            EngineError::State(_) => (StatusCode::BAD_REQUEST, "invalid_state"),
            EngineError::OutOfOrder { .. } => (StatusCode::CONFLICT, "out_of_order"),
            EngineError::InvalidParameters(_) => (StatusCode::BAD_REQUEST, "invalid_parameters"),
            EngineError::UnknownAdvisory(_) => (StatusCode::NOT_FOUND, "unknown_advisory"),
            EngineError::Persona(PersonaError::UnknownPersona(_)) => (StatusCode::NOT_FOUND, "unknown_persona"),
            EngineError::Audit(AuditError::RangeOutOfBounds { .. }) => {
                (StatusCode::RANGE_NOT_SATISFIABLE, "range_out_of_bounds")
            }
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, code, message)
    }
}

type ApiResult = Result<Response, ApiError>;

pub fn router(state: AppState) -> Router {
    let v1 = Router::new()
        .route("/state", get(get_state).patch(patch_state))
        .route("/stream", get(stream::subscribe))
        .route("/actions", post(post_action))
        .route("/personas", get(get_personas))
        .route("/advisories", get(get_advisories))
        .route("/log", get(get_log))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/healthz", get(healthz))
        .nest("/v1", v1)
        .with_state(state)
}

async fn require_token(State(app): State<AppState>, request: Request, next: Next) -> Response {
    let Some(expected) = app.token.as_deref() else {
        return next.run(request).await;
    };
    let bearer = request
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    let query = request.uri().query().and_then(|q| {
        q.split('&').find_map(|pair| pair.strip_prefix("access_token=")).map(str::to_string)
    });
    if bearer == Some(expected) || query.as_deref() == Some(expected) {
        next.run(request).await
    } else {
        ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid bearer token").into_response()
    }
}

async fn healthz(State(app): State<AppState>) -> Json<Json_> {
    Json(json!({ "status": "ok", "snapshotId": app.engine.state().snapshot_id() }))
}

async fn get_state(State(app): State<AppState>) -> Json<Json_> {
    Json(app.engine.state().to_json())
}

fn header_str<'a>(headers: &'a HeaderMap, name: &str) -> Result<Option<&'a str>, ApiError> {
    headers
        .get(name)
        .map(|v| v.to_str().map_err(|_| ApiError::bad_request(format!("{name} is not valid text"))))
        .transpose()
}

fn ingest_meta(headers: &HeaderMap) -> Result<IngestMeta, ApiError> {
    let source = match (header_str(headers, "x-source-id")?, header_str(headers, "x-source-sequence")?) {
        (Some(id), Some(seq)) => {
            let seq = seq
                .parse()
                .map_err(|_| ApiError::bad_request(format!("X-Source-Sequence `{seq}` is not an unsigned integer")))?;
            Some((id.to_string(), seq))
        }
        (None, None) => None,
        _ => return Err(ApiError::bad_request("X-Source-Id and X-Source-Sequence must be sent together")),
    };
    let idempotency_key = header_str(headers, "idempotency-key")?.map(str::to_string);
    Ok(IngestMeta { source, idempotency_key })
}

fn parse_body(body: &Bytes) -> Result<Json_, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("body is not JSON: {e}")))
}

async fn patch_state(State(app): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let meta = ingest_meta(&headers)?;
    let patch = Patch::from_json(&parse_body(&body)?, ParseMode::Strict).map_err(EngineError::from)?;
    let engine = app.engine.clone();
    let ack = tokio::task::spawn_blocking(move || engine.ingest(patch, meta, Utc::now()))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    if ack.queued {
        app.schedule_processing();
    }
    Ok((StatusCode::ACCEPTED, Json(ack)).into_response())
}

async fn post_action(State(app): State<AppState>, body: Bytes) -> ApiResult {
    let action = OperatorAction::from_json(parse_body(&body)?)?;
    let engine = app.engine.clone();
    let ack = tokio::task::spawn_blocking(move || engine.submit_action(action, Utc::now()))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    if ack.queued {
        app.schedule_processing();
    }
    Ok((StatusCode::ACCEPTED, Json(ack)).into_response())
}

async fn get_personas(State(app): State<AppState>) -> Json<Json_> {
    let personas: Vec<_> = app.engine.registry().iter().collect();
    Json(json!({
        "personas": personas,
        "lastSelection": app.engine.last_selection(),
    }))
}

#[derive(Debug, Deserialize)]
struct AdvisoryQuery {
    persona: Option<String>,
}

async fn get_advisories(State(app): State<AppState>, Query(q): Query<AdvisoryQuery>) -> ApiResult {
    if let Some(persona) = &q.persona {
        app.engine.registry().persona_for(persona).map_err(EngineError::from)?;
    }
    let advisories = app.engine.advisories(q.persona.as_deref());
    Ok(Json(json!({ "advisories": advisories })).into_response())
}

#[derive(Debug, Deserialize)]
struct LogQuery {
    from: Option<u64>,
    to: Option<u64>,
}

async fn get_log(State(app): State<AppState>, Query(q): Query<LogQuery>) -> ApiResult {
    let len = app.engine.log_len();
    let from = q.from.unwrap_or(0);
    let to = q.to.unwrap_or(len);
    let records = app.engine.log_range(from, to)?;
    let verified = verify_segment(&records).is_ok() && app.engine.verify_log().is_ok();
    Ok(Json(json!({
        "from": from,
        "to": to,
        "total": len,
        "count": records.len(),
        "verified": verified,
        "records": records,
    }))
    .into_response())
}
