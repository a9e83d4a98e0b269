use std::convert::Infallible;
use std::time::Duration;

use axum::extract::{Query, State};
use axum::http::HeaderMap;
use axum::response::sse::{Event, KeepAlive, Sse};
use futures::stream::{self, Stream, StreamExt};
use raven_core::audit::AuditRecord;
use raven_core::engine::Mode;
use serde::Deserialize;
use serde_json::json;
use tokio::sync::broadcast::{error::RecvError, Receiver};

use crate::api::ApiError;
use crate::{delivers, AppState};

#[derive(Debug, Deserialize)]
pub(crate) struct StreamQuery {
    mode: Option<String>,
    #[serde(rename = "lastEventId")]
    last_event_id: Option<u64>,
}

/// Turns a stored record into an SSE frame whose id is the audit sequence.
pub fn frame(record: &AuditRecord) -> Event {
    Event::default()
        .id(record.sequence.to_string())
        .event(record.record_kind.as_str())
        .data(record.payload.to_string())
}

struct Live {
    rx: Receiver<AuditRecord>,
    mode: Mode,
    /// Highest sequence already sent or replayed.
    high: Option<u64>,
    /// Last sequence in the log when the subscriber connected.
    origin: Option<u64>,
    done: bool,
}

async fn next_live(mut live: Live) -> Option<(Result<Event, Infallible>, Live)> {
    if live.done {
        return None;
    }
    loop {
        match live.rx.recv().await {
            Ok(record) => {
                if live.high.is_some_and(|h| record.sequence <= h) || !delivers(live.mode, &record) {
                    continue;
                }
                live.high = Some(record.sequence);
                return Some((Ok(frame(&record)), live));
            }
            Err(RecvError::Lagged(missed)) => {
                live.done = true;
                let data = json!({
                    "code": "lagged",
                    "message": format!("subscriber fell {missed} records behind; reconnect with Last-Event-ID"),
                    "resumeFrom": live.high.or(live.origin),
                });
                return Some((Ok(Event::default().event("error").data(data.to_string())), live));
            }
            Err(RecvError::Closed) => return None,
        }
    }
}

pub(crate) async fn subscribe(
    State(app): State<AppState>,
    headers: HeaderMap,
    Query(q): Query<StreamQuery>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let mode = match q.mode.as_deref() {
        Some(raw) => raw.parse().map_err(|e: String| ApiError::new(axum::http::StatusCode::BAD_REQUEST, "bad_request", e))?,
        None => app.engine.mode(),
    };
    let header_id = headers.get("last-event-id").and_then(|v| v.to_str().ok()).and_then(|v| v.trim().parse().ok());
    let resume = header_id.or(q.last_event_id);

    let origin = app.engine.log_len().checked_sub(1);
    let rx = app.records.subscribe();
    let mut high = resume;
    let replay: Vec<AuditRecord> = match resume {
        Some(after) => {
            let all = app.engine.log_since(Some(after));
            if let Some(last) = all.last() {
                high = Some(last.sequence);
            }
            all.into_iter().filter(|r| delivers(mode, r)).collect()
        }
        None => Vec::new(),
    };

    let replayed = stream::iter(replay.into_iter().map(|r| Ok(frame(&r))));
    let live = stream::unfold(Live { rx, mode, high, origin, done: false }, next_live);
    Ok(Sse::new(replayed.chain(live)).keep_alive(KeepAlive::new().interval(Duration::from_secs(15))))
}
