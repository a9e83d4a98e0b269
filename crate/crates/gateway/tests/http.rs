use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use chrono::{TimeZone, Utc};
use http_body_util::BodyExt;
use raven_core::engine::Mode;
use raven_gateway::{build, router, AppState, GatewayConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

fn start(config: GatewayConfig) -> (AppState, Router) {
    let now = Utc.with_ymd_and_hms(2026, 10, 16, 18, 0, 0).unwrap();
    let state = build(&config, now).unwrap();
    let app = router(state.clone());
    (state, app)
}

fn request(method: &str, uri: &str, body: Option<Value>) -> Request<Body> {
    let builder = Request::builder().method(method).uri(uri);
    match body {
        Some(json) => builder.header(header::CONTENT_TYPE, "application/json").body(Body::from(json.to_string())),
        None => builder.body(Body::empty()),
    }
    .unwrap()
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let response = app.clone().oneshot(req).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    let body = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, body)
}

/// Polls until `n` advisories are stored.
async fn advisories(app: &Router, n: usize) -> Vec<Value> {
    for _ in 0..200 {
        let (_, body) = send(app, request("GET", "/v1/advisories", None)).await;
        let list = body["advisories"].as_array().unwrap().clone();
        if list.len() >= n {
            return list;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("fewer than {n} advisories arrived");
}

/// Reads SSE frames until `pred` holds for the accumulated text.
async fn read_sse(body: Body, pred: impl Fn(&str) -> bool) -> String {
    let mut body = body;
    let mut text = String::new();
    let deadline = tokio::time::Instant::now() + Duration::from_secs(5);
    while !pred(&text) {
        let frame = tokio::time::timeout_at(deadline, body.frame()).await.expect("stream timed out");
        match frame {
            Some(Ok(f)) => {
                if let Ok(data) = f.into_data() {
                    text.push_str(&String::from_utf8_lossy(&data));
                }
            }
            _ => break,
        }
    }
    text
}

fn events(text: &str) -> Vec<(String, String, Value)> {
    text.split("\n\n")
        .filter_map(|block| {
            let mut id = String::new();
            let mut kind = String::new();
            let mut data = None;
            for line in block.lines() {
                if let Some(v) = line.strip_prefix("id: ") {
                    id = v.to_string();
                } else if let Some(v) = line.strip_prefix("event: ") {
                    kind = v.to_string();
                } else if let Some(v) = line.strip_prefix("data: ") {
                    data = serde_json::from_str(v).ok();
                }
            }
            data.map(|d| (id, kind, d))
        })
        .collect()
}

#[tokio::test]
async fn token_guards_v1_but_not_health() {
    let (_, app) = start(GatewayConfig { token: Some("s3cret".into()), ..Default::default() });
    let (status, body) = send(&app, request("GET", "/healthz", None)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");

    let (status, body) = send(&app, request("GET", "/v1/state", None)).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    assert_eq!(body["error"]["code"], "unauthorized");

    let mut req = request("GET", "/v1/state", None);
    req.headers_mut().insert(header::AUTHORIZATION, "Bearer s3cret".parse().unwrap());
    let (status, body) = send(&app, req).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["environment"]["weather"]["windSpeedMph"], 5);

    let (status, _) = send(&app, request("GET", "/v1/personas?access_token=s3cret", None)).await;
    assert_eq!(status, StatusCode::OK);
    let (status, _) = send(&app, request("GET", "/v1/personas?access_token=wrong", None)).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
}

#[tokio::test]
async fn wind_patch_produces_a_safety_advisory() {
    let (_, app) = start(GatewayConfig::default());
    let patch = json!({ "environment.weather.windSpeedMph": 22 });
    let (status, ack) = send(&app, request("PATCH", "/v1/state", Some(patch))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(ack["queued"], true);
    assert_eq!(ack["duplicate"], false);
    assert_eq!(ack["events"][0]["ruleId"], "wind_high");

    let list = advisories(&app, 1).await;
    assert_eq!(list.len(), 1);
    let advisory = &list[0];
    assert_eq!(advisory["personaId"], "safety_controller");
    assert_eq!(advisory["origin"], "event");
    assert_eq!(advisory["scopeReport"]["leakage"], false);
    assert!(advisory["recommendations"][0]["citedPaths"]
        .as_array()
        .unwrap()
        .contains(&json!("environment.weather.windSpeedMph")));

    let (_, body) = send(&app, request("GET", "/v1/advisories?persona=ethical_governor", None)).await;
    assert_eq!(body["advisories"], json!([]));
    let (status, body) = send(&app, request("GET", "/v1/advisories?persona=pilot", None)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["code"], "unknown_persona");

    let (_, personas) = send(&app, request("GET", "/v1/personas", None)).await;
    assert_eq!(personas["personas"].as_array().unwrap().len(), 3);
    assert_eq!(personas["lastSelection"]["selectedAdvocates"], json!(["safety_controller"]));
    assert!(personas["lastSelection"]["rationale"]["ethical_governor"].is_string());
}

#[tokio::test]
async fn bad_patches_are_rejected() {
    let (state, app) = start(GatewayConfig::default());
    let before = state.engine.state().snapshot_id();

    let (status, body) = send(&app, request("PATCH", "/v1/state", Some(json!({ "environment.weather.tornado": 1 })))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["code"], "invalid_state");

    let (status, _) = send(&app, request("PATCH", "/v1/state", Some(json!({ "system.platform.status.powerLevel": 140 })))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let raw = Request::builder().method("PATCH").uri("/v1/state").body(Body::from("{not json")).unwrap();
    let (status, body) = send(&app, raw).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["code"], "bad_request");

    let mut half = request("PATCH", "/v1/state", Some(json!({})));
    half.headers_mut().insert("x-source-id", "uas-1".parse().unwrap());
    assert_eq!(send(&app, half).await.0, StatusCode::BAD_REQUEST);

    assert_eq!(state.engine.state().snapshot_id(), before);
}

#[tokio::test]
async fn source_order_and_idempotency() {
    let (_, app) = start(GatewayConfig::default());
    let with = |seq: u64, key: &str, alt: u64| {
        let mut req = request("PATCH", "/v1/state", Some(json!({ "system.platform.telemetry.altitudeFt": alt })));
        let h = req.headers_mut();
        h.insert("x-source-id", "uas-1".parse().unwrap());
        h.insert("x-source-sequence", seq.to_string().parse().unwrap());
        h.insert("idempotency-key", key.parse().unwrap());
        req
    };
    let (status, first) = send(&app, with(5, "k5", 210)).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let (status, again) = send(&app, with(5, "k5", 210)).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(again["duplicate"], true);
    assert_eq!(again["snapshotId"], first["snapshotId"]);

    let (status, body) = send(&app, with(4, "k4", 220)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"]["code"], "out_of_order");

    let (_, state) = send(&app, request("GET", "/v1/state", None)).await;
    assert_eq!(state["system"]["platform"]["telemetry"]["altitudeFt"], 210);
}

#[tokio::test]
async fn actions_and_their_errors() {
    let (_, app) = start(GatewayConfig::default());
    let post = |body: Value| request("POST", "/v1/actions", Some(body));

    let (status, ack) = send(&app, post(json!({ "kind": "pause_mission" }))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(ack["kind"], "pause_mission");
    let (_, state) = send(&app, request("GET", "/v1/state", None)).await;
    assert_eq!(state["system"]["platform"]["telemetry"]["groundSpeedMph"], 0);

    let (status, body) = send(&app, post(json!({ "kind": "adjust_altitude", "parameters": { "targetAltitudeFt": -5 } }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["code"], "invalid_parameters");

    let (status, _) = send(&app, post(json!({ "kind": "launch_fireworks" }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, body) =
        send(&app, post(json!({ "kind": "acknowledge_advisory", "parameters": { "advisoryId": "adv-000099-x" } }))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["code"], "unknown_advisory");

    let (status, body) = send(&app, post(json!({ "kind": "request_advice", "parameters": { "personaId": "pilot" } }))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["code"], "unknown_persona");

    let (status, ack) =
        send(&app, post(json!({ "kind": "request_advice", "parameters": { "personaId": "regulatory_auditor" } }))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(ack["queued"], true);
    let list = advisories(&app, 1).await;
    assert_eq!(list[0]["personaId"], "regulatory_auditor");
    assert_eq!(list[0]["origin"], "request");

    let id = list[0]["advisoryId"].clone();
    let (status, _) = send(&app, post(json!({ "kind": "acknowledge_advisory", "parameters": { "advisoryId": id } }))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let (_, body) = send(&app, request("GET", "/v1/advisories", None)).await;
    assert_eq!(body["advisories"][0]["acknowledged"], true);
}

#[tokio::test]
async fn log_ranges_verify() {
    let (_, app) = start(GatewayConfig::default());
    send(&app, request("PATCH", "/v1/state", Some(json!({ "environment.weather.windSpeedMph": 22 })))).await;
    advisories(&app, 1).await;

    let (status, all) = send(&app, request("GET", "/v1/log", None)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(all["verified"], true);
    let total = all["total"].as_u64().unwrap();
    assert_eq!(all["count"].as_u64().unwrap(), total);
    let kinds: Vec<&str> = all["records"].as_array().unwrap().iter().map(|r| r["recordKind"].as_str().unwrap()).collect();
    for kind in ["state_update", "event", "prompt", "backend_reply", "selection", "advisory", "briefing", "scope_report"] {
        assert!(kinds.contains(&kind), "missing {kind} in {kinds:?}");
    }

    let (status, part) = send(&app, request("GET", "/v1/log?from=1&to=3", None)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(part["count"], 2);
    assert_eq!(part["records"][0]["sequence"], 1);
    assert_eq!(part["records"][1]["prevHash"], part["records"][0]["hash"]);

    let (status, body) = send(&app, request("GET", &format!("/v1/log?from=0&to={}", total + 5), None)).await;
    assert_eq!(status, StatusCode::RANGE_NOT_SATISFIABLE);
    assert_eq!(body["error"]["code"], "range_out_of_bounds");
}

#[tokio::test]
async fn stream_delivers_live_records() {
    let (_, app) = start(GatewayConfig::default());
    let response = app.clone().oneshot(request("GET", "/v1/stream", None)).await.unwrap();
    assert_eq!(response.status(), StatusCode::OK);
    assert_eq!(response.headers()[header::CONTENT_TYPE], "text/event-stream");

    send(&app, request("PATCH", "/v1/state", Some(json!({ "environment.weather.windSpeedMph": 22 })))).await;
    let text = read_sse(response.into_body(), |t| t.contains("event: advisory")).await;
    let frames = events(&text);
    let kinds: Vec<&str> = frames.iter().map(|(_, k, _)| k.as_str()).collect();
    assert_eq!(kinds, ["briefing", "advisory"]);
    let (id, _, payload) = &frames[1];
    assert!(id.parse::<u64>().is_ok());
    assert_eq!(payload["personaId"], "safety_controller");
    assert_eq!(payload["origin"], "event");
    assert_eq!(payload["batchSeverity"], "warning");
}

#[tokio::test]
async fn stream_replays_after_last_event_id_with_mode_filter() {
    let (_, app) = start(GatewayConfig::default());
    send(&app, request("PATCH", "/v1/state", Some(json!({ "environment.weather.windSpeedMph": 22 })))).await;
    advisories(&app, 1).await;
    send(&app, request("PATCH", "/v1/state", Some(json!({ "system.platform.status.powerLevel": 15 })))).await;
    advisories(&app, 2).await;
    send(
        &app,
        request("POST", "/v1/actions", Some(json!({ "kind": "request_advice", "parameters": { "personaId": "ethical_governor" } }))),
    )
    .await;
    advisories(&app, 3).await;

    let replay = |uri: &str, last: &str| {
        let mut req = request("GET", uri, None);
        req.headers_mut().insert("last-event-id", last.parse().unwrap());
        req
    };
    let advisory_personas = |text: &str| -> Vec<String> {
        events(text)
            .into_iter()
            .filter(|(_, k, _)| k == "advisory")
            .map(|(_, _, d)| d["personaId"].as_str().unwrap().to_string())
            .collect()
    };
    let done = |n: usize| move |t: &str| t.matches("event: advisory").count() >= n;

    let push = app.clone().oneshot(replay("/v1/stream", "0")).await.unwrap();
    let text = read_sse(push.into_body(), done(3)).await;
    assert_eq!(advisory_personas(&text), ["safety_controller", "safety_controller", "ethical_governor"]);
    let ids: Vec<u64> = events(&text).iter().map(|(id, _, _)| id.parse().unwrap()).collect();
    assert!(ids.windows(2).all(|w| w[0] < w[1]));

    let hybrid = app.clone().oneshot(replay("/v1/stream?mode=hybrid", "0")).await.unwrap();
    let text = read_sse(hybrid.into_body(), done(2)).await;
    assert_eq!(advisory_personas(&text), ["safety_controller", "ethical_governor"]);

    let pull = app.clone().oneshot(replay("/v1/stream?mode=pull", "0")).await.unwrap();
    let text = read_sse(pull.into_body(), done(1)).await;
    assert_eq!(advisory_personas(&text), ["ethical_governor"]);

    let (status, _) = send(&app, request("GET", "/v1/stream?mode=sometimes", None)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn lagging_subscriber_gets_a_resume_point() {
    let (_, app) = start(GatewayConfig { stream_buffer: 1, mode: Mode::Push, ..Default::default() });
    let response = app.clone().oneshot(request("GET", "/v1/stream", None)).await.unwrap();
    send(&app, request("PATCH", "/v1/state", Some(json!({ "environment.weather.windSpeedMph": 22 })))).await;
    advisories(&app, 1).await;
    let text = read_sse(response.into_body(), |t| t.contains("event: error")).await;
    let (_, _, data) = events(&text).into_iter().find(|(_, k, _)| k == "error").unwrap();
    assert_eq!(data["code"], "lagged");
    assert!(data["resumeFrom"].is_u64(), "{data}");
}

#[test]
fn stream_mode_filter() {
    use raven_core::audit::{AuditLog, RecordKind};
    use raven_gateway::delivers;
    let mut log = AuditLog::in_memory();
    let at = Utc::now();
    let mut add = |kind, payload: Value| log.append(kind, at, payload).unwrap().clone();
    let warn = add(RecordKind::Advisory, json!({ "origin": "event", "batchSeverity": "warning" }));
    let crit = add(RecordKind::Conflict, json!({ "origin": "event", "batchSeverity": "critical" }));
    let asked = add(RecordKind::Briefing, json!({ "origin": "request", "batchSeverity": "info" }));
    let trace = add(RecordKind::Prompt, json!({ "origin": "request" }));
    let table = [
        (Mode::Push, [true, true, true, false]),
        (Mode::Hybrid, [false, true, true, false]),
        (Mode::Pull, [false, false, true, false]),
    ];
    for (mode, expected) in table {
        let got = [&warn, &crit, &asked, &trace].map(|r| delivers(mode, r));
        assert_eq!(got, expected, "{mode}");
    }
}

#[tokio::test]
async fn low_battery_near_property_streams_a_briefing_and_three_advisories() {
    let (_, app) = start(GatewayConfig::default());
    let approach = json!({
        "regulatory.restrictedAreas.nearestType": "private_property",
        "regulatory.restrictedAreas.distanceMeters": 500,
        "regulatory.restrictedAreas.notificationRequired": true,
        "system.platform.status.powerLevel": 40,
        "system.platform.status.estimatedEndurance": "00:15:00",
    });
    let (_, ack) = send(&app, request("PATCH", "/v1/state", Some(approach))).await;
    assert_eq!(ack["events"], json!([]));
    let response = app.clone().oneshot(request("GET", "/v1/stream", None)).await.unwrap();
    let patch = json!({
        "system.platform.status.powerLevel": 15,
        "system.platform.status.estimatedEndurance": "00:05:00",
        "regulatory.restrictedAreas.distanceMeters": 10,
    });
    let (status, ack) = send(&app, request("PATCH", "/v1/state", Some(patch))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(ack["events"][0]["severity"], "critical");

    let text = read_sse(response.into_body(), |t| t.matches("event: advisory").count() >= 3).await;
    let frames = events(&text);
    let briefings = frames.iter().filter(|(_, k, _)| k == "briefing").count();
    let personas: Vec<&str> =
        frames.iter().filter(|(_, k, _)| k == "advisory").map(|(_, _, d)| d["personaId"].as_str().unwrap()).collect();
    assert_eq!(briefings, 1);
    assert_eq!(personas, ["safety_controller", "ethical_governor", "regulatory_auditor"]);
    assert!(frames.iter().all(|(_, _, d)| d["batchSeverity"] == "critical"));
}

#[tokio::test]
async fn quiet_updates_and_speed_changes_stay_off_the_stream() {
    let (_, app) = start(GatewayConfig::default());
    let response = app.clone().oneshot(request("GET", "/v1/stream", None)).await.unwrap();

    let (status, ack) = send(&app, request("PATCH", "/v1/state", Some(json!({ "environment.weather.windSpeedMph": 7 })))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(ack["events"], json!([]));
    assert_eq!(ack["queued"], false);

    let action = json!({ "kind": "reduce_speed", "parameters": { "targetMph": 15 } });
    let (status, _) = send(&app, request("POST", "/v1/actions", Some(action))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let (_, state) = send(&app, request("GET", "/v1/state", None)).await;
    assert_eq!(state["system"]["platform"]["telemetry"]["groundSpeedMph"], 15);

    let mut body = response.into_body();
    let frame = tokio::time::timeout(Duration::from_millis(300), body.frame()).await;
    assert!(frame.is_err(), "nothing should be delivered");
}
