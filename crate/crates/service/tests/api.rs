use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use simrec_core::backend::{tags, ScriptRule, ScriptedBackend};
use simrec_core::prompt::PromptSet;
use simrec_core::{Agents, RunConfig};
use simrec_service::{router, AppState, ServiceConfig};

fn rules() -> Vec<ScriptRule> {
    let mut rules = vec![
        ScriptRule::reply("Likes gritty war films.").for_tag(tags::SUMMARIZER),
        ScriptRule::reply("0").for_tag(tags::INTERNAL_VOTE).containing("Candidate A"),
        ScriptRule::reply("1").for_tag(tags::INTERNAL_VOTE).containing("Candidate B"),
        ScriptRule::reply("2").for_tag(tags::INTERNAL_VOTE).containing("Candidate C"),
    ];
    for i in 0..12 {
        rules.push(ScriptRule::reply(format!("reply {i}!")).for_tag(tags::RECOMMENDER).on_last(format!("msg {i}!")));
    }
    rules.push(
        ScriptRule::variants(["Candidate A: Heat", "Candidate B: Ronin", "Candidate C: Sicario"])
            .for_tag(tags::RECOMMENDER)
            .on_last("search"),
    );
    rules.push(ScriptRule::reply("Plain: try Black Hawk Down.").for_tag(tags::RECOMMENDER));
    rules
}

fn service(ttl: Duration, log: Option<std::path::PathBuf>) -> (AppState, Router) {
    let backend = Arc::new(ScriptedBackend::new(rules()).unwrap());
    let base = RunConfig { vote_count: 1, ses_inner_widths: vec![], ..RunConfig::default() };
    let mut cfg = ServiceConfig::new(base, PromptSet::default(), Agents::single(backend));
    cfg.ttl = ttl;
    cfg.event_log = log;
    let state = AppState::new(cfg).unwrap();
    (state.clone(), router(state))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
    (status, value)
}

async fn create(app: &Router) -> String {
    let (status, body) = call(app, "POST", "/sessions", Some(json!({}))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    body["id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn create_validates_and_ids_are_distinct() {
    let (_, app) = service(Duration::from_secs(60), None);
    let a = create(&app).await;
    let b = create(&app).await;
    assert_ne!(a, b);
    assert_eq!(a.len(), 32);

    let (status, body) = call(&app, "POST", "/sessions", Some(json!({"k": -1}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["retryable"], false);
    let (status, _) = call(&app, "POST", "/sessions", Some(json!({"k": 0}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, body) = call(&app, "POST", "/sessions", Some(json!({"vote_count": 3}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["config"]["vote_count"], 3);
    let (status, _) = call(&app, "POST", "/sessions", None).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn plain_and_search_replies() {
    let (_, app) = service(Duration::from_secs(60), None);
    let id = create(&app).await;

    let (status, _) = call(&app, "GET", &format!("/sessions/{id}/trace"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, body) =
        call(&app, "POST", &format!("/sessions/{id}/messages"), Some(json!({"text": "hi, want a war film"}))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["reply"], "Plain: try Black Hawk Down.");
    assert_eq!(body["candidates"], 1);
    assert!(body.get("trace").is_none());

    let (status, body) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/messages"),
        Some(json!({"text": "search for something else", "ses": true, "trace": true})),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["reply"], "Candidate C: Sicario");
    assert_eq!(body["candidates"], 3);
    let trace = &body["trace"];
    assert_eq!(trace["chosen_index"], 2);
    let idx = trace["chosen_index"].as_u64().unwrap() as usize;
    assert_eq!(trace["root_candidates"][idx]["candidate"], body["reply"]);

    let (status, stored) = call(&app, "GET", &format!("/sessions/{id}/trace"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(&stored, trace);

    let (_, view) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    let history = view["history"].as_array().unwrap();
    assert_eq!(history.len(), 4);
    assert_eq!(history[3]["content"], "Candidate C: Sicario");
    assert_eq!(history[3]["role"], "recommender");

    // a plain reply clears the trace
    call(&app, "POST", &format!("/sessions/{id}/messages"), Some(json!({"text": "ok thanks"}))).await;
    let (status, _) = call(&app, "GET", &format!("/sessions/{id}/trace"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn errors_map_to_status_codes() {
    let (_, app) = service(Duration::from_secs(60), None);
    let (status, body) = call(&app, "POST", "/sessions/nope/messages", Some(json!({"text": "hi"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["retryable"], false);

    let id = create(&app).await;
    let (status, _) = call(&app, "POST", &format!("/sessions/{id}/messages"), Some(json!({"text": "   "}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    // no summarizer rule for this backend: the search fails upstream
    let backend = Arc::new(ScriptedBackend::new(vec![ScriptRule::reply("x").for_tag(tags::RECOMMENDER)]).unwrap());
    let state = AppState::new(ServiceConfig::new(RunConfig::default(), PromptSet::default(), Agents::single(backend))).unwrap();
    let app = router(state);
    let id = create(&app).await;
    let (status, body) =
        call(&app, "POST", &format!("/sessions/{id}/messages"), Some(json!({"text": "hi", "ses": true}))).await;
    assert_eq!(status, StatusCode::BAD_GATEWAY);
    assert_eq!(body["retryable"], false);
    // failed turns leave the history untouched
    let (_, view) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(view["history"].as_array().unwrap().len(), 0);
}

#[tokio::test]
async fn concurrent_posts_are_serialized() {
    let (_, app) = service(Duration::from_secs(60), None);
    let id = create(&app).await;
    let mut handles = Vec::new();
    for i in 0..10 {
        let app = app.clone();
        let uri = format!("/sessions/{id}/messages");
        handles.push(tokio::spawn(async move { call(&app, "POST", &uri, Some(json!({"text": format!("msg {i}!")}))).await }));
    }
    for h in handles {
        let (status, _) = h.await.unwrap();
        assert_eq!(status, StatusCode::OK);
    }
    let (_, view) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    let history = view["history"].as_array().unwrap();
    assert_eq!(history.len(), 20);
    let mut seen = Vec::new();
    for pair in history.chunks(2) {
        assert_eq!(pair[0]["role"], "user");
        assert_eq!(pair[1]["role"], "recommender");
        let user = pair[0]["content"].as_str().unwrap();
        let n: usize = user.trim_start_matches("msg ").trim_end_matches('!').parse().unwrap();
        assert_eq!(pair[1]["content"], format!("reply {n}!"));
        seen.push(n);
    }
    seen.sort();
    assert_eq!(seen, (0..10).collect::<Vec<_>>());
}

#[tokio::test]
async fn idle_sessions_expire() {
    let (state, app) = service(Duration::from_millis(50), None);
    let id = create(&app).await;
    let other = create(&app).await;
    tokio::time::sleep(Duration::from_millis(120)).await;
    let (status, _) = call(&app, "POST", &format!("/sessions/{id}/messages"), Some(json!({"text": "hi"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(state.evict_idle(), 1);
    let (status, _) = call(&app, "GET", &format!("/sessions/{other}"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(state.session_count(), 0);
}

#[tokio::test]
async fn event_log_restores_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("events.jsonl");
    let id = {
        let (_, app) = service(Duration::from_secs(60), Some(log.clone()));
        let id = create(&app).await;
        call(&app, "POST", &format!("/sessions/{id}/messages"), Some(json!({"text": "msg 3!"}))).await;
        id
    };
    let (state, app) = service(Duration::from_secs(60), Some(log));
    assert_eq!(state.session_count(), 1);
    let (status, view) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(view["history"][1]["content"], "reply 3!");
}

#[tokio::test]
async fn health_and_cors() {
    let (_, app) = service(Duration::from_secs(60), None);
    let (status, body) = call(&app, "GET", "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");

    let req = Request::builder()
        .method("OPTIONS")
        .uri("/sessions")
        .header("origin", "http://localhost:5173")
        .header("access-control-request-method", "POST")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert!(resp.headers().contains_key("access-control-allow-origin"));
}
