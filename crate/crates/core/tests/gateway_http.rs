//! Gateway behavior against a real HTTP chat-completions endpoint: wire
//! shape, retry with backoff, auth short-circuiting, and the per-backend
//! concurrency limiter.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

use chorus_core::gateway::{
    BackendKind, BackendSpec, ChatMessage, ChatRequest, Gateway, GatewayError, MediaRef,
    RetryPolicy,
};
use chorus_core::registry::Modality;

#[derive(Clone)]
struct ServerState {
    hits: Arc<AtomicUsize>,
    in_flight: Arc<AtomicUsize>,
    max_in_flight: Arc<AtomicUsize>,
    /// Requests to fail with 500 before succeeding.
    fail_first: usize,
    /// Status to return when failing.
    fail_status: u16,
    /// Response delay, to keep several requests in flight at once.
    delay_ms: u64,
    last_body: Arc<std::sync::Mutex<Option<Value>>>,
}

impl ServerState {
    fn new(fail_first: usize, fail_status: u16, delay_ms: u64) -> Self {
        ServerState {
            hits: Arc::new(AtomicUsize::new(0)),
            in_flight: Arc::new(AtomicUsize::new(0)),
            max_in_flight: Arc::new(AtomicUsize::new(0)),
            fail_first,
            fail_status,
            delay_ms,
            last_body: Arc::new(std::sync::Mutex::new(None)),
        }
    }
}

async fn completions(
    State(state): State<ServerState>,
    headers: HeaderMap,
    Json(body): Json<Value>,
) -> (StatusCode, Json<Value>) {
    let hit = state.hits.fetch_add(1, Ordering::SeqCst);
    let current = state.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    state.max_in_flight.fetch_max(current, Ordering::SeqCst);
    *state.last_body.lock().unwrap() = Some(body);

    if state.delay_ms > 0 {
        tokio::time::sleep(Duration::from_millis(state.delay_ms)).await;
    }
    state.in_flight.fetch_sub(1, Ordering::SeqCst);

    if hit < state.fail_first {
        return (
            StatusCode::from_u16(state.fail_status).unwrap(),
            Json(json!({"error": "injected failure"})),
        );
    }
    let authorized = headers
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v == "Bearer test-key");
    if !authorized {
        return (StatusCode::UNAUTHORIZED, Json(json!({"error": "bad key"})));
    }
    (
        StatusCode::OK,
        Json(json!({
            "choices": [{"message": {"role": "assistant", "content": "The answer is (B)."}}],
            "usage": {"prompt_tokens": 12, "completion_tokens": 5}
        })),
    )
}

async fn spawn_server(state: ServerState) -> String {
    let app = Router::new()
        .route("/v1/chat/completions", post(completions))
        .with_state(state);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, app).await.unwrap();
    });
    format!("http://{addr}/v1")
}

fn remote_spec(id: &str, base_uri: String, max_retries: u32) -> BackendSpec {
    BackendSpec {
        id: id.to_string(),
        kind: BackendKind::RemoteChat,
        base_uri: Some(base_uri),
        model: Some("test-model".to_string()),
        auth_env: Some("CHORUS_TEST_KEY".to_string()),
        timeout_secs: 5,
        max_retries,
        temperature: 0.0,
        max_tokens: 64,
        max_concurrency: 4,
        modalities: None,
        context_budget_chars: None,
        script: Vec::new(),
    }
}

fn fast_retry_gateway() -> Gateway {
    Gateway::with_retry(RetryPolicy {
        base: Duration::from_millis(5),
        factor: 2.0,
        jitter: true,
    })
}

fn set_test_key() {
    // Safe here: tests that read the variable all set the same value.
    std::env::set_var("CHORUS_TEST_KEY", "test-key");
}

#[tokio::test]
async fn remote_completion_round_trip_and_wire_shape() {
    set_test_key();
    let state = ServerState::new(0, 500, 0);
    let last_body = state.last_body.clone();
    let base = spawn_server(state).await;
    let spec = remote_spec("remote", base, 0);
    let gateway = Gateway::new();

    let image = tempfile::NamedTempFile::new().unwrap();
    std::fs::write(image.path(), b"not-really-a-png").unwrap();
    let asset = MediaRef::new(Modality::Image, image.path().display().to_string());
    let request = ChatRequest::new(vec![
        ChatMessage::system("be brief"),
        ChatMessage::user_with_attachments("what is shown?", vec![asset]),
    ])
    .unwrap();

    let response = gateway.complete(&spec, &request).await.unwrap();
    assert_eq!(response.text, "The answer is (B).");
    assert_eq!(response.prompt_tokens, 12);
    assert_eq!(response.completion_tokens, 5);
    assert_eq!(response.backend_id, "remote");

    let body = last_body.lock().unwrap().clone().unwrap();
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["max_tokens"], 64);
    let messages = body["messages"].as_array().unwrap();
    assert_eq!(messages.len(), 2);
    assert_eq!(messages[0]["role"], "system");
    assert_eq!(messages[1]["role"], "user");
    let parts = messages[1]["content"].as_array().unwrap();
    assert_eq!(parts[0]["type"], "text");
    assert_eq!(parts[1]["type"], "image_url");
    let url = parts[1]["image_url"]["url"].as_str().unwrap();
    assert!(url.starts_with("data:application/octet-stream;base64,"));
}

#[tokio::test]
async fn transient_failures_are_retried_until_success() {
    set_test_key();
    let state = ServerState::new(2, 500, 0);
    let hits = state.hits.clone();
    let base = spawn_server(state).await;
    let spec = remote_spec("flaky", base, 3);
    let gateway = fast_retry_gateway();

    let response = gateway
        .complete(&spec, &ChatRequest::user("q"))
        .await
        .unwrap();
    assert_eq!(response.text, "The answer is (B).");
    assert_eq!(hits.load(Ordering::SeqCst), 3);
    assert_eq!(gateway.stats_for("flaky").attempts, 3);
    assert_eq!(gateway.stats_for("flaky").completions, 1);
}

#[tokio::test]
async fn retries_stop_at_max_retries() {
    set_test_key();
    let state = ServerState::new(usize::MAX, 503, 0);
    let hits = state.hits.clone();
    let base = spawn_server(state).await;
    let spec = remote_spec("always-down", base, 2);
    let gateway = fast_retry_gateway();

    let err = gateway
        .complete(&spec, &ChatRequest::user("q"))
        .await
        .unwrap_err();
    match err {
        GatewayError::Transport { attempts, .. } => assert_eq!(attempts, 3),
        other => panic!("unexpected error {other}"),
    }
    // Initial attempt plus exactly max_retries retries.
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[tokio::test]
async fn auth_failure_consumes_zero_retries() {
    // The server rejects this credential value.
    std::env::set_var("CHORUS_TEST_BAD_KEY", "wrong-key");
    let state = ServerState::new(0, 500, 0);
    let hits = state.hits.clone();
    let base = spawn_server(state).await;
    let mut spec = remote_spec("unauthorized", base, 5);
    spec.auth_env = Some("CHORUS_TEST_BAD_KEY".to_string());
    let gateway = fast_retry_gateway();

    let err = gateway
        .complete(&spec, &ChatRequest::user("q"))
        .await
        .unwrap_err();
    assert!(err.is_auth(), "expected auth error, got {err}");
    assert_eq!(hits.load(Ordering::SeqCst), 1);
    assert_eq!(gateway.stats_for("unauthorized").attempts, 1);
}

#[tokio::test]
async fn permanent_client_errors_are_not_retried() {
    set_test_key();
    let state = ServerState::new(usize::MAX, 404, 0);
    let hits = state.hits.clone();
    let base = spawn_server(state).await;
    let spec = remote_spec("notfound", base, 4);
    let gateway = fast_retry_gateway();

    let err = gateway
        .complete(&spec, &ChatRequest::user("q"))
        .await
        .unwrap_err();
    assert!(matches!(err, GatewayError::HttpStatus { status: 404, .. }));
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[tokio::test]
async fn per_backend_limiter_bounds_in_flight_requests() {
    set_test_key();
    let state = ServerState::new(0, 500, 40);
    let server_max = state.max_in_flight.clone();
    let base = spawn_server(state).await;
    let mut spec = remote_spec("limited", base, 0);
    spec.max_concurrency = 2;
    let gateway = Gateway::new();

    let request = ChatRequest::user("q");
    let calls = (0..8).map(|_| gateway.complete(&spec, &request));
    for result in futures::future::join_all(calls).await {
        result.unwrap();
    }
    assert!(
        server_max.load(Ordering::SeqCst) <= 2,
        "server observed more than 2 concurrent requests"
    );
    assert!(gateway.stats_for("limited").max_in_flight <= 2);
    assert_eq!(gateway.stats_for("limited").completions, 8);
}

#[tokio::test]
async fn malformed_response_body_is_reported() {
    set_test_key();
    async fn bad(State(_): State<ServerState>) -> (StatusCode, Json<Value>) {
        (StatusCode::OK, Json(json!({"nonsense": true})))
    }
    let app = Router::new()
        .route("/v1/chat/completions", post(bad))
        .with_state(ServerState::new(0, 500, 0));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    let spec = remote_spec("weird", format!("http://{addr}/v1"), 2);
    let gateway = fast_retry_gateway();

    let err = gateway
        .complete(&spec, &ChatRequest::user("q"))
        .await
        .unwrap_err();
    assert!(matches!(err, GatewayError::Malformed { .. }), "{err}");
}

#[tokio::test]
async fn backend_modality_restrictions_are_exposed() {
    let spec = BackendSpec {
        modalities: Some(BTreeSet::from([Modality::Image, Modality::Text])),
        ..remote_spec("img-only", "http://127.0.0.1:1/v1".to_string(), 0)
    };
    assert!(spec.accepts_modality(Modality::Image));
    assert!(!spec.accepts_modality(Modality::Audio));
}
