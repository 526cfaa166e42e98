//! The completions client against a scripted local server.

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

use fairicl::inference::{ExternalClient, ExternalClientConfig};
use fairicl::serialize::{parse_answer, ParsedAnswer};
use fairicl::Error;

/// A scripted reply: HTTP status and body.
type Reply = (u16, Value);

#[derive(Clone, Default)]
struct Stub {
    script: Arc<Mutex<VecDeque<Reply>>>,
    seen: Arc<Mutex<Vec<(Value, Option<String>)>>>,
}

async fn handle(State(s): State<Stub>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let auth = headers
        .get("authorization")
        .map(|v| v.to_str().unwrap().to_string());
    s.seen.lock().unwrap().push((body, auth));
    let (code, reply) = s
        .script
        .lock()
        .unwrap()
        .pop_front()
        .unwrap_or((200, json!({"choices": [{"text": " No"}]})));
    (StatusCode::from_u16(code).unwrap(), Json(reply))
}

fn serve(replies: Vec<Reply>) -> (SocketAddr, Stub) {
    let stub = Stub::default();
    stub.script.lock().unwrap().extend(replies);
    let app = Router::new()
        .route("/v1/completions", post(handle))
        .with_state(stub.clone());
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    (rx.recv().unwrap(), stub)
}

fn text(t: &str) -> Reply {
    (200, json!({"id": "x", "choices": [{"text": t, "index": 0}]}))
}

fn client(addr: SocketAddr) -> ExternalClient {
    let mut cfg = ExternalClientConfig::new(format!("http://{addr}/v1/completions"), "desk-lm");
    cfg.backoff_ms = 10;
    cfg.max_retries = 3;
    ExternalClient::new(cfg).unwrap()
}

#[test]
fn sends_completion_request_shape() {
    let (addr, stub) = serve(vec![text(" Yes")]);
    let prompt = "### Instruction: x\n\n### Answer: ".to_string();
    let out = client(addr).complete_all_blocking(std::slice::from_ref(&prompt)).unwrap();
    assert_eq!(parse_answer(out[0].as_ref().unwrap()), ParsedAnswer::Positive);
    let seen = stub.seen.lock().unwrap();
    let body = &seen[0].0;
    assert_eq!(body["model"], "desk-lm");
    assert_eq!(body["prompt"].as_str().unwrap().as_bytes(), prompt.as_bytes());
    assert_eq!(body["max_tokens"], 4);
    assert_eq!(body["temperature"], 0);
    assert_eq!(body.as_object().unwrap().len(), 4);
    assert_eq!(seen[0].1, None);
}

#[test]
fn bearer_token_comes_from_the_environment() {
    let (addr, stub) = serve(vec![text("Yes")]);
    std::env::set_var("FAIRICL_TEST_TOKEN", "s3cret");
    let mut cfg = ExternalClientConfig::new(format!("http://{addr}/v1/completions"), "m");
    cfg.token_env = Some("FAIRICL_TEST_TOKEN".into());
    ExternalClient::new(cfg).unwrap().complete_all_blocking(&["p".into()]).unwrap();
    assert_eq!(stub.seen.lock().unwrap()[0].1.as_deref(), Some("Bearer s3cret"));

    let mut missing = ExternalClientConfig::new("http://127.0.0.1:1/", "m");
    missing.token_env = Some("FAIRICL_TEST_TOKEN_UNSET".into());
    assert!(ExternalClient::new(missing).is_err());
}

#[test]
fn retries_server_errors_then_succeeds() {
    let (addr, stub) = serve(vec![(500, json!({})), (500, json!({})), text("No")]);
    let out = client(addr).complete_all_blocking(&["p".into()]).unwrap();
    assert_eq!(parse_answer(out[0].as_ref().unwrap()), ParsedAnswer::Negative);
    assert_eq!(stub.seen.lock().unwrap().len(), 3);
}

#[test]
fn gives_up_after_the_retry_budget() {
    let (addr, stub) = serve(vec![(503, json!({})); 10]);
    let out = client(addr).complete_all_blocking(&["p".into()]).unwrap();
    assert!(matches!(out[0], Err(Error::RetriesExhausted { attempts: 4, .. })));
    assert_eq!(stub.seen.lock().unwrap().len(), 4);
}

#[test]
fn unparseable_and_malformed_replies() {
    let (addr, _) = serve(vec![text("income is high"), (200, json!({"result": "Yes"}))]);
    let c = client(addr);
    let first = c.complete_all_blocking(&["a".into()]).unwrap();
    let raw = first[0].as_ref().unwrap();
    assert_eq!(parse_answer(raw), ParsedAnswer::Unparseable);
    assert!(!parse_answer(raw).as_prediction());
    let second = c.complete_all_blocking(&["b".into()]).unwrap();
    assert!(matches!(second[0], Err(Error::Protocol(_))));
}

#[test]
fn many_prompts_keep_their_order() {
    let (addr, _) = serve(vec![]);
    let prompts: Vec<String> = (0..20).map(|i| format!("prompt {i}")).collect();
    let out = client(addr).complete_all_blocking(&prompts).unwrap();
    assert_eq!(out.len(), 20);
    assert!(out.iter().all(|r| r.as_deref().unwrap() == " No"));
}

#[test]
fn temperature_must_be_zero() {
    let mut cfg = ExternalClientConfig::new("http://127.0.0.1:1/", "m");
    cfg.temperature = 0.7;
    assert!(ExternalClient::new(cfg).is_err());
}
