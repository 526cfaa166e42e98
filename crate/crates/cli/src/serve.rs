//! The internal model behind an OpenAI-compatible completions route, so it
//! can stand in for an external model.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use fairicl::lm::tokenizer::{BOS, EOS};
use fairicl::lm::{self, InternalLm};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::error::{PipelineError, Result};

#[derive(Debug, Deserialize)]
struct CompletionRequest {
    model: String,
    prompt: String,
    #[serde(default = "default_max_tokens")]
    max_tokens: usize,
    #[serde(default)]
    temperature: f64,
}

fn default_max_tokens() -> usize {
    16
}

/// Greedy continuation of `prompt`, the same way internal inference does it.
pub fn complete(lm: &InternalLm, prompt: &str, max_tokens: usize) -> fairicl::Result<String> {
    let mut tokens = vec![BOS];
    tokens.extend(lm.tokenizer.encode(prompt.strip_suffix(' ').unwrap_or(prompt)));
    let out = lm::generate(&lm.params, None, &tokens, max_tokens.max(1), EOS)?;
    let body: Vec<u32> = out.into_iter().filter(|&t| t != EOS).collect();
    Ok(lm.tokenizer.decode(&body))
}

async fn completions(
    State(lm): State<Arc<InternalLm>>,
    Json(req): Json<CompletionRequest>,
) -> Result<Json<Value>, (StatusCode, String)> {
    if req.temperature != 0.0 {
        return Err((StatusCode::BAD_REQUEST, "only temperature 0 is supported".into()));
    }
    let model = req.model.clone();
    let text = tokio::task::spawn_blocking(move || complete(&lm, &req.prompt, req.max_tokens))
        .await
        .map_err(|e| (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| (StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    Ok(Json(json!({
        "object": "text_completion",
        "model": model,
        "choices": [{ "index": 0, "text": text, "finish_reason": "stop" }],
    })))
}

pub fn router(lm: Arc<InternalLm>) -> Router {
    Router::new()
        .route("/v1/completions", post(completions))
        .with_state(lm)
}

/// Serve until the process ends.
pub async fn serve(lm: InternalLm, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| PipelineError::io(addr.to_string(), e))?;
    log::info!("serving completions on http://{}/v1/completions", listener.local_addr().unwrap_or(addr));
    axum::serve(listener, router(Arc::new(lm)))
        .await
        .map_err(|e| PipelineError::io(addr.to_string(), e))
}

/// Serve on an ephemeral local port from a background thread; returns the
/// completions URL.
pub fn spawn_local(lm: InternalLm) -> Result<String> {
    let std_listener =
        std::net::TcpListener::bind("127.0.0.1:0").map_err(|e| PipelineError::io("127.0.0.1:0", e))?;
    std_listener
        .set_nonblocking(true)
        .map_err(|e| PipelineError::io("127.0.0.1:0", e))?;
    let addr = std_listener
        .local_addr()
        .map_err(|e| PipelineError::io("127.0.0.1:0", e))?;
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .build()
            .expect("tokio runtime");
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(std_listener).expect("listener");
            axum::serve(listener, router(Arc::new(lm))).await.expect("server");
        });
    });
    Ok(format!("http://{addr}/v1/completions"))
}
