//! HTTP server fronting the mock backends, for wire-level tests and offline demos.
//!
//! Serves the native routes (`/v1/chat`, `/v1/embed`) and the
//! OpenAI-compatible routes (`/v1/chat/completions`, `/v1/embeddings`).

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::Deserialize;
use serde_json::{json, Value};
use tiny_http::{Header, Method, Request, Response, Server};

use super::openai::{role_prefix, IMAGE_TOKEN_OPEN, TEMPLATE_PREFIX};
use super::{
    BackendError, ChatBackend, ChatRequest, EmbedRole, EmbeddingBackend, EmbeddingRequest, MockChatBackend,
    MockEmbeddingBackend, Part,
};

pub struct MockServer {
    server: Arc<Server>,
    addr: SocketAddr,
    worker: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and serves on a background thread.
    pub fn start(addr: &str, chat: MockChatBackend, embed: MockEmbeddingBackend) -> Result<Self, BackendError> {
        let server = Arc::new(Server::http(addr).map_err(|e| BackendError::Transport(e.to_string()))?);
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| BackendError::Transport("server bound to a non-IP address".into()))?;
        let worker_server = Arc::clone(&server);
        let worker = std::thread::spawn(move || {
            for request in worker_server.incoming_requests() {
                handle(request, &chat, &embed);
            }
        });
        Ok(Self { server, addr, worker: Some(worker) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server thread exits.
    pub fn join(mut self) {
        if let Some(worker) = self.worker.take() {
            let _ = worker.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(worker) = self.worker.take() {
            let _ = worker.join();
        }
    }
}

#[derive(Deserialize)]
struct NativeEmbed {
    role: EmbedRole,
    parts: Vec<Part>,
    #[serde(default)]
    dim: Option<usize>,
}

fn handle(mut request: Request, chat: &MockChatBackend, embed: &MockEmbeddingBackend) {
    let mut body = String::new();
    let outcome = if request.as_reader().read_to_string(&mut body).is_err() {
        Err((400, "unreadable body".to_string()))
    } else if *request.method() != Method::Post {
        Err((405, "only POST is supported".to_string()))
    } else {
        route(request.url(), &body, chat, embed)
    };
    let (status, payload) = match outcome {
        Ok(v) => (200, v),
        Err((status, message)) => (status, json!({ "error": message })),
    };
    let header = Header::from_bytes(&b"content-type"[..], &b"application/json"[..]).expect("static header");
    let response = Response::from_string(payload.to_string()).with_status_code(status).with_header(header);
    if let Err(e) = request.respond(response) {
        log::warn!("mock server failed to respond: {e}");
    }
}

fn backend_status(e: &BackendError) -> u16 {
    match e {
        BackendError::NoFixture { .. } => 404,
        BackendError::InvalidRequest(_) | BackendError::DimMismatch { .. } => 400,
        _ => 500,
    }
}

fn route(url: &str, body: &str, chat: &MockChatBackend, embed: &MockEmbeddingBackend) -> Result<Value, (u16, String)> {
    let bad = |e: serde_json::Error| (400, e.to_string());
    let failed = |e: BackendError| (backend_status(&e), e.to_string());
    match url {
        "/v1/chat" => {
            let req: ChatRequest = serde_json::from_str(body).map_err(bad)?;
            let text = chat.chat_complete(&req).map_err(failed)?;
            Ok(json!({ "text": text }))
        }
        "/v1/embed" => {
            let raw: NativeEmbed = serde_json::from_str(body).map_err(bad)?;
            let req = EmbeddingRequest { role: raw.role, parts: raw.parts, dim: raw.dim };
            let v = embed.embed(&req).map_err(failed)?;
            Ok(json!({ "values": v.values() }))
        }
        "/v1/chat/completions" => {
            let value: Value = serde_json::from_str(body).map_err(bad)?;
            let req = openai_chat_request(&value).ok_or((400, "malformed chat completion body".to_string()))?;
            let text = chat.chat_complete(&req).map_err(failed)?;
            Ok(json!({
                "object": "chat.completion",
                "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
            }))
        }
        "/v1/embeddings" => {
            let value: Value = serde_json::from_str(body).map_err(bad)?;
            let input = value["input"].as_str().ok_or((400, "input must be a string".to_string()))?;
            let mut req = openai_embed_request(input);
            req.dim = value["dimensions"].as_u64().map(|d| d as usize);
            let v = embed.embed(&req).map_err(failed)?;
            Ok(json!({ "object": "list", "data": [{"index": 0, "embedding": v.values()}] }))
        }
        other => Err((404, format!("no route {other}"))),
    }
}

fn openai_chat_request(value: &Value) -> Option<ChatRequest> {
    let messages = value["messages"].as_array()?;
    let mut template_id = None;
    let mut parts = Vec::new();
    for msg in messages {
        match (msg["role"].as_str()?, &msg["content"]) {
            ("system", Value::String(s)) => template_id = s.strip_prefix(TEMPLATE_PREFIX).map(str::to_owned),
            (_, Value::String(s)) => parts.push(Part::Text(s.clone())),
            (_, Value::Array(items)) => {
                for item in items {
                    match item["type"].as_str()? {
                        "text" => parts.push(Part::Text(item["text"].as_str()?.to_owned())),
                        "image_url" => parts.push(Part::Image(item["image_url"]["url"].as_str()?.to_owned())),
                        _ => {}
                    }
                }
            }
            _ => {}
        }
    }
    Some(ChatRequest {
        template_id: template_id?,
        parts,
        temperature: value["temperature"].as_f64().unwrap_or(0.0),
        seed: value["seed"].as_u64().unwrap_or(0),
    })
}

fn openai_embed_request(input: &str) -> EmbeddingRequest {
    let (role, rest) = [EmbedRole::Query, EmbedRole::Evidence]
        .into_iter()
        .find_map(|role| input.strip_prefix(role_prefix(role)).map(|rest| (role, rest)))
        .unwrap_or((EmbedRole::Evidence, input));
    let parts = rest
        .split('\n')
        .map(|line| match line.strip_prefix(IMAGE_TOKEN_OPEN).and_then(|l| l.strip_suffix(']')) {
            Some(id) => Part::Image(id.to_owned()),
            None => Part::Text(line.to_owned()),
        })
        .collect();
    EmbeddingRequest::new(role, parts)
}
