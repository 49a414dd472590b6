//! In-process chat-completions endpoint for tests and offline runs.
//!
//! The server binds an ephemeral loopback port, answers POSTs to
//! `/chat/completions`, and enforces the evaluation wire contract (one
//! user turn, one text part plus one image part, temperature exactly 0)
//! by rejecting violations with a 400, so a passing end-to-end run also
//! certifies the payload shape. Responses route by sha256 of the prompt
//! text, with an optional default; scripted early 500s exercise retry
//! paths.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use sha2::{Digest, Sha256};

/// Scripted behavior for a [`MockVlmServer`].
#[derive(Debug, Clone, Default)]
pub struct MockResponder {
    by_prompt: BTreeMap<String, String>,
    default_response: Option<String>,
    fail_first: u32,
    bearer: Option<String>,
}

impl MockResponder {
    pub fn new() -> Self {
        MockResponder::default()
    }

    /// Fixed completion for one exact prompt text.
    pub fn respond_to_prompt(mut self, prompt: &str, response: &str) -> Self {
        self.by_prompt
            .insert(hex::encode(Sha256::digest(prompt.as_bytes())), response.to_string());
        self
    }

    /// Completion for prompts with no dedicated entry.
    pub fn default_response(mut self, response: &str) -> Self {
        self.default_response = Some(response.to_string());
        self
    }

    /// Answer the first `n` requests with a 500.
    pub fn fail_first(mut self, n: u32) -> Self {
        self.fail_first = n;
        self
    }

    /// Reject requests lacking `Authorization: Bearer <token>` with a 401.
    pub fn require_bearer(mut self, token: &str) -> Self {
        self.bearer = Some(token.to_string());
        self
    }
}

struct ServerState {
    responder: MockResponder,
    remaining_failures: Mutex<u32>,
    hits: AtomicU64,
    shutdown: AtomicBool,
}

pub struct MockVlmServer {
    addr: SocketAddr,
    state: Arc<ServerState>,
    accept_thread: Option<JoinHandle<()>>,
}

/// One parsed HTTP/1.1 request.
pub(crate) struct HttpRequest {
    pub method: String,
    pub path: String,
    pub headers: BTreeMap<String, String>,
    pub body: Vec<u8>,
}

fn find_subsequence(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

/// Read one request off the stream; relies on Content-Length.
pub(crate) fn read_http_request(stream: &mut TcpStream) -> std::io::Result<HttpRequest> {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    let header_end = loop {
        if let Some(pos) = find_subsequence(&buf, b"\r\n\r\n") {
            break pos;
        }
        if buf.len() > 1 << 20 {
            return Err(std::io::Error::other("header section exceeds 1 MiB"));
        }
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            return Err(std::io::Error::other("connection closed mid-header"));
        }
        buf.extend_from_slice(&chunk[..n]);
    };

    let head = String::from_utf8_lossy(&buf[..header_end]).into_owned();
    let mut lines = head.split("\r\n");
    let request_line = lines.next().unwrap_or_default();
    let mut parts = request_line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let path = parts.next().unwrap_or_default().to_string();

    let mut headers = BTreeMap::new();
    for line in lines {
        if let Some((k, v)) = line.split_once(':') {
            headers.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
        }
    }

    let content_length: usize = headers
        .get("content-length")
        .and_then(|v| v.parse().ok())
        .unwrap_or(0);
    if content_length > 64 << 20 {
        return Err(std::io::Error::other("body exceeds 64 MiB"));
    }
    let mut body = buf[header_end + 4..].to_vec();
    while body.len() < content_length {
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            break;
        }
        body.extend_from_slice(&chunk[..n]);
    }
    body.truncate(content_length);
    Ok(HttpRequest { method, path, headers, body })
}

pub(crate) fn write_json_response(stream: &mut TcpStream, status: u16, reason: &str, body: &str) {
    let msg = format!(
        "HTTP/1.1 {status} {reason}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
        body.len()
    );
    let _ = stream.write_all(msg.as_bytes());
    let _ = stream.flush();
}

fn error_body(message: &str) -> String {
    serde_json::json!({ "error": { "message": message } }).to_string()
}

/// Check the evaluation wire contract; returns the prompt text on success.
fn check_contract(body: &serde_json::Value) -> Result<String, String> {
    let temperature = body
        .get("temperature")
        .and_then(|t| t.as_f64())
        .ok_or("temperature missing")?;
    if temperature != 0.0 {
        return Err(format!("temperature must be 0, got {temperature}"));
    }
    if body.get("max_tokens").and_then(|m| m.as_u64()).unwrap_or(0) == 0 {
        return Err("max_tokens missing or zero".to_string());
    }
    if body.get("model").and_then(|m| m.as_str()).unwrap_or("").is_empty() {
        return Err("model missing".to_string());
    }
    let messages = body
        .get("messages")
        .and_then(|m| m.as_array())
        .ok_or("messages missing")?;
    if messages.len() != 1 {
        return Err(format!("expected exactly 1 message, got {}", messages.len()));
    }
    let message = &messages[0];
    if message.get("role").and_then(|r| r.as_str()) != Some("user") {
        return Err("message role must be user".to_string());
    }
    let content = message
        .get("content")
        .and_then(|c| c.as_array())
        .ok_or("content must be an array")?;
    if content.len() != 2 {
        return Err(format!("expected 2 content parts, got {}", content.len()));
    }
    let text = content[0]
        .get("type")
        .and_then(|t| t.as_str())
        .filter(|&t| t == "text")
        .and_then(|_| content[0].get("text"))
        .and_then(|t| t.as_str())
        .ok_or("first part must be text")?;
    let image_url = content[1]
        .get("type")
        .and_then(|t| t.as_str())
        .filter(|&t| t == "image_url")
        .and_then(|_| content[1].get("image_url"))
        .and_then(|u| u.get("url"))
        .and_then(|u| u.as_str())
        .ok_or("second part must be image_url")?;
    if !image_url.starts_with("data:image/") {
        return Err("image_url must be a data URL".to_string());
    }
    Ok(text.to_string())
}

fn handle_connection(mut stream: TcpStream, state: &ServerState) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(10)));
    let request = match read_http_request(&mut stream) {
        Ok(r) => r,
        Err(_) => return,
    };
    state.hits.fetch_add(1, Ordering::SeqCst);

    if request.method != "POST" || !request.path.ends_with("/chat/completions") {
        write_json_response(&mut stream, 404, "Not Found", &error_body("unknown route"));
        return;
    }
    if let Some(expected) = &state.responder.bearer {
        let ok = request
            .headers
            .get("authorization")
            .is_some_and(|v| v == &format!("Bearer {expected}"));
        if !ok {
            write_json_response(&mut stream, 401, "Unauthorized", &error_body("bad token"));
            return;
        }
    }
    {
        let mut remaining = state.remaining_failures.lock().unwrap();
        if *remaining > 0 {
            *remaining -= 1;
            write_json_response(
                &mut stream,
                500,
                "Internal Server Error",
                &error_body("scripted failure"),
            );
            return;
        }
    }

    let body: serde_json::Value = match serde_json::from_slice(&request.body) {
        Ok(v) => v,
        Err(e) => {
            write_json_response(&mut stream, 400, "Bad Request", &error_body(&e.to_string()));
            return;
        }
    };
    let prompt = match check_contract(&body) {
        Ok(p) => p,
        Err(violation) => {
            write_json_response(&mut stream, 400, "Bad Request", &error_body(&violation));
            return;
        }
    };

    let key = hex::encode(Sha256::digest(prompt.as_bytes()));
    let content = state
        .responder
        .by_prompt
        .get(&key)
        .or(state.responder.default_response.as_ref());
    match content {
        Some(text) => {
            let reply = serde_json::json!({
                "id": "mock-0",
                "object": "chat.completion",
                "model": body.get("model"),
                "choices": [{
                    "index": 0,
                    "message": { "role": "assistant", "content": text },
                    "finish_reason": "stop"
                }]
            });
            write_json_response(&mut stream, 200, "OK", &reply.to_string());
        }
        None => {
            write_json_response(
                &mut stream,
                404,
                "Not Found",
                &error_body("no scripted response for prompt"),
            );
        }
    }
}

impl MockVlmServer {
    /// Bind a loopback port and serve in background threads until drop.
    pub fn start(responder: MockResponder) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let state = Arc::new(ServerState {
            remaining_failures: Mutex::new(responder.fail_first),
            responder,
            hits: AtomicU64::new(0),
            shutdown: AtomicBool::new(false),
        });
        let accept_state = Arc::clone(&state);
        let accept_thread = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if accept_state.shutdown.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let conn_state = Arc::clone(&accept_state);
                std::thread::spawn(move || handle_connection(stream, &conn_state));
            }
        });
        Ok(MockVlmServer {
            addr,
            state,
            accept_thread: Some(accept_thread),
        })
    }

    /// Base URL for [`EndpointConfig::base_url`](crate::client::EndpointConfig).
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Requests handled so far, including scripted failures.
    pub fn request_count(&self) -> u64 {
        self.state.hits.load(Ordering::SeqCst)
    }
}

impl Drop for MockVlmServer {
    fn drop(&mut self) {
        self.state.shutdown.store(true, Ordering::SeqCst);
        // Unblock the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}
