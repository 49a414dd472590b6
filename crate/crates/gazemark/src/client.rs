//! Chat-completions client for vision-language endpoints.
//!
//! Every request is greedy (temperature 0) at batch size one, with a fixed
//! per-task completion budget, so repeated runs against the same weights
//! are comparable. Requests carry exactly one user turn holding one text
//! part and one base64 data-URL image part.

use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use gazemark_core::task::{Condition, TaskInstance, TaskKind};

use crate::cache::{cache_key, ExchangeCache};

/// Completion budget per task. These are part of the evaluation contract
/// and deliberately not configurable.
pub fn task_max_tokens(kind: TaskKind) -> u32 {
    match kind {
        TaskKind::Gen => 320,
        TaskKind::Sum => 128,
        TaskKind::Err => 64,
        TaskKind::Ddx => 192,
        TaskKind::Vqa => 64,
    }
}

/// Where and how to reach the model endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    /// Base URL; `/chat/completions` is appended.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token, when the endpoint
    /// needs one.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_initial_ms")]
    pub backoff_initial_ms: u64,
    #[serde(default = "default_backoff_multiplier")]
    pub backoff_multiplier: f64,
    /// Upper bound on in-flight requests during a batch.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
}

fn default_timeout_secs() -> u64 {
    60
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff_initial_ms() -> u64 {
    1000
}
fn default_backoff_multiplier() -> f64 {
    2.0
}
fn default_concurrency() -> usize {
    4
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("image for condition not readable: {path}: {source}")]
    MissingImage {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("auth env var `{var}` is not set")]
    MissingToken { var: String },
    #[error("endpoint rejected credentials with status {status}")]
    Auth { status: u16 },
    #[error("endpoint returned status {status}")]
    Server { status: u16 },
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("retries exhausted after {attempts} attempt(s): {last}")]
    ExhaustedRetries { attempts: u32, last: String },
    #[error("malformed endpoint response: {what}")]
    MalformedResponse { what: String },
}

/// One content part of a chat message, tagged OpenAI-style.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageUrl { image_url: ImageUrlPart },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageUrlPart {
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: Vec<ContentPart>,
}

/// The wire payload sent to `/chat/completions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Debug, Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

/// Hex sha256 of the prompt text, recorded with every exchange.
pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

fn data_url(path: &str, bytes: &[u8]) -> String {
    let mime = match std::path::Path::new(path)
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("jpg") | Some("jpeg") => "image/jpeg",
        _ => "image/png",
    };
    format!("data:{mime};base64,{}", BASE64.encode(bytes))
}

/// Build the wire payload for one instance under one condition: a single
/// user turn with the prompt text followed by the condition's image.
pub fn build_request(
    instance: &TaskInstance,
    condition: Condition,
    model: &str,
) -> Result<ChatRequest, ClientError> {
    let path = instance.image_for(condition);
    let bytes = std::fs::read(path).map_err(|source| ClientError::MissingImage {
        path: path.to_string(),
        source,
    })?;
    Ok(ChatRequest {
        model: model.to_string(),
        messages: vec![ChatMessage {
            role: "user".to_string(),
            content: vec![
                ContentPart::Text { text: instance.prompt.clone() },
                ContentPart::ImageUrl { image_url: ImageUrlPart { url: data_url(path, &bytes) } },
            ],
        }],
        temperature: 0.0,
        max_tokens: task_max_tokens(instance.kind),
    })
}

/// Full audit record of one model call (or one failure to call).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmExchange {
    pub instance_id: String,
    pub condition: Condition,
    pub model: String,
    pub prompt_hash: String,
    pub image_ref: String,
    /// The serialized wire payload, verbatim.
    pub request: serde_json::Value,
    /// Present iff the call succeeded.
    pub response_text: Option<String>,
    /// Present iff the call failed.
    pub error: Option<String>,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

impl VlmExchange {
    pub fn is_success(&self) -> bool {
        self.response_text.is_some()
    }
}

/// Outcome of [`VlmClient::generate`]: the text or terminal error, plus
/// how much work it took.
#[derive(Debug)]
pub struct GenerateOutcome {
    pub text: Result<String, ClientError>,
    pub attempts: u32,
    pub latency_ms: u64,
}

enum AttemptError {
    /// Transport flakes and 5xx: worth retrying.
    Retryable { what: String, timeout: bool },
    /// Auth failures, other 4xx, unusable bodies: retrying cannot help.
    Fatal(ClientError),
}

#[derive(Debug)]
pub struct VlmClient {
    agent: ureq::Agent,
    endpoint: EndpointConfig,
    auth_token: Option<String>,
}

impl VlmClient {
    /// Build a client, resolving the bearer token now so a missing
    /// credential fails before any work is scheduled.
    pub fn new(endpoint: EndpointConfig) -> Result<Self, ClientError> {
        let auth_token = match &endpoint.auth_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| ClientError::MissingToken { var: var.clone() })?,
            ),
            None => None,
        };
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(endpoint.timeout_secs)))
            .http_status_as_error(false)
            .build();
        Ok(VlmClient {
            agent: config.new_agent(),
            endpoint,
            auth_token,
        })
    }

    pub fn endpoint(&self) -> &EndpointConfig {
        &self.endpoint
    }

    fn chat_url(&self) -> String {
        format!(
            "{}/chat/completions",
            self.endpoint.base_url.trim_end_matches('/')
        )
    }

    fn attempt_once(&self, request: &ChatRequest) -> Result<String, AttemptError> {
        let mut builder = self.agent.post(self.chat_url());
        if let Some(token) = &self.auth_token {
            builder = builder.header("authorization", format!("Bearer {token}"));
        }
        let mut response = builder.send_json(request).map_err(|e| {
            let timeout = matches!(e, ureq::Error::Timeout(_));
            AttemptError::Retryable { what: e.to_string(), timeout }
        })?;
        let status = response.status().as_u16();
        match status {
            401 | 403 => return Err(AttemptError::Fatal(ClientError::Auth { status })),
            400..=499 => return Err(AttemptError::Fatal(ClientError::Server { status })),
            500..=599 => {
                return Err(AttemptError::Retryable {
                    what: format!("endpoint returned status {status}"),
                    timeout: false,
                })
            }
            _ => {}
        }
        let parsed: ChatResponse = response.body_mut().read_json().map_err(|e| {
            // A 2xx with an unreadable body is most often a dropped
            // connection, so it stays retryable.
            AttemptError::Retryable { what: format!("unreadable body: {e}"), timeout: false }
        })?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or(AttemptError::Fatal(ClientError::MalformedResponse {
                what: "response carries no choices".to_string(),
            }))?;
        Ok(content.trim_end().to_string())
    }

    /// Call the endpoint with retries and exponential backoff. Transport
    /// errors and 5xx retry up to `max_retries` times; auth failures and
    /// other 4xx are terminal immediately.
    pub fn generate(&self, request: &ChatRequest) -> GenerateOutcome {
        let start = Instant::now();
        let max_attempts = self.endpoint.max_retries.saturating_add(1);
        let mut backoff_ms = self.endpoint.backoff_initial_ms;
        let mut last_retryable: Option<(String, bool)> = None;
        let mut attempts = 0;
        while attempts < max_attempts {
            attempts += 1;
            match self.attempt_once(request) {
                Ok(text) => {
                    return GenerateOutcome {
                        text: Ok(text),
                        attempts,
                        latency_ms: start.elapsed().as_millis() as u64,
                    }
                }
                Err(AttemptError::Fatal(e)) => {
                    return GenerateOutcome {
                        text: Err(e),
                        attempts,
                        latency_ms: start.elapsed().as_millis() as u64,
                    }
                }
                Err(AttemptError::Retryable { what, timeout }) => {
                    last_retryable = Some((what, timeout));
                    if attempts < max_attempts {
                        std::thread::sleep(Duration::from_millis(backoff_ms));
                        backoff_ms = (backoff_ms as f64 * self.endpoint.backoff_multiplier) as u64;
                    }
                }
            }
        }
        let (last, timed_out) = last_retryable.expect("at least one attempt ran");
        let error = if timed_out {
            ClientError::Timeout { attempts }
        } else {
            ClientError::ExhaustedRetries { attempts, last }
        };
        GenerateOutcome {
            text: Err(error),
            attempts,
            latency_ms: start.elapsed().as_millis() as u64,
        }
    }

    fn execute_one(
        &self,
        instance: &TaskInstance,
        condition: Condition,
        cache: &ExchangeCache,
    ) -> VlmExchange {
        let p_hash = prompt_hash(&instance.prompt);
        let key = cache_key(&instance.instance_id, condition, &self.endpoint.model, &p_hash);
        if let Some(hit) = cache.load(&key) {
            return hit;
        }
        let image_ref = instance.image_for(condition).to_string();
        let base = VlmExchange {
            instance_id: instance.instance_id.clone(),
            condition,
            model: self.endpoint.model.clone(),
            prompt_hash: p_hash,
            image_ref,
            request: serde_json::Value::Null,
            response_text: None,
            error: None,
            latency_ms: 0,
            attempt_count: 0,
        };
        let request = match build_request(instance, condition, &self.endpoint.model) {
            Ok(r) => r,
            Err(e) => {
                return VlmExchange { error: Some(e.to_string()), ..base };
            }
        };
        let request_value = serde_json::to_value(&request).expect("request serializes");
        let outcome = self.generate(&request);
        let exchange = VlmExchange {
            request: request_value,
            response_text: outcome.text.as_ref().ok().cloned(),
            error: outcome.text.as_ref().err().map(|e| e.to_string()),
            latency_ms: outcome.latency_ms,
            attempt_count: outcome.attempts,
            ..base
        };
        if exchange.is_success() {
            if let Err(e) = cache.store(&key, &exchange) {
                log::warn!("cache store failed for {}: {e}", exchange.instance_id);
            }
        }
        exchange
    }

    /// Run every (instance, condition) pair, instance-major, with at most
    /// `concurrency` requests in flight. Results come back in input order;
    /// cached successes are replayed without touching the network, and
    /// only successes are cached.
    pub fn run_batch(
        &self,
        instances: &[TaskInstance],
        conditions: &[Condition],
        cache: &ExchangeCache,
    ) -> Vec<VlmExchange> {
        use rayon::prelude::*;

        let work: Vec<(&TaskInstance, Condition)> = instances
            .iter()
            .flat_map(|i| conditions.iter().map(move |&c| (i, c)))
            .collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.endpoint.concurrency.max(1))
            .build()
            .expect("request pool builds");
        pool.install(|| {
            work.par_iter()
                .map(|(instance, condition)| self.execute_one(instance, *condition, cache))
                .collect()
        })
    }
}
