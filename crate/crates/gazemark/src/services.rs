//! Clients for the optional mention-recognition and embedding services.
//!
//! Both are explicit opt-ins from config. A configured service that fails
//! surfaces the failure; scoring never falls back silently, because a
//! recognizer swap changes the diagnosis metric's meaning.

use std::time::Duration;

use serde::Deserialize;

use gazemark_core::extract::{EmbedError, Embedder, MentionRecognizer, MentionSpan, RecognizerError};

pub const DEFAULT_SERVICE_TIMEOUT_SECS: u64 = 30;

fn agent(timeout_secs: u64) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(timeout_secs)))
        .http_status_as_error(false)
        .build()
        .new_agent()
}

fn post_json<T: serde::de::DeserializeOwned>(
    agent: &ureq::Agent,
    url: &str,
    body: &serde_json::Value,
) -> Result<T, String> {
    let mut response = agent
        .post(url)
        .send_json(body)
        .map_err(|e| format!("POST {url}: {e}"))?;
    let status = response.status().as_u16();
    if !(200..300).contains(&status) {
        return Err(format!("POST {url}: status {status}"));
    }
    response
        .body_mut()
        .read_json()
        .map_err(|e| format!("POST {url}: bad body: {e}"))
}

/// Span-extraction service: `{"text": ...}` in, `{"spans": [...]}` out.
pub struct NerClient {
    url: String,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct SpansResponse {
    spans: Vec<MentionSpan>,
}

impl NerClient {
    pub fn new(url: &str, timeout_secs: u64) -> Self {
        NerClient { url: url.to_string(), agent: agent(timeout_secs) }
    }
}

impl MentionRecognizer for NerClient {
    fn recognize(&self, response: &str) -> Result<Vec<MentionSpan>, RecognizerError> {
        let parsed: SpansResponse = post_json(
            &self.agent,
            &self.url,
            &serde_json::json!({ "text": response }),
        )
        .map_err(|message| RecognizerError { message })?;
        Ok(parsed.spans)
    }
}

/// Text-embedding service: `{"texts": [...]}` in, `{"vectors": [[...]]}` out.
pub struct EmbedClient {
    url: String,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct VectorsResponse {
    vectors: Vec<Vec<f32>>,
}

impl EmbedClient {
    pub fn new(url: &str, timeout_secs: u64) -> Self {
        EmbedClient { url: url.to_string(), agent: agent(timeout_secs) }
    }
}

impl Embedder for EmbedClient {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let parsed: VectorsResponse = post_json(
            &self.agent,
            &self.url,
            &serde_json::json!({ "texts": texts }),
        )
        .map_err(|message| EmbedError { message })?;
        if parsed.vectors.len() != texts.len() {
            return Err(EmbedError {
                message: format!(
                    "service returned {} vectors for {} texts",
                    parsed.vectors.len(),
                    texts.len()
                ),
            });
        }
        Ok(parsed.vectors)
    }
}
