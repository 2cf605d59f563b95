//! Chat-completion decomposition agent with rule-based fallback.

use std::time::Duration;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::text::{decompose_rules, DecomposedPrompt, Source, MAX_PARTS};

pub const SYSTEM_PROMPT: &str = "You are a highly specialized assistant designed to analyze and process textual descriptions of human actions. Your primary function is to decompose these descriptions into fine-grained actions arranged chronologically. Focus on detecting and interpreting sequence markers like 'then,' 'twice,' 'again,' and other words indicating repetitions or transitions. Ensure that your decomposition explicitly outlines: 1. The initial state of the posture or action. 2. Detailed intermediate steps. 3. The final state.";

pub const ENV_ENDPOINT: &str = "KINETA_LLM_ENDPOINT";
pub const ENV_KEY: &str = "KINETA_LLM_KEY";
pub const ENV_MODEL: &str = "KINETA_LLM_MODEL";
pub const DEFAULT_MODEL: &str = "gpt-4o-mini";

#[derive(Clone, Debug, PartialEq)]
pub struct LlmConfig {
    pub endpoint: String,
    pub key: String,
    pub model: String,
    pub retries: u32,
    pub backoff: Duration,
    pub timeout: Duration,
}

impl LlmConfig {
    pub fn new(endpoint: impl Into<String>, key: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            key: key.into(),
            model: DEFAULT_MODEL.into(),
            retries: 3,
            backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(30),
        }
    }

    /// Reads endpoint and key from the environment. `None` when either is unset.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var(ENV_ENDPOINT).ok().filter(|s| !s.is_empty())?;
        let key = std::env::var(ENV_KEY).ok().filter(|s| !s.is_empty())?;
        let mut cfg = Self::new(endpoint, key);
        if let Ok(model) = std::env::var(ENV_MODEL) {
            if !model.is_empty() {
                cfg.model = model;
            }
        }
        Some(cfg)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    /// Worth retrying: timeouts, connection resets, 429 and 5xx.
    #[error("transient: {0}")]
    Transient(String),
    #[error("{0}")]
    Permanent(String),
}

/// Sends one chat-completion request body and returns the parsed JSON reply.
pub trait ChatTransport {
    fn send(&self, cfg: &LlmConfig, body: &Value) -> std::result::Result<Value, TransportError>;
}

pub struct HttpTransport;

impl ChatTransport for HttpTransport {
    fn send(&self, cfg: &LlmConfig, body: &Value) -> std::result::Result<Value, TransportError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .build()
            .into();
        let resp = agent
            .post(&cfg.endpoint)
            .header("Authorization", format!("Bearer {}", cfg.key))
            .send_json(body);
        match resp {
            Ok(mut r) => r
                .body_mut()
                .read_json::<Value>()
                .map_err(|e| TransportError::Permanent(format!("reply is not JSON: {e}"))),
            Err(ureq::Error::StatusCode(code)) if code == 429 || code >= 500 => {
                Err(TransportError::Transient(format!("http status {code}")))
            }
            Err(ureq::Error::StatusCode(code)) => Err(TransportError::Permanent(format!("http status {code}"))),
            Err(e @ (ureq::Error::Timeout(_) | ureq::Error::Io(_) | ureq::Error::ConnectionFailed)) => {
                Err(TransportError::Transient(e.to_string()))
            }
            Err(e) => Err(TransportError::Permanent(e.to_string())),
        }
    }
}

pub(crate) fn request_body(cfg: &LlmConfig, full_text: &str) -> Value {
    json!({
        "model": cfg.model,
        "temperature": 0,
        "messages": [
            {"role": "system", "content": SYSTEM_PROMPT},
            {"role": "user", "content": full_text},
        ],
    })
}

/// Parses a reply of the form `1. A 2. B 3. C`, inline or one item per line.
///
/// Items must be numbered consecutively from 1 with `.` or `)`. Items past
/// the twentieth are dropped. Returns `None` if no item is found.
pub fn parse_numbered_list(reply: &str) -> Option<Vec<String>> {
    // Find each marker `k.` or `k)` that starts at a word boundary, where k
    // is the next expected number.
    let bytes = reply.as_bytes();
    let mut markers: Vec<(usize, usize)> = Vec::new(); // (marker start, content start)
    let mut expected = 1usize;
    let mut i = 0;
    while i < bytes.len() {
        let at_boundary = i == 0 || bytes[i - 1].is_ascii_whitespace();
        if at_boundary && bytes[i].is_ascii_digit() {
            let mut j = i;
            while j < bytes.len() && bytes[j].is_ascii_digit() {
                j += 1;
            }
            let followed = j < bytes.len() && (bytes[j] == b'.' || bytes[j] == b')');
            let spaced = j + 1 >= bytes.len() || bytes[j + 1].is_ascii_whitespace();
            if followed && spaced && reply[i..j].parse::<usize>().ok() == Some(expected) {
                markers.push((i, j + 1));
                expected += 1;
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    if markers.is_empty() {
        return None;
    }
    let mut items = Vec::new();
    for (k, &(_, start)) in markers.iter().enumerate() {
        let end = markers.get(k + 1).map_or(reply.len(), |m| m.0);
        let item = reply[start..end].trim().trim_end_matches(',').trim();
        if item.is_empty() {
            return None;
        }
        items.push(item.to_string());
    }
    items.truncate(MAX_PARTS);
    Some(items)
}

fn reply_content(reply: &Value) -> Option<&str> {
    reply.pointer("/choices/0/message/content")?.as_str()
}

/// Decomposes with the chat agent, falling back to rules on any failure.
///
/// `cfg = None` (no endpoint configured) goes straight to the fallback.
pub fn decompose_llm(
    full_text: &str,
    cfg: Option<&LlmConfig>,
    transport: &dyn ChatTransport,
) -> Result<DecomposedPrompt> {
    if full_text.trim().is_empty() {
        return Err(Error::validation("prompt text is empty"));
    }
    let Some(cfg) = cfg else {
        log::info!("no decomposition endpoint configured, using rules");
        return decompose_rules(full_text);
    };
    let body = request_body(cfg, full_text);
    let mut delay = cfg.backoff;
    let mut attempt = 0;
    let reply = loop {
        match transport.send(cfg, &body) {
            Ok(v) => break Some(v),
            Err(TransportError::Transient(msg)) if attempt < cfg.retries => {
                attempt += 1;
                log::warn!("decomposition request failed ({msg}), retry {attempt}/{}", cfg.retries);
                std::thread::sleep(delay);
                delay *= 2;
            }
            Err(e) => {
                log::warn!("decomposition request failed: {e}; falling back to rules");
                break None;
            }
        }
    };
    let parts = reply
        .as_ref()
        .and_then(reply_content)
        .and_then(parse_numbered_list);
    match parts {
        Some(parts) => DecomposedPrompt::new(full_text, parts, Source::Llm),
        None => {
            if reply.is_some() {
                log::warn!("decomposition reply could not be parsed; falling back to rules");
            }
            decompose_rules(full_text)
        }
    }
}
