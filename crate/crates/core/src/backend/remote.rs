use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, ModelRequest, ModelResponse, TokenTable};
use crate::error::{Error, Result};

/// Settings for a chat-completions style endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key, if any.
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
    pub system_prompt: Option<String>,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "default".into(),
            api_key_env: None,
            timeout_secs: 120,
            max_in_flight: 4,
            max_attempts: 3,
            backoff_base_ms: 500,
            backoff_max_ms: 8_000,
            system_prompt: None,
        }
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

struct SlotGuard<'a>(&'a Slots);

impl Slots {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().expect("slot lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("slot lock");
        }
        *free -= 1;
        SlotGuard(self)
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("slot lock") += 1;
        self.0.cv.notify_one();
    }
}

enum Attempt {
    Done(ModelResponse),
    Retry(String),
    Fatal(Error),
}

/// HTTP client for an OpenAI-compatible chat endpoint.
///
/// Transient failures (connection errors, timeouts, 408, 429, 5xx) are
/// retried with exponential backoff up to `max_attempts` in total. The
/// request body is serialized once and resent unchanged.
pub struct RemoteBackend {
    config: RemoteConfig,
    api_key: Option<String>,
    tokens: TokenTable,
    client: reqwest::blocking::Client,
    slots: Slots,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig, tokens: TokenTable) -> Result<Self> {
        if config.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be at least 1".into()));
        }
        reqwest::Url::parse(&config.endpoint)
            .map_err(|e| Error::Config(format!("bad endpoint {:?}: {e}", config.endpoint)))?;
        let api_key = match &config.api_key_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| Error::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        let slots = Slots::new(config.max_in_flight);
        Ok(Self {
            config,
            api_key,
            tokens,
            client,
            slots,
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    /// The JSON body sent for `request`.
    pub fn wire_body(&self, request: &ModelRequest) -> Value {
        let mut content = vec![json!({ "type": "text", "text": request.instruction() })];
        for img in request.images() {
            let b64 = base64::engine::general_purpose::STANDARD.encode(img.bytes());
            content.push(json!({
                "type": "image_url",
                "image_url": { "url": format!("data:{};base64,{b64}", img.mime_type()) }
            }));
        }
        let mut messages = Vec::new();
        if let Some(system) = &self.config.system_prompt {
            messages.push(json!({ "role": "system", "content": system }));
        }
        messages.push(json!({ "role": "user", "content": content }));
        json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": request.decode().temperature(),
            "max_tokens": request.decode().max_output_tokens,
        })
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .config
            .backoff_base_ms
            .saturating_mul(1u64 << (attempt - 1).min(20))
            .min(self.config.backoff_max_ms);
        Duration::from_millis(ms)
    }

    fn attempt(&self, body: &[u8], request: &ModelRequest) -> Attempt {
        let mut req = self
            .client
            .post(&self.config.endpoint)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_vec());
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status();
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        if status.is_server_error() || status.as_u16() == 408 || status.as_u16() == 429 {
            return Attempt::Retry(format!("HTTP {status}: {}", truncate(&text)));
        }
        if !status.is_success() {
            return Attempt::Fatal(Error::Capability(format!(
                "HTTP {status}: {}",
                truncate(&text)
            )));
        }
        match self.parse_response(&text, request) {
            Ok(r) => Attempt::Done(r),
            Err(e) => Attempt::Fatal(e),
        }
    }

    fn parse_response(&self, body: &str, request: &ModelRequest) -> Result<ModelResponse> {
        let v: Value = serde_json::from_str(body)
            .map_err(|e| Error::Capability(format!("endpoint returned non-JSON body: {e}")))?;
        let text = v
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| {
                Error::Capability(format!(
                    "no choices[0].message.content in response: {}",
                    truncate(body)
                ))
            })?
            .to_owned();
        let image_est = self.tokens.request_image_tokens(request)?;
        let usage_in = v.pointer("/usage/prompt_tokens").and_then(Value::as_u64);
        let usage_out = v
            .pointer("/usage/completion_tokens")
            .and_then(Value::as_u64);
        let (prompt, image) = match usage_in {
            // the endpoint reports one input total; split off the estimated image share
            Some(total) => (total.saturating_sub(image_est), image_est.min(total)),
            None => (TokenTable::text_tokens(request.instruction()), image_est),
        };
        Ok(ModelResponse {
            output_token_count: usage_out.unwrap_or_else(|| TokenTable::text_tokens(&text)),
            prompt_token_count: prompt,
            image_token_count: image,
            estimated: true,
            text,
        })
    }
}

fn truncate(s: &str) -> String {
    const MAX: usize = 300;
    if s.len() <= MAX {
        return s.to_owned();
    }
    let mut end = MAX;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}...", &s[..end])
}

impl Backend for RemoteBackend {
    fn name(&self) -> &str {
        &self.config.model
    }

    fn invoke(&self, request: &ModelRequest) -> Result<ModelResponse> {
        let body = serde_json::to_vec(&self.wire_body(request)).expect("JSON body");
        let _slot = self.slots.acquire();
        let mut last = String::new();
        for attempt in 1..=self.config.max_attempts {
            match self.attempt(&body, request) {
                Attempt::Done(r) => return Ok(r),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(msg) => {
                    tracing::warn!(attempt, endpoint = %self.config.endpoint, "transient backend failure: {msg}");
                    last = msg;
                    if attempt < self.config.max_attempts {
                        std::thread::sleep(self.backoff(attempt));
                    }
                }
            }
        }
        Err(Error::BackendUnavailable {
            attempts: self.config.max_attempts,
            message: last,
        })
    }
}
