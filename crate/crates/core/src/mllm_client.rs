//! Chat-completion client that runs the packaged planner prompt and returns
//! validated planner output.
//!
//! Requests go to `POST {base_url}/chat/completions` in the OpenAI-compatible
//! shape with a bearer key. Invalid replies are retried with the validator's
//! message appended as feedback. All clients in the process share one
//! in-flight counter, and each request waits until the counter is below its
//! config's `max_in_flight`.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::planner::{parse_planner_output, OutputError, PlannerOutput};

/// The planner system prompt, verbatim.
pub const SYSTEM_PROMPT: &str = include_str!("../resources/planner_system_prompt.txt");

/// SHA-256 of [`SYSTEM_PROMPT`], hex.
pub const SYSTEM_PROMPT_SHA256: &str = "ca2418d0873776d3e0c596c589ebc9a85b33c558a24f48662aa7583fc4710ec6";

pub const DEFAULT_API_KEY_ENV: &str = "SCOT_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    #[serde(alias = "baseUrl")]
    pub base_url: String,
    #[serde(alias = "modelName")]
    pub model_name: String,
    #[serde(default = "default_key_env", alias = "apiKeyEnvVar")]
    pub api_key_env_var: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Per-request timeout in seconds.
    #[serde(default = "default_timeout", alias = "timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries", alias = "maxRetries")]
    pub max_retries: u32,
    #[serde(default = "default_in_flight", alias = "maxInFlight")]
    pub max_in_flight: usize,
}

fn default_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}
fn default_temperature() -> f64 {
    0.2
}
fn default_timeout() -> u64 {
    120
}
fn default_retries() -> u32 {
    2
}
fn default_in_flight() -> usize {
    4
}

impl ClientConfig {
    pub fn new(base_url: &str, model_name: &str) -> Self {
        Self {
            base_url: base_url.to_string(),
            model_name: model_name.to_string(),
            api_key_env_var: default_key_env(),
            temperature: default_temperature(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            max_in_flight: default_in_flight(),
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        let bad = |s: &str| Err(ClientError::InvalidConfig(s.to_string()));
        if self.base_url.trim().is_empty() {
            return bad("base_url is empty");
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be at least 1");
        }
        if self.timeout_secs == 0 {
            return bad("timeout must be positive");
        }
        if !self.temperature.is_finite() {
            return bad("temperature must be finite");
        }
        Ok(())
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClientError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("environment variable {0} is not set")]
    MissingApiKey(String),
    #[error("invalid client config: {0}")]
    InvalidConfig(String),
    #[error("transport error{}: {detail}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Transport { status: Option<u16>, detail: String },
    #[error("planner output still invalid after retries: {0}")]
    InvalidAfterRetries(OutputError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    fn new(role: &str, content: impl Into<String>) -> Self {
        Self {
            role: role.to_string(),
            content: content.into(),
        }
    }
}

/// System message with the planner prompt, then the user prompt.
pub fn build_request(user_prompt: &str) -> Result<Vec<ChatMessage>, ClientError> {
    if user_prompt.trim().is_empty() {
        return Err(ClientError::EmptyPrompt);
    }
    Ok(vec![
        ChatMessage::new("system", SYSTEM_PROMPT),
        ChatMessage::new("user", user_prompt),
    ])
}

/// Feedback turn sent after an invalid reply.
pub fn feedback_message(err: &OutputError) -> String {
    format!("Your previous output was invalid: {err}; re-emit the JSON only")
}

// ---------------------------------------------------------------------------
// In-flight limit

static IN_FLIGHT: Mutex<usize> = Mutex::new(0);
static SLOT_FREED: Condvar = Condvar::new();

struct Slot;

impl Slot {
    fn acquire(cap: usize) -> Slot {
        let mut n = IN_FLIGHT.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= cap {
            n = SLOT_FREED.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        Slot
    }
}

impl Drop for Slot {
    fn drop(&mut self) {
        let mut n = IN_FLIGHT.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        SLOT_FREED.notify_all();
    }
}

// ---------------------------------------------------------------------------
// Client

/// Blocking client; cheap to clone and safe to share across threads.
#[derive(Clone)]
pub struct PlannerClient {
    config: ClientConfig,
    api_key: String,
    agent: ureq::Agent,
}

impl std::fmt::Debug for PlannerClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PlannerClient").field("config", &self.config).finish_non_exhaustive()
    }
}

impl PlannerClient {
    /// Reads the key from `config.api_key_env_var`.
    pub fn new(config: ClientConfig) -> Result<Self, ClientError> {
        let key = std::env::var(&config.api_key_env_var)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| ClientError::MissingApiKey(config.api_key_env_var.clone()))?;
        Self::with_api_key(config, key)
    }

    pub fn with_api_key(config: ClientConfig, api_key: impl Into<String>) -> Result<Self, ClientError> {
        config.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            config,
            api_key: api_key.into(),
            agent,
        })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    /// One chat-completion round trip; returns the first choice's text.
    pub fn complete(&self, messages: &[ChatMessage]) -> Result<String, ClientError> {
        let body = json!({
            "model": self.config.model_name,
            "messages": messages,
            "temperature": self.config.temperature,
        });
        let transport = |detail: String| ClientError::Transport { status: None, detail };
        let _slot = Slot::acquire(self.config.max_in_flight);
        let mut resp = self
            .agent
            .post(&self.config.endpoint())
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body)
            .map_err(|e| transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(ClientError::Transport {
                status: Some(status),
                detail: text,
            });
        }
        let value: Value = serde_json::from_str(&text).map_err(|e| transport(format!("response is not JSON: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| transport("response has no choices[0].message.content".into()))
    }

    /// Ask the planner for a layout, retrying invalid replies with feedback.
    /// Sends at most `max_retries + 1` requests.
    pub fn request_plan(&self, user_prompt: &str) -> Result<PlannerOutput, ClientError> {
        let mut messages = build_request(user_prompt)?;
        let mut last = None;
        for _ in 0..=self.config.max_retries {
            let reply = self.complete(&messages)?;
            match parse_planner_output(&reply) {
                Ok(out) => return Ok(out),
                Err(e) => {
                    messages.push(ChatMessage::new("assistant", reply));
                    messages.push(ChatMessage::new("user", feedback_message(&e)));
                    last = Some(e);
                }
            }
        }
        Err(ClientError::InvalidAfterRetries(last.expect("at least one attempt")))
    }
}

/// Convenience wrapper: key from the environment, then [`PlannerClient::request_plan`].
pub fn request_plan(config: &ClientConfig, user_prompt: &str) -> Result<PlannerOutput, ClientError> {
    build_request(user_prompt)?;
    PlannerClient::new(config.clone())?.request_plan(user_prompt)
}
