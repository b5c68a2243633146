//! OpenAI-compatible chat-completion backend.
//!
//! Sends `POST {base_url}/chat/completions` with a single user message and
//! returns `choices[0].message.content`. The API key is read from the
//! environment variable named in [`BackendConfig::api_key_env`] and is never
//! logged.

use serde_json::{json, Value};

use super::{Backend, BackendConfig, BackendError, CompletionParams};

pub struct HttpChatBackend {
    agent: ureq::Agent,
    endpoint: String,
    api_key: Option<String>,
}

impl HttpChatBackend {
    pub fn new(config: &BackendConfig) -> Result<Self, BackendError> {
        let api_key = match &config.api_key_env {
            Some(var) => match std::env::var(var) {
                Ok(v) if !v.is_empty() => Some(v),
                _ => {
                    log::warn!("environment variable {var} is not set; sending requests without credentials");
                    None
                }
            },
            None => None,
        };
        let agent = ureq::AgentBuilder::new().timeout(config.timeout()).build();
        Ok(HttpChatBackend {
            agent,
            endpoint: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            api_key,
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

fn is_retryable(status: u16) -> bool {
    status == 408 || status == 409 || status == 429 || status >= 500
}

impl Backend for HttpChatBackend {
    fn complete(&self, prompt: &str, params: &CompletionParams<'_>) -> Result<String, BackendError> {
        let body = json!({
            "model": params.model_id,
            "temperature": params.temperature,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut request = self.agent.post(&self.endpoint).set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.set("Authorization", &format!("Bearer {key}"));
        }
        let response = match request.send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::Status(code, r)) => {
                let detail = r.into_string().unwrap_or_default();
                let detail: String = detail.chars().take(300).collect();
                let msg = format!("HTTP {code}: {detail}");
                return Err(if is_retryable(code) {
                    BackendError::Transport(msg)
                } else {
                    BackendError::Fatal(msg)
                });
            }
            Err(e) => return Err(BackendError::Transport(e.to_string())),
        };
        let value: Value = response
            .into_json()
            .map_err(|e| BackendError::Transport(format!("unreadable response body: {e}")))?;
        value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Transport(format!("response without message content: {value}")))
    }
}
