use std::time::Duration;

use serde_json::{json, Value};

use super::{BackendError, ChatBackend, Message, ModelEndpoint, SamplingParams};

/// OpenAI-compatible `/chat/completions` client.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(timeout: Duration) -> Result<Self, reqwest::Error> {
        let client = reqwest::blocking::Client::builder().timeout(timeout).build()?;
        Ok(HttpBackend { client })
    }
}

impl ChatBackend for HttpBackend {
    fn chat(
        &self,
        endpoint: &ModelEndpoint,
        messages: &[Message],
        params: &SamplingParams,
        _sample_index: u32,
    ) -> Result<String, BackendError> {
        let url = format!("{}/chat/completions", endpoint.base_url.trim_end_matches('/'));
        let body = json!({
            "model": endpoint.model_id(),
            "messages": messages,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_tokens,
        });
        let mut request = self.client.post(&url).json(&body);
        if !endpoint.api_key_env.is_empty() {
            let key = std::env::var(&endpoint.api_key_env).map_err(|_| {
                BackendError::permanent(format!("environment variable {} is not set", endpoint.api_key_env))
            })?;
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| BackendError::transient(e.to_string()))?;
        let status = response.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = response.text().unwrap_or_default();
            return Err(BackendError::permanent(format!("HTTP {status}: {text}")));
        }
        let value: Value = response
            .json()
            .map_err(|e| BackendError::transient(format!("unreadable response body: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| BackendError::permanent(format!("response has no message content: {value}")))
    }
}
