use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{CompletionRequest, Provider, ProviderError};

pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1/chat/completions";
pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";

/// Chat-completions client for OpenAI-compatible endpoints.
pub struct HttpProvider {
    endpoint: String,
    api_key: String,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

impl HttpProvider {
    pub fn new(endpoint: impl Into<String>, api_key: impl Into<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        Self {
            endpoint: endpoint.into(),
            api_key: api_key.into(),
            agent: ureq::Agent::new_with_config(config),
        }
    }

    /// Reads the credential from the named environment variable.
    pub fn from_env(endpoint: impl Into<String>, key_var: &str) -> Result<Self, ProviderError> {
        let key = std::env::var(key_var)
            .map_err(|_| ProviderError::Auth(format!("environment variable {key_var} is not set")))?;
        Ok(Self::new(endpoint, key, Duration::from_secs(300)))
    }
}

fn body_for(request: &CompletionRequest) -> serde_json::Value {
    json!({
        "model": request.model_id,
        "messages": [
            { "role": "system", "content": request.system_text },
            { "role": "user", "content": request.user_text },
        ],
        "temperature": request.temperature,
        "max_completion_tokens": request.max_completion_tokens,
    })
}

fn classify_status(status: u16, body: String) -> ProviderError {
    match status {
        401 | 403 => ProviderError::Auth(format!("http {status}: {body}")),
        408 | 409 | 429 => ProviderError::Transient(format!("http {status}")),
        s if s >= 500 => ProviderError::Transient(format!("http {status}")),
        _ => ProviderError::Fatal(format!("http {status}: {body}")),
    }
}

impl Provider for HttpProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body_for(request))
            .map_err(|e| ProviderError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(classify_status(status, body));
        }
        let parsed: ChatResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| ProviderError::Fatal(format!("unreadable response: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ProviderError::Fatal("response has no message content".into()))
    }
}
