use serde_json::json;

use super::{Backend, ChatRequest, GatewayError};
use crate::http::{HttpError, JsonClient, RetryPolicy};

pub const API_KEY_ENV: &str = "COEVO_API_KEY";

/// OpenAI-style chat-completions client.
pub struct LiveBackend {
    client: JsonClient,
    url: String,
    model: String,
}

impl LiveBackend {
    pub fn new(
        base_url: &str,
        model: &str,
        api_key: Option<String>,
        policy: RetryPolicy,
    ) -> Result<Self, GatewayError> {
        let client = JsonClient::new(policy, api_key)
            .map_err(|e| GatewayError::BackendUnavailable(e.to_string()))?;
        Ok(LiveBackend {
            client,
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            model: model.to_string(),
        })
    }
}

impl Backend for LiveBackend {
    fn id(&self) -> String {
        format!("live:{}", self.model)
    }

    fn complete(&self, request: &ChatRequest, _seq: u64) -> Result<String, GatewayError> {
        let body = json!({
            "model": self.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let reply = self.client.post(&self.url, &body).map_err(|e| match e {
            HttpError::Unavailable { .. } => GatewayError::BackendUnavailable(e.to_string()),
            HttpError::Rejected(msg) => GatewayError::BackendUnavailable(msg),
        })?;
        reply["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| {
                GatewayError::BackendUnavailable("no choices[0].message.content in reply".into())
            })
    }

    fn concurrent(&self) -> bool {
        true
    }

    fn measures_latency(&self) -> bool {
        true
    }
}
