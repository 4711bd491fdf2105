//! Blocking JSON POST with retry on transient failures.

use std::time::Duration;

use rand::Rng;
use serde_json::Value;

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Additional attempts after the first.
    pub retries: u32,
    pub base_delay: Duration,
    pub factor: f64,
    /// Fraction of the delay added as uniform random jitter.
    pub jitter: f64,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            base_delay: Duration::from_secs(1),
            factor: 2.0,
            jitter: 0.25,
            timeout: Duration::from_secs(60),
        }
    }
}

impl RetryPolicy {
    pub fn delay_for(&self, attempt: u32) -> Duration {
        let base = self.base_delay.as_secs_f64() * self.factor.powi(attempt as i32);
        let jitter = if self.jitter > 0.0 {
            rand::thread_rng().gen_range(0.0..=self.jitter) * base
        } else {
            0.0
        };
        Duration::from_secs_f64(base + jitter)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HttpError {
    /// Transport failure or retryable status that persisted through retries.
    #[error("unavailable after {attempts} attempt(s): {message}")]
    Unavailable { attempts: u32, message: String },
    /// Non-retryable status or undecodable body.
    #[error("rejected: {0}")]
    Rejected(String),
}

fn is_retryable(status: u16) -> bool {
    matches!(status, 408 | 429 | 500 | 502 | 503 | 504)
}

pub struct JsonClient {
    client: reqwest::blocking::Client,
    policy: RetryPolicy,
    api_key: Option<String>,
}

impl JsonClient {
    pub fn new(policy: RetryPolicy, api_key: Option<String>) -> Result<JsonClient, HttpError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(policy.timeout)
            .build()
            .map_err(|e| HttpError::Rejected(format!("client setup: {e}")))?;
        Ok(JsonClient {
            client,
            policy,
            api_key,
        })
    }

    pub fn post(&self, url: &str, body: &Value) -> Result<Value, HttpError> {
        let mut last = String::new();
        let attempts = self.policy.retries + 1;
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.policy.delay_for(attempt - 1);
                log::warn!("retrying {url} in {delay:?} after: {last}");
                std::thread::sleep(delay);
            }
            let mut request = self.client.post(url).json(body);
            if let Some(key) = &self.api_key {
                request = request.bearer_auth(key);
            }
            match request.send() {
                Ok(response) => {
                    let status = response.status().as_u16();
                    if response.status().is_success() {
                        return response
                            .json::<Value>()
                            .map_err(|e| HttpError::Rejected(format!("invalid JSON body: {e}")));
                    }
                    let text = response.text().unwrap_or_default();
                    if !is_retryable(status) {
                        return Err(HttpError::Rejected(format!("status {status}: {text}")));
                    }
                    last = format!("status {status}");
                }
                Err(err) => last = err.to_string(),
            }
        }
        Err(HttpError::Unavailable {
            attempts,
            message: last,
        })
    }
}
