//! OpenAI-compatible `/chat/completions` provider.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::provider::{flatten_system, CompletionProvider};
use crate::chat::{ChatMessage, Decoding};
use crate::error::{Error, Result};

pub const ENV_API_KEY: &str = "PROVIDER_API_KEY";
pub const ENV_BASE_URL: &str = "PROVIDER_BASE_URL";

pub struct OpenAiCompatProvider {
    base_url: String,
    api_key: Option<String>,
    model: String,
    system_role: bool,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    max_tokens: usize,
    temperature: f32,
    seed: u64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    content: Option<String>,
}

impl OpenAiCompatProvider {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, model: impl Into<String>) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| Error::Provider(e.to_string()))?;
        Ok(OpenAiCompatProvider {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            model: model.into(),
            system_role: true,
            client,
        })
    }

    /// Reads `PROVIDER_BASE_URL` (required) and `PROVIDER_API_KEY` (optional).
    pub fn from_env(model: impl Into<String>) -> Result<Self> {
        let base = std::env::var(ENV_BASE_URL)
            .map_err(|_| Error::Provider(format!("{ENV_BASE_URL} is not set")))?;
        Self::new(base, std::env::var(ENV_API_KEY).ok(), model)
    }

    pub fn with_system_role(mut self, supported: bool) -> Self {
        self.system_role = supported;
        self
    }
}

impl CompletionProvider for OpenAiCompatProvider {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn supports_system_role(&self) -> bool {
        self.system_role
    }

    fn generate(&self, messages: &[ChatMessage], decoding: &Decoding) -> Result<String> {
        let flattened;
        let messages = if self.system_role {
            messages
        } else {
            flattened = flatten_system(messages);
            &flattened
        };
        let body = ChatRequest {
            model: &self.model,
            messages,
            max_tokens: decoding.max_tokens,
            temperature: decoding.temperature,
            seed: decoding.seed,
        };
        let mut req = self
            .client
            .post(format!("{}/chat/completions", self.base_url))
            .json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::Provider(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(Error::Provider(format!("HTTP {status}: {text}")));
        }
        let parsed: ChatResponse = resp.json().map_err(|e| Error::Provider(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Error::Provider("response has no choices".into()))
    }
}
