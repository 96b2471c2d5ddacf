//! Client for an out-of-process hidden-state server (e.g. a Python process
//! hosting a transformer). Protocol:
//!
//! - `GET  {base}/v1/info`  -> `{model_id, layer_count, hidden_dim, concurrent_safe}`
//! - `POST {base}/v1/trace` with `{messages, interventions, decoding}`
//!   -> `{text, prompt_states, generated_states}` (`[layer][token][dim]`)

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ActivationBackend, ForwardTrace, Intervention};
use crate::chat::{ChatMessage, Decoding};
use crate::error::{Error, Result};

pub const ENV_BACKEND_URL: &str = "PERSONA_PROBE_BACKEND_URL";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendInfo {
    pub model_id: String,
    pub layer_count: usize,
    pub hidden_dim: usize,
    #[serde(default)]
    pub concurrent_safe: bool,
}

#[derive(Serialize)]
struct TraceRequest<'a> {
    messages: &'a [ChatMessage],
    interventions: &'a [Intervention],
    decoding: &'a Decoding,
}

#[derive(Deserialize)]
struct TraceResponse {
    text: String,
    prompt_states: Vec<Vec<Vec<f32>>>,
    #[serde(default)]
    generated_states: Vec<Vec<Vec<f32>>>,
}

pub struct RemoteBackend {
    base_url: String,
    info: BackendInfo,
    client: reqwest::blocking::Client,
}

impl RemoteBackend {
    pub fn connect(base_url: &str) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(600))
            .build()
            .map_err(|e| Error::Backend(e.to_string()))?;
        let base_url = base_url.trim_end_matches('/').to_string();
        let info: BackendInfo = client
            .get(format!("{base_url}/v1/info"))
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json())
            .map_err(|e| Error::Backend(format!("{base_url}: {e}")))?;
        Ok(RemoteBackend { base_url, info, client })
    }

    pub fn from_env() -> Result<Self> {
        let url = std::env::var(ENV_BACKEND_URL).map_err(|_| Error::Backend(format!("{ENV_BACKEND_URL} is not set")))?;
        Self::connect(&url)
    }
}

impl ActivationBackend for RemoteBackend {
    fn model_id(&self) -> &str {
        &self.info.model_id
    }

    fn layer_count(&self) -> usize {
        self.info.layer_count
    }

    fn hidden_dim(&self) -> usize {
        self.info.hidden_dim
    }

    fn concurrent_safe(&self) -> bool {
        self.info.concurrent_safe
    }

    fn trace(&self, messages: &[ChatMessage], interventions: &[Intervention], decoding: &Decoding) -> Result<ForwardTrace> {
        for iv in interventions {
            if iv.vector.len() != self.info.hidden_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.info.hidden_dim,
                    actual: iv.vector.len(),
                });
            }
        }
        let body = TraceRequest {
            messages,
            interventions,
            decoding,
        };
        let resp: TraceResponse = self
            .client
            .post(format!("{}/v1/trace", self.base_url))
            .json(&body)
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json())
            .map_err(|e| Error::Backend(e.to_string()))?;
        Ok(ForwardTrace {
            text: resp.text,
            prompt_states: resp.prompt_states,
            generated_states: resp.generated_states,
        })
    }
}
