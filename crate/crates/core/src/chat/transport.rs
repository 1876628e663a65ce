//! Backend transports and the harness's native HTTP wire contract.

use std::time::Duration;

use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{ChatMessage, FinishReason, GenerationParams, MessagePart, TokenUsage, TransportError};

/// Everything a transport needs to issue one call.
#[derive(Debug, Clone, Copy)]
pub struct BackendRequest<'a> {
    pub model: &'a str,
    pub messages: &'a [ChatMessage],
    pub params: &'a GenerationParams,
    pub continuation: Option<&'a str>,
    pub credential: Option<&'a str>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    pub usage: Option<TokenUsage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthInfo {
    pub mode: String,
    pub model: String,
    #[serde(default)]
    pub capabilities: Vec<String>,
}

/// One attempt against a backend. Retries, caching and rate limits live above this.
pub trait Transport: Send + Sync {
    fn generate(&self, req: &BackendRequest<'_>) -> Result<BackendResponse, TransportError>;

    fn score(&self, req: &BackendRequest<'_>) -> Result<f64, TransportError>;

    fn health(&self) -> Result<HealthInfo, TransportError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireGenerateRequest {
    pub model: String,
    pub messages: Vec<WireMessage>,
    pub params: WireParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireScoreRequest {
    pub model: String,
    pub messages: Vec<WireMessage>,
    pub params: WireParams,
    pub continuation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    pub role: String,
    pub parts: Vec<WirePart>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum WirePart {
    Text { text: String },
    Image { media_type: String, data_base64: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireParams {
    pub temperature: f64,
    pub top_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<u32>,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beam_width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl From<&GenerationParams> for WireParams {
    fn from(p: &GenerationParams) -> Self {
        Self {
            temperature: p.temperature,
            top_p: p.top_p,
            top_k: p.top_k,
            max_tokens: p.max_tokens,
            beam_width: p.beam_width,
            seed: p.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireUsage {
    pub prompt: u64,
    pub completion: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireGenerateResponse {
    pub text: String,
    pub finish_reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<WireUsage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireScoreResponse {
    pub logprob: f64,
}

/// Reads and base64-encodes an image, verifying its digest.
pub(crate) fn encode_image(image: &super::ImageRef) -> Result<String, TransportError> {
    let bytes = image.load_verified().map_err(|e| match e {
        super::ChatError::ImageUnresolvable { uri, reason } => TransportError::Image { uri, reason },
        other => TransportError::Image { uri: image.uri.clone(), reason: other.to_string() },
    })?;
    Ok(base64::engine::general_purpose::STANDARD.encode(bytes))
}

pub fn wire_messages(messages: &[ChatMessage]) -> Result<Vec<WireMessage>, TransportError> {
    messages
        .iter()
        .map(|m| {
            let parts = m
                .parts
                .iter()
                .map(|p| match p {
                    MessagePart::Text { text } => Ok(WirePart::Text { text: text.clone() }),
                    MessagePart::Image { image } => Ok(WirePart::Image {
                        media_type: image.media_type.clone(),
                        data_base64: encode_image(image)?,
                    }),
                })
                .collect::<Result<Vec<_>, TransportError>>()?;
            Ok(WireMessage { role: m.role.as_str().to_string(), parts })
        })
        .collect()
}

/// Thin blocking JSON-over-HTTP helper shared by the adapters.
#[derive(Clone)]
pub(crate) struct HttpJson {
    agent: ureq::Agent,
}

impl HttpJson {
    pub(crate) fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent }
    }

    fn map_err(e: ureq::Error) -> TransportError {
        match e {
            ureq::Error::Timeout(_) => TransportError::Timeout,
            ureq::Error::StatusCode(status) => TransportError::Status { status, body: String::new() },
            ureq::Error::Io(e) if e.kind() == std::io::ErrorKind::TimedOut => TransportError::Timeout,
            ureq::Error::Io(e) => TransportError::Connect(e.to_string()),
            ureq::Error::HostNotFound | ureq::Error::ConnectionFailed => {
                TransportError::Connect(e.to_string())
            }
            other => TransportError::Protocol(other.to_string()),
        }
    }

    fn finish<R: DeserializeOwned>(
        resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    ) -> Result<R, TransportError> {
        let mut resp = resp.map_err(Self::map_err)?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(Self::map_err)?;
        if !(200..300).contains(&status) {
            return Err(TransportError::Status { status, body });
        }
        serde_json::from_str(&body).map_err(|e| TransportError::Protocol(format!("{e}: {body}")))
    }

    pub(crate) fn post<B: Serialize, R: DeserializeOwned>(
        &self,
        url: &str,
        headers: &[(&str, String)],
        body: &B,
    ) -> Result<R, TransportError> {
        let mut req = self.agent.post(url);
        for (k, v) in headers {
            req = req.header(*k, v);
        }
        Self::finish(req.send_json(body))
    }

    pub(crate) fn get<R: DeserializeOwned>(
        &self,
        url: &str,
        headers: &[(&str, String)],
    ) -> Result<R, TransportError> {
        let mut req = self.agent.get(url);
        for (k, v) in headers {
            req = req.header(*k, v);
        }
        Self::finish(req.call())
    }
}

fn bearer(credential: Option<&str>) -> Vec<(&'static str, String)> {
    credential
        .map(|c| vec![("Authorization", format!("Bearer {c}"))])
        .unwrap_or_default()
}

/// Speaks `POST /v1/generate`, `POST /v1/score` and `GET /health`.
pub struct HarnessTransport {
    base: String,
    http: HttpJson,
    credential: Option<String>,
}

impl HarnessTransport {
    pub fn new(endpoint: &str, timeout: Duration, credential: Option<String>) -> Self {
        Self {
            base: endpoint.trim_end_matches('/').to_string(),
            http: HttpJson::new(timeout),
            credential,
        }
    }
}

impl Transport for HarnessTransport {
    fn generate(&self, req: &BackendRequest<'_>) -> Result<BackendResponse, TransportError> {
        let body = WireGenerateRequest {
            model: req.model.to_string(),
            messages: wire_messages(req.messages)?,
            params: req.params.into(),
        };
        let cred = req.credential.or(self.credential.as_deref());
        let resp: WireGenerateResponse =
            self.http.post(&format!("{}/v1/generate", self.base), &bearer(cred), &body)?;
        Ok(BackendResponse {
            text: resp.text,
            finish_reason: FinishReason::parse(&resp.finish_reason),
            usage: resp.usage.map(|u| TokenUsage { prompt: u.prompt, completion: u.completion }),
        })
    }

    fn score(&self, req: &BackendRequest<'_>) -> Result<f64, TransportError> {
        let body = WireScoreRequest {
            model: req.model.to_string(),
            messages: wire_messages(req.messages)?,
            params: req.params.into(),
            continuation: req.continuation.unwrap_or_default().to_string(),
        };
        let cred = req.credential.or(self.credential.as_deref());
        let resp: WireScoreResponse =
            self.http.post(&format!("{}/v1/score", self.base), &bearer(cred), &body)?;
        if !resp.logprob.is_finite() && resp.logprob != f64::NEG_INFINITY {
            return Err(TransportError::Protocol(format!("non-finite logprob {}", resp.logprob)));
        }
        Ok(resp.logprob)
    }

    fn health(&self) -> Result<HealthInfo, TransportError> {
        self.http.get(&format!("{}/health", self.base), &bearer(self.credential.as_deref()))
    }
}
