//! Multimodal chat messages, backend descriptors and the call executor.
//!
//! Every model call in the harness goes through [`ChatClient`], which keys
//! requests into a content-addressed [`ResponseCache`], bounds concurrency and
//! request rate per backend, and retries transient transport failures.

mod adapters;
mod cache;
mod error;
mod executor;
mod key;
pub mod mock;
mod transport;

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use adapters::{GeminiTransport, OpenAiTransport};
pub use cache::{CacheEntry, CacheStats, CachedResponse, GcReport, ResponseCache};
pub use error::{ChatError, TransportError};
pub use executor::{mock_descriptor, ChatClient, RateLimiter, RetryPolicy, ScoreOutcome};
pub use key::{cache_key, canonical_request, CanonicalRequest};
pub use transport::{
    BackendRequest, BackendResponse, HarnessTransport, HealthInfo, Transport, WireGenerateRequest,
    WireGenerateResponse, WireMessage, WireParams, WirePart, WireScoreRequest, WireScoreResponse,
    WireUsage,
};

/// Reference to an image by location and content digest.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub uri: String,
    pub media_type: String,
    pub sha256: String,
}

const RASTER_TYPES: &[(&str, &str)] = &[
    ("png", "image/png"),
    ("jpg", "image/jpeg"),
    ("jpeg", "image/jpeg"),
    ("gif", "image/gif"),
    ("webp", "image/webp"),
    ("bmp", "image/bmp"),
    ("tif", "image/tiff"),
    ("tiff", "image/tiff"),
];

/// Maps a file extension to a raster media type.
pub fn media_type_for_path(path: &Path) -> Option<&'static str> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    RASTER_TYPES
        .iter()
        .find(|(e, _)| *e == ext)
        .map(|(_, mt)| *mt)
}

pub fn is_raster_media_type(media_type: &str) -> bool {
    RASTER_TYPES.iter().any(|(_, mt)| *mt == media_type)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl ImageRef {
    /// Builds a reference to a local file, hashing its current contents.
    pub fn from_path(path: &Path) -> Result<Self, ChatError> {
        let bytes = std::fs::read(path).map_err(|e| ChatError::ImageUnresolvable {
            uri: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let media_type = media_type_for_path(path).ok_or_else(|| ChatError::ImageUnresolvable {
            uri: path.display().to_string(),
            reason: "not a raster image extension".into(),
        })?;
        Ok(Self {
            uri: path.display().to_string(),
            media_type: media_type.to_string(),
            sha256: sha256_hex(&bytes),
        })
    }

    pub fn validate(&self) -> Result<(), ChatError> {
        let bad = |reason: &str| ChatError::InvalidMessage(format!("image {:?}: {reason}", self.uri));
        if self.uri.trim().is_empty() {
            return Err(bad("empty uri"));
        }
        if !is_raster_media_type(&self.media_type) {
            return Err(bad("media type is not a raster image type"));
        }
        if self.sha256.len() != 64 || !self.sha256.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(bad("sha256 must be 64 hex characters"));
        }
        Ok(())
    }

    /// Reads the referenced bytes and checks them against the recorded digest.
    pub fn load_verified(&self) -> Result<Vec<u8>, ChatError> {
        let path = self.uri.strip_prefix("file://").unwrap_or(&self.uri);
        let bytes = std::fs::read(path).map_err(|e| ChatError::ImageUnresolvable {
            uri: self.uri.clone(),
            reason: e.to_string(),
        })?;
        let actual = sha256_hex(&bytes);
        if !actual.eq_ignore_ascii_case(&self.sha256) {
            return Err(ChatError::ImageUnresolvable {
                uri: self.uri.clone(),
                reason: format!("digest mismatch: expected {}, found {actual}", self.sha256),
            });
        }
        Ok(bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum MessagePart {
    Text { text: String },
    Image { image: ImageRef },
}

impl MessagePart {
    pub fn text(s: impl Into<String>) -> Self {
        MessagePart::Text { text: s.into() }
    }

    pub fn image(image: ImageRef) -> Self {
        MessagePart::Image { image }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            MessagePart::Text { text } => Some(text),
            MessagePart::Image { .. } => None,
        }
    }

    pub fn as_image(&self) -> Option<&ImageRef> {
        match self {
            MessagePart::Image { image } => Some(image),
            MessagePart::Text { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One ordered multimodal turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<MessagePart>,
}

impl ChatMessage {
    pub fn new(role: Role, parts: Vec<MessagePart>) -> Self {
        Self { role, parts }
    }

    pub fn user(parts: Vec<MessagePart>) -> Self {
        Self::new(Role::User, parts)
    }

    pub fn user_text(text: impl Into<String>) -> Self {
        Self::user(vec![MessagePart::text(text)])
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageRef> {
        self.parts.iter().filter_map(MessagePart::as_image)
    }

    /// Concatenation of all text parts, joined by newlines.
    pub fn text(&self) -> String {
        self.parts
            .iter()
            .filter_map(MessagePart::as_text)
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn validate(&self) -> Result<(), ChatError> {
        if self.parts.is_empty() {
            return Err(ChatError::InvalidMessage(format!("{} message has no parts", self.role)));
        }
        for part in &self.parts {
            match part {
                MessagePart::Text { text } if text.trim().is_empty() => {
                    return Err(ChatError::InvalidMessage("empty text part".into()));
                }
                MessagePart::Image { image } => {
                    if self.role == Role::Assistant {
                        return Err(ChatError::InvalidMessage(
                            "assistant messages cannot carry images".into(),
                        ));
                    }
                    image.validate()?;
                }
                MessagePart::Text { .. } => {}
            }
        }
        Ok(())
    }
}

/// Sampling configuration sent with each call. Absent optionals defer to the backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
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

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            top_p: 1.0,
            top_k: None,
            max_tokens: 1024,
            beam_width: None,
            seed: None,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), ChatError> {
        let bad = |m: &str| Err(ChatError::InvalidParams(m.to_string()));
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad("temperature must be >= 0");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must be in (0, 1]");
        }
        if self.top_k == Some(0) {
            return bad("top_k must be >= 1");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be >= 1");
        }
        if self.beam_width == Some(0) {
            return bad("beam_width must be >= 1");
        }
        Ok(())
    }

    /// Named presets matching the published settings of the evaluated model families.
    pub fn preset(name: &str) -> Option<ParamsOverride> {
        match name {
            "gemini" => Some(ParamsOverride {
                temperature: Some(0.4),
                top_k: Some(32),
                top_p: Some(1.0),
                max_tokens: Some(4096),
                ..Default::default()
            }),
            "openflamingo" => Some(ParamsOverride {
                beam_width: Some(3),
                ..Default::default()
            }),
            "mmicl" => Some(ParamsOverride {
                beam_width: Some(8),
                ..Default::default()
            }),
            "default" => Some(ParamsOverride::default()),
            _ => None,
        }
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["default", "gemini", "openflamingo", "mmicl"]
    }

    pub fn apply(&mut self, o: &ParamsOverride) {
        if let Some(v) = o.temperature {
            self.temperature = v;
        }
        if let Some(v) = o.top_p {
            self.top_p = v;
        }
        if o.top_k.is_some() {
            self.top_k = o.top_k;
        }
        if let Some(v) = o.max_tokens {
            self.max_tokens = v;
        }
        if o.beam_width.is_some() {
            self.beam_width = o.beam_width;
        }
        if o.seed.is_some() {
            self.seed = o.seed;
        }
    }
}

/// A partial [`GenerationParams`], used to layer presets, config files and flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beam_width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Capability {
    Generate,
    Score,
}

/// Which wire protocol a backend speaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    /// The harness's own `/v1/generate` + `/v1/score` contract.
    #[default]
    Harness,
    /// OpenAI-compatible `/v1/chat/completions`.
    Openai,
    /// Google `generateContent`.
    Gemini,
    /// In-process deterministic mock, see [`mock::MockPolicy`].
    Mock,
}

fn default_rate_limit() -> u32 {
    60
}

fn default_in_flight() -> u32 {
    4
}

fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendDescriptor {
    pub id: String,
    #[serde(default)]
    pub endpoint: String,
    /// Model name forwarded on the wire; defaults to `id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default)]
    pub adapter: AdapterKind,
    pub capabilities: BTreeSet<Capability>,
    #[serde(default)]
    pub params: GenerationParams,
    /// Name of the environment variable holding the credential. Never the credential itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth: Option<String>,
    /// Requests per minute.
    #[serde(default = "default_rate_limit")]
    pub rate_limit: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<mock::MockSpec>,
}

impl BackendDescriptor {
    pub fn model_name(&self) -> &str {
        self.model.as_deref().unwrap_or(&self.id)
    }

    pub fn has(&self, cap: Capability) -> bool {
        self.capabilities.contains(&cap)
    }

    /// Environment variable consulted for this backend's credential.
    pub fn credential_env_var(&self) -> String {
        if let Some(name) = &self.auth {
            return name.clone();
        }
        let suffix: String = self
            .id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' })
            .collect();
        format!("COCOT_API_KEY_{suffix}")
    }

    pub fn credential(&self) -> Option<String> {
        std::env::var(self.credential_env_var()).ok().filter(|s| !s.is_empty())
    }

    pub fn validate(&self) -> Result<(), ChatError> {
        let bad = |m: String| Err(ChatError::InvalidDescriptor(m));
        if self.id.trim().is_empty() {
            return bad("backend id is empty".into());
        }
        if self.capabilities.is_empty() {
            return bad(format!("backend {}: capabilities must be non-empty", self.id));
        }
        if self.rate_limit == 0 {
            return bad(format!("backend {}: rate_limit must be >= 1", self.id));
        }
        if self.max_in_flight == 0 {
            return bad(format!("backend {}: max_in_flight must be >= 1", self.id));
        }
        match self.adapter {
            AdapterKind::Mock => {
                if self.mock.is_none() {
                    return bad(format!("backend {}: mock adapter needs a `mock` policy", self.id));
                }
            }
            _ => {
                if !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
                    return bad(format!("backend {}: endpoint must be an http(s) URL", self.id));
                }
            }
        }
        if matches!(self.adapter, AdapterKind::Openai | AdapterKind::Gemini) && self.has(Capability::Score) {
            return bad(format!("backend {}: {:?} adapter cannot score", self.id, self.adapter));
        }
        self.params.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

impl FinishReason {
    pub fn parse(s: &str) -> Self {
        match s.to_ascii_lowercase().as_str() {
            "stop" | "end_turn" | "eos" => FinishReason::Stop,
            "length" | "max_tokens" => FinishReason::Length,
            _ => FinishReason::Error,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt: u64,
    pub completion: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub finish_reason: FinishReason,
    pub latency_ms: u64,
    pub token_usage: Option<TokenUsage>,
    pub cached: bool,
    /// Transport attempts made; zero for cache hits.
    pub attempts: u32,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(sha: char) -> ImageRef {
        ImageRef {
            uri: "a.png".into(),
            media_type: "image/png".into(),
            sha256: std::iter::repeat(sha).take(64).collect(),
        }
    }

    #[test]
    fn assistant_messages_reject_images() {
        let m = ChatMessage::new(Role::Assistant, vec![MessagePart::image(img('a'))]);
        assert!(m.validate().is_err());
        let m = ChatMessage::new(Role::User, vec![MessagePart::image(img('a'))]);
        assert!(m.validate().is_ok());
    }

    #[test]
    fn empty_text_and_empty_parts_rejected() {
        assert!(ChatMessage::user(vec![]).validate().is_err());
        assert!(ChatMessage::user_text("  \n").validate().is_err());
    }

    #[test]
    fn image_ref_invariants() {
        let mut i = img('0');
        i.media_type = "application/pdf".into();
        assert!(i.validate().is_err());
        let mut i = img('0');
        i.sha256 = "abc".into();
        assert!(i.validate().is_err());
    }

    #[test]
    fn params_bounds() {
        let mut p = GenerationParams::default();
        assert!(p.validate().is_ok());
        p.top_p = 0.0;
        assert!(p.validate().is_err());
        p.top_p = 1.0;
        p.temperature = -0.1;
        assert!(p.validate().is_err());
        p.temperature = 0.4;
        p.top_k = Some(0);
        assert!(p.validate().is_err());
    }

    #[test]
    fn gemini_preset_matches_published_defaults() {
        let mut p = GenerationParams::default();
        p.apply(&GenerationParams::preset("gemini").unwrap());
        assert_eq!(p.temperature, 0.4);
        assert_eq!(p.top_k, Some(32));
        assert_eq!(p.top_p, 1.0);
        assert_eq!(p.max_tokens, 4096);
        let mut p = GenerationParams::default();
        p.apply(&GenerationParams::preset("mmicl").unwrap());
        assert_eq!(p.beam_width, Some(8));
        p.apply(&GenerationParams::preset("openflamingo").unwrap());
        assert_eq!(p.beam_width, Some(3));
    }

    #[test]
    fn credential_env_var_is_sanitized() {
        let d: BackendDescriptor = serde_json::from_str(
            r#"{"id":"gpt-4v.web","endpoint":"http://x","capabilities":["generate"]}"#,
        )
        .unwrap();
        assert_eq!(d.credential_env_var(), "COCOT_API_KEY_GPT_4V_WEB");
    }

    #[test]
    fn image_roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        std::fs::write(&p, b"pixels").unwrap();
        let r = ImageRef::from_path(&p).unwrap();
        assert_eq!(r.media_type, "image/png");
        assert_eq!(r.load_verified().unwrap(), b"pixels");
        std::fs::write(&p, b"tampered").unwrap();
        assert!(matches!(r.load_verified(), Err(ChatError::ImageUnresolvable { .. })));
    }
}
