//! Canonical request serialization and cache keys.

use serde::{Deserialize, Serialize};

use super::{sha256_hex, ChatMessage, GenerationParams, MessagePart, Role};

const KEY_SCHEMA_VERSION: u32 = 1;

/// Fixed-field-order form of a call. Images appear only as their digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalRequest {
    pub v: u32,
    pub backend: String,
    pub params: CanonicalParams,
    pub messages: Vec<CanonicalMessage>,
    pub continuation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalParams {
    pub temperature: String,
    pub top_p: String,
    pub top_k: Option<u32>,
    pub max_tokens: u32,
    pub beam_width: Option<u32>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalMessage {
    pub role: Role,
    pub parts: Vec<CanonicalPart>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum CanonicalPart {
    Text { text: String },
    Image { sha256: String },
}

/// Nine significant digits in scientific notation.
fn canonical_float(x: f64) -> String {
    let x = if x == 0.0 { 0.0 } else { x };
    format!("{x:.8e}")
}

pub fn canonical_request(
    backend_id: &str,
    params: &GenerationParams,
    messages: &[ChatMessage],
    continuation: Option<&str>,
) -> CanonicalRequest {
    CanonicalRequest {
        v: KEY_SCHEMA_VERSION,
        backend: backend_id.to_string(),
        params: CanonicalParams {
            temperature: canonical_float(params.temperature),
            top_p: canonical_float(params.top_p),
            top_k: params.top_k,
            max_tokens: params.max_tokens,
            beam_width: params.beam_width,
            seed: params.seed,
        },
        messages: messages
            .iter()
            .map(|m| CanonicalMessage {
                role: m.role,
                parts: m
                    .parts
                    .iter()
                    .map(|p| match p {
                        MessagePart::Text { text } => CanonicalPart::Text { text: text.clone() },
                        MessagePart::Image { image } => CanonicalPart::Image {
                            sha256: image.sha256.to_ascii_lowercase(),
                        },
                    })
                    .collect(),
            })
            .collect(),
        continuation: continuation.map(str::to_string),
    }
}

/// SHA-256 hex digest of the canonical serialization.
pub fn cache_key(
    backend_id: &str,
    params: &GenerationParams,
    messages: &[ChatMessage],
    continuation: Option<&str>,
) -> String {
    let canonical = canonical_request(backend_id, params, messages, continuation);
    let bytes = serde_json::to_vec(&canonical).expect("canonical request serializes");
    sha256_hex(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chat::ImageRef;

    fn img(uri: &str, sha: &str) -> ImageRef {
        ImageRef {
            uri: uri.into(),
            media_type: "image/png".into(),
            sha256: sha.into(),
        }
    }

    fn msgs(a: ImageRef) -> Vec<ChatMessage> {
        vec![ChatMessage::user(vec![
            MessagePart::image(a),
            MessagePart::text("Which caption matches?"),
        ])]
    }

    const SHA: &str = "0f1e2d3c4b5a69788796a5b4c3d2e1f00f1e2d3c4b5a69788796a5b4c3d2e1f0";

    #[test]
    fn deterministic() {
        let p = GenerationParams::default();
        let m = msgs(img("x.png", SHA));
        assert_eq!(cache_key("b", &p, &m, None), cache_key("b", &p, &m, None));
    }

    #[test]
    fn temperature_is_keyed() {
        let m = msgs(img("x.png", SHA));
        let mut p = GenerationParams { temperature: 0.4, ..Default::default() };
        let a = cache_key("b", &p, &m, None);
        p.temperature = 0.0;
        assert_ne!(a, cache_key("b", &p, &m, None));
    }

    #[test]
    fn content_addressed_images() {
        // Reference serializer: what the canonical JSON must look like for
        // either uri, written out by hand.
        let expected = format!(
            concat!(
                r#"{{"v":1,"backend":"b","params":{{"temperature":"0.00000000e0","top_p":"1.00000000e0","#,
                r#""top_k":null,"max_tokens":1024,"beam_width":null,"seed":null}},"#,
                r#""messages":[{{"role":"user","parts":[{{"type":"image","sha256":"{}"}},"#,
                r#"{{"type":"text","text":"Which caption matches?"}}]}}],"continuation":null}}"#
            ),
            SHA
        );
        let oracle = sha256_hex(expected.as_bytes());
        let p = GenerationParams::default();
        let a = cache_key("b", &p, &msgs(img("one/x.png", SHA)), None);
        let b = cache_key("b", &p, &msgs(img("https://elsewhere/y.png", SHA)), None);
        assert_eq!(a, oracle);
        assert_eq!(b, oracle);
    }

    #[test]
    fn floats_rendered_with_nine_significant_digits() {
        assert_eq!(canonical_float(0.4), "4.00000000e-1");
        assert_eq!(canonical_float(-0.0), canonical_float(0.0));
        assert_eq!(canonical_float(0.1 + 0.2), canonical_float(0.3));
    }

    #[test]
    fn continuation_is_keyed() {
        let p = GenerationParams::default();
        let m = msgs(img("x.png", SHA));
        assert_ne!(cache_key("b", &p, &m, None), cache_key("b", &p, &m, Some("Yes")));
        assert_ne!(cache_key("b", &p, &m, Some("Yes")), cache_key("b", &p, &m, Some("No")));
    }
}
