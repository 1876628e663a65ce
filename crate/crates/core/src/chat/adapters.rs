//! Vendor API adapters. Both are generate-only.

use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use super::transport::{encode_image, BackendRequest, BackendResponse, HealthInfo, HttpJson, Transport};
use super::{ChatMessage, FinishReason, MessagePart, Role, TokenUsage, TransportError};

fn no_score() -> TransportError {
    TransportError::Protocol("adapter does not support scoring".into())
}

/// OpenAI-compatible `/v1/chat/completions`.
pub struct OpenAiTransport {
    base: String,
    http: HttpJson,
}

impl OpenAiTransport {
    pub fn new(endpoint: &str, timeout: Duration) -> Self {
        Self { base: endpoint.trim_end_matches('/').to_string(), http: HttpJson::new(timeout) }
    }

    pub fn request_body(req: &BackendRequest<'_>) -> Result<Value, TransportError> {
        let messages = req
            .messages
            .iter()
            .map(openai_message)
            .collect::<Result<Vec<_>, _>>()?;
        let mut body = json!({
            "model": req.model,
            "messages": messages,
            "temperature": req.params.temperature,
            "top_p": req.params.top_p,
            "max_tokens": req.params.max_tokens,
        });
        if let Some(seed) = req.params.seed {
            body["seed"] = json!(seed);
        }
        Ok(body)
    }

    pub fn parse_response(v: &Value) -> Result<BackendResponse, TransportError> {
        #[derive(Deserialize)]
        struct Resp {
            choices: Vec<Choice>,
            usage: Option<Usage>,
        }
        #[derive(Deserialize)]
        struct Choice {
            message: Msg,
            finish_reason: Option<String>,
        }
        #[derive(Deserialize)]
        struct Msg {
            content: Option<Value>,
        }
        #[derive(Deserialize)]
        struct Usage {
            prompt_tokens: u64,
            completion_tokens: u64,
        }
        let r: Resp = serde_json::from_value(v.clone()).map_err(|e| TransportError::Protocol(e.to_string()))?;
        let choice = r
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| TransportError::Protocol("no choices".into()))?;
        // content is either a string or a list of {type:"text",text} parts
        let text = match choice.message.content {
            Some(Value::String(s)) => s,
            Some(Value::Array(parts)) => parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join(""),
            _ => String::new(),
        };
        Ok(BackendResponse {
            text,
            finish_reason: choice.finish_reason.as_deref().map(FinishReason::parse).unwrap_or(FinishReason::Stop),
            usage: r.usage.map(|u| TokenUsage { prompt: u.prompt_tokens, completion: u.completion_tokens }),
        })
    }
}

fn openai_message(m: &ChatMessage) -> Result<Value, TransportError> {
    let parts = m
        .parts
        .iter()
        .map(|p| match p {
            MessagePart::Text { text } => Ok(json!({"type": "text", "text": text})),
            MessagePart::Image { image } => Ok(json!({
                "type": "image_url",
                "image_url": {"url": format!("data:{};base64,{}", image.media_type, encode_image(image)?)}
            })),
        })
        .collect::<Result<Vec<_>, TransportError>>()?;
    Ok(json!({"role": m.role.as_str(), "content": parts}))
}

impl Transport for OpenAiTransport {
    fn generate(&self, req: &BackendRequest<'_>) -> Result<BackendResponse, TransportError> {
        let body = Self::request_body(req)?;
        let headers: Vec<(&str, String)> = req
            .credential
            .map(|c| vec![("Authorization", format!("Bearer {c}"))])
            .unwrap_or_default();
        let v: Value = self.http.post(&format!("{}/v1/chat/completions", self.base), &headers, &body)?;
        Self::parse_response(&v)
    }

    fn score(&self, _req: &BackendRequest<'_>) -> Result<f64, TransportError> {
        Err(no_score())
    }

    fn health(&self) -> Result<HealthInfo, TransportError> {
        Ok(HealthInfo { mode: "openai".into(), model: String::new(), capabilities: vec!["generate".into()] })
    }
}

/// Google `models/{model}:generateContent`.
pub struct GeminiTransport {
    base: String,
    http: HttpJson,
}

impl GeminiTransport {
    pub fn new(endpoint: &str, timeout: Duration) -> Self {
        Self { base: endpoint.trim_end_matches('/').to_string(), http: HttpJson::new(timeout) }
    }

    pub fn request_body(req: &BackendRequest<'_>) -> Result<Value, TransportError> {
        let mut contents = Vec::new();
        let mut system = Vec::new();
        for m in req.messages {
            let parts = m
                .parts
                .iter()
                .map(|p| match p {
                    MessagePart::Text { text } => Ok(json!({"text": text})),
                    MessagePart::Image { image } => Ok(json!({
                        "inline_data": {"mime_type": image.media_type, "data": encode_image(image)?}
                    })),
                })
                .collect::<Result<Vec<_>, TransportError>>()?;
            match m.role {
                Role::System => system.extend(parts),
                Role::User => contents.push(json!({"role": "user", "parts": parts})),
                Role::Assistant => contents.push(json!({"role": "model", "parts": parts})),
            }
        }
        let mut config = json!({
            "temperature": req.params.temperature,
            "topP": req.params.top_p,
            "maxOutputTokens": req.params.max_tokens,
        });
        if let Some(k) = req.params.top_k {
            config["topK"] = json!(k);
        }
        let mut body = json!({"contents": contents, "generationConfig": config});
        if !system.is_empty() {
            body["systemInstruction"] = json!({"parts": system});
        }
        Ok(body)
    }

    pub fn parse_response(v: &Value) -> Result<BackendResponse, TransportError> {
        let cand = v
            .get("candidates")
            .and_then(|c| c.get(0))
            .ok_or_else(|| TransportError::Protocol(format!("no candidates: {v}")))?;
        let text = cand
            .pointer("/content/parts")
            .and_then(Value::as_array)
            .map(|ps| ps.iter().filter_map(|p| p.get("text").and_then(Value::as_str)).collect::<String>())
            .unwrap_or_default();
        let finish_reason = match cand.get("finishReason").and_then(Value::as_str) {
            Some("STOP") | None => FinishReason::Stop,
            Some("MAX_TOKENS") => FinishReason::Length,
            Some(_) => FinishReason::Error,
        };
        let usage = v.get("usageMetadata").map(|u| TokenUsage {
            prompt: u.get("promptTokenCount").and_then(Value::as_u64).unwrap_or(0),
            completion: u.get("candidatesTokenCount").and_then(Value::as_u64).unwrap_or(0),
        });
        Ok(BackendResponse { text, finish_reason, usage })
    }
}

impl Transport for GeminiTransport {
    fn generate(&self, req: &BackendRequest<'_>) -> Result<BackendResponse, TransportError> {
        let body = Self::request_body(req)?;
        let headers: Vec<(&str, String)> = req
            .credential
            .map(|c| vec![("x-goog-api-key", c.to_string())])
            .unwrap_or_default();
        let url = format!("{}/v1beta/models/{}:generateContent", self.base, req.model);
        let v: Value = self.http.post(&url, &headers, &body)?;
        Self::parse_response(&v)
    }

    fn score(&self, _req: &BackendRequest<'_>) -> Result<f64, TransportError> {
        Err(no_score())
    }

    fn health(&self) -> Result<HealthInfo, TransportError> {
        Ok(HealthInfo { mode: "gemini".into(), model: String::new(), capabilities: vec!["generate".into()] })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chat::{GenerationParams, ImageRef};

    fn image_message(dir: &std::path::Path) -> ChatMessage {
        let p = dir.join("a.png");
        std::fs::write(&p, [1u8, 2, 3]).unwrap();
        ChatMessage::user(vec![MessagePart::image(ImageRef::from_path(&p).unwrap()), MessagePart::text("Q?")])
    }

    #[test]
    fn openai_body_uses_data_urls() {
        let dir = tempfile::tempdir().unwrap();
        let msgs = [image_message(dir.path())];
        let params = GenerationParams::default();
        let req = BackendRequest { model: "gpt", messages: &msgs, params: &params, continuation: None, credential: None };
        let body = OpenAiTransport::request_body(&req).unwrap();
        assert_eq!(body["messages"][0]["content"][0]["image_url"]["url"], "data:image/png;base64,AQID");
        assert_eq!(body["messages"][0]["content"][1]["text"], "Q?");
        let resp = OpenAiTransport::parse_response(&json!({
            "choices": [{"message": {"content": "(A)"}, "finish_reason": "length"}],
            "usage": {"prompt_tokens": 10, "completion_tokens": 2}
        }))
        .unwrap();
        assert_eq!(resp.text, "(A)");
        assert_eq!(resp.finish_reason, FinishReason::Length);
        assert_eq!(resp.usage, Some(TokenUsage { prompt: 10, completion: 2 }));
    }

    #[test]
    fn gemini_body_carries_generation_config() {
        let dir = tempfile::tempdir().unwrap();
        let msgs = [image_message(dir.path())];
        let params = GenerationParams { temperature: 0.4, top_k: Some(32), top_p: 1.0, max_tokens: 4096, ..Default::default() };
        let req = BackendRequest { model: "gemini-pro-vision", messages: &msgs, params: &params, continuation: None, credential: None };
        let body = GeminiTransport::request_body(&req).unwrap();
        assert_eq!(body["generationConfig"]["topK"], 32);
        assert_eq!(body["generationConfig"]["maxOutputTokens"], 4096);
        assert_eq!(body["contents"][0]["parts"][0]["inline_data"]["data"], "AQID");
        let resp = GeminiTransport::parse_response(&json!({
            "candidates": [{"content": {"parts": [{"text": "Answer: "}, {"text": "B"}]}, "finishReason": "STOP"}]
        }))
        .unwrap();
        assert_eq!(resp.text, "Answer: B");
        assert_eq!(resp.finish_reason, FinishReason::Stop);
    }
}
