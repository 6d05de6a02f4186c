//! HTTP provider speaking a JSON chat-completion protocol.
//!
//! Endpoints, relative to the configured base URL:
//!
//! - `POST /chat/completions` with `{model, messages, max_tokens, temperature}`;
//!   the reply's `choices[0].message.content` is the completion text and
//!   `usage.{prompt_tokens, completion_tokens}` is used when present.
//! - `POST /embeddings/image` with `{model, image_ref}` returning `{embedding}`.
//! - `POST /faces/detect` with `{model, image_ref, min_confidence}` returning
//!   `{faces: [{bbox, confidence, embedding}]}`.
//!
//! Message content is a list of parts, `{"type":"text","text":..}` or
//! `{"type":"image_url","image_url":{"url":..}}`. The API key, when set in
//! `MERGE_API_KEY`, is sent as a bearer token.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    ChatGateway, ChatRequest, Completion, FaceAnalyzer, FaceDetection, GatewayError, ImageEncoder, ImageRef, Part,
    Role, Usage,
};
use crate::vector::EmbeddingVector;

pub const API_KEY_ENV: &str = "MERGE_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    60
}

pub struct HttpGateway {
    config: HttpConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl std::fmt::Debug for HttpGateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpGateway").field("config", &self.config).finish_non_exhaustive()
    }
}

impl HttpGateway {
    /// Reads the API key from `MERGE_API_KEY`.
    pub fn new(config: HttpConfig) -> Self {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::with_key(config, key)
    }

    pub fn with_key(config: HttpConfig, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, api_key, agent }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn post<T: DeserializeOwned>(&self, path: &str, body: &Value) -> Result<T, GatewayError> {
        let mut req = self.agent.post(&self.url(path)).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let message = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(GatewayError::Provider {
                status,
                message: message.chars().take(500).collect(),
            });
        }
        resp.body_mut()
            .read_json::<T>()
            .map_err(|e| GatewayError::InvalidOutput(format!("{path}: {e}")))
    }
}

fn wire_messages(request: &ChatRequest) -> Value {
    let msgs: Vec<Value> = request
        .messages
        .iter()
        .map(|m| {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
            };
            let content: Vec<Value> = m
                .parts
                .iter()
                .map(|p| match p {
                    Part::Text { text } => json!({"type": "text", "text": text}),
                    Part::Image { image } => json!({"type": "image_url", "image_url": {"url": image.as_str()}}),
                })
                .collect();
            json!({"role": role, "content": content})
        })
        .collect();
    Value::Array(msgs)
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: u32,
    completion_tokens: u32,
}

impl ChatGateway for HttpGateway {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        request.validate()?;
        let body = json!({
            "model": self.config.model,
            "messages": wire_messages(request),
            "max_tokens": request.max_output_tokens,
            "temperature": request.temperature,
        });
        let resp: ChatResponse = self.post("chat/completions", &body)?;
        let text = resp
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyCompletion);
        }
        let usage = resp.usage.map(|u| Usage {
            prompt_tokens: u.prompt_tokens,
            output_tokens: u.completion_tokens,
        });
        Ok(Completion::new(request, text, usage))
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    embedding: Vec<f32>,
}

impl ImageEncoder for HttpGateway {
    fn embed_image(&self, image: &ImageRef) -> Result<EmbeddingVector, GatewayError> {
        let body = json!({"model": self.config.model, "image_ref": image.as_str()});
        let resp: EmbeddingResponse = self.post("embeddings/image", &body)?;
        EmbeddingVector::new(resp.embedding).map_err(|e| GatewayError::InvalidOutput(e.to_string()))
    }
}

#[derive(Deserialize)]
struct FacesResponse {
    faces: Vec<FaceDetection>,
}

impl FaceAnalyzer for HttpGateway {
    fn detect_faces(&self, image: &ImageRef, min_confidence: f64) -> Result<Vec<FaceDetection>, GatewayError> {
        let body = json!({
            "model": self.config.model,
            "image_ref": image.as_str(),
            "min_confidence": min_confidence,
        });
        let resp: FacesResponse = self.post("faces/detect", &body)?;
        Ok(resp.faces)
    }
}
