//! Provider abstraction for every learned model the pipeline calls.
//!
//! Three roles are modelled as traits: [`ChatGateway`] (text/vision
//! completion), [`ImageEncoder`] (whole-image embeddings) and
//! [`FaceAnalyzer`] (face detection plus face embeddings). [`Gateways`]
//! bundles one of each and validates their outputs against the configured
//! dimensions. Implementations: [`mock`] (deterministic, scriptable) and
//! [`http`] (JSON chat-completion wire protocol).

pub mod http;
pub mod mock;
mod retry;

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::word_count;
use crate::vector::EmbeddingVector;

pub use retry::{ConcurrencyLimit, Limited, RetryPolicy, Retrying, DEFAULT_BACKOFF_BASE, DEFAULT_RETRY_LIMIT};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageRef(pub String);

impl ImageRef {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Bytes identifying the image. `mem://` and `fixture://` references are
    /// synthetic and identified by the reference string itself; `file://`
    /// references and bare paths are read from disk.
    pub fn resolve_bytes(&self) -> Result<Vec<u8>, GatewayError> {
        let s = self.0.as_str();
        if s.starts_with("mem://") || s.starts_with("fixture://") {
            return Ok(s.as_bytes().to_vec());
        }
        let path = s.strip_prefix("file://").unwrap_or(s);
        std::fs::read(Path::new(path)).map_err(|e| GatewayError::UnreadableImage {
            image_ref: s.to_string(),
            reason: e.to_string(),
        })
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Part {
    Text { text: String },
    Image { image: ImageRef },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl Message {
    pub fn user(parts: Vec<Part>) -> Self {
        Self {
            role: Role::User,
            parts,
        }
    }

    pub fn text(&self) -> String {
        let mut out = String::new();
        for p in &self.parts {
            if let Part::Text { text } = p {
                out.push_str(text);
            }
        }
        out
    }
}

/// Which structured shape a caller expects back; providers may use it as a
/// hint, the mock uses it to synthesize conforming output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructuredSchema {
    Hypothesis,
    SentenceSelection,
    Summary,
    Relations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub max_output_tokens: u32,
    pub temperature: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_schema: Option<StructuredSchema>,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("no messages".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_output_tokens must be >= 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest("temperature must be non-negative".into()));
        }
        Ok(())
    }

    /// All text parts concatenated in message order.
    pub fn prompt_text(&self) -> String {
        self.messages.iter().map(Message::text).collect::<Vec<_>>().join("\n")
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageRef> {
        self.messages.iter().flat_map(|m| {
            m.parts.iter().filter_map(|p| match p {
                Part::Image { image } => Some(image),
                Part::Text { .. } => None,
            })
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u32,
    pub output_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
    /// True when `usage` was approximated by whitespace word counts because
    /// the provider reported none.
    pub usage_estimated: bool,
}

impl Completion {
    /// Builds a completion, estimating usage from word counts when the
    /// provider gave none. Non-empty text always reports at least one token.
    pub fn new(request: &ChatRequest, text: String, usage: Option<Usage>) -> Self {
        let usage_estimated = usage.is_none();
        let mut usage = usage.unwrap_or_else(|| Usage {
            prompt_tokens: word_count(&request.prompt_text()) as u32,
            output_tokens: word_count(&text) as u32,
        });
        if !text.trim().is_empty() && usage.output_tokens == 0 {
            usage.output_tokens = 1;
        }
        Self {
            text,
            usage,
            usage_estimated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider returned status {status}: {message}")]
    Provider { status: u16, message: String },
    #[error("output of {reported} tokens exceeds the {limit}-token budget")]
    BudgetExceeded { limit: u32, reported: u32 },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cannot read image {image_ref}: {reason}")]
    UnreadableImage { image_ref: String, reason: String },
    #[error("provider returned a {got}-dim embedding, expected {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid provider output: {0}")]
    InvalidOutput(String),
    #[error("provider returned an empty completion")]
    EmptyCompletion,
}

impl GatewayError {
    /// Transport failures, rate limits and server errors are worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self {
            GatewayError::Transport(_) => true,
            GatewayError::Provider { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }

    /// Whether the failure reflects an unavailable backend rather than bad
    /// input or output.
    pub fn is_outage(&self) -> bool {
        self.is_retryable()
    }
}

/// Text and vision completion (the MLLM/LLM roles).
pub trait ChatGateway: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError>;
}

/// Whole-image embedding (the CLIP role).
pub trait ImageEncoder: Send + Sync {
    fn embed_image(&self, image: &ImageRef) -> Result<EmbeddingVector, GatewayError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceDetection {
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    pub confidence: f64,
    pub embedding: EmbeddingVector,
}

/// Face detection with per-face embeddings.
pub trait FaceAnalyzer: Send + Sync {
    fn detect_faces(&self, image: &ImageRef, min_confidence: f64) -> Result<Vec<FaceDetection>, GatewayError>;
}

impl<T: ChatGateway + ?Sized> ChatGateway for Arc<T> {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        (**self).complete(request)
    }
}

impl<T: ImageEncoder + ?Sized> ImageEncoder for Arc<T> {
    fn embed_image(&self, image: &ImageRef) -> Result<EmbeddingVector, GatewayError> {
        (**self).embed_image(image)
    }
}

impl<T: FaceAnalyzer + ?Sized> FaceAnalyzer for Arc<T> {
    fn detect_faces(&self, image: &ImageRef, min_confidence: f64) -> Result<Vec<FaceDetection>, GatewayError> {
        (**self).detect_faces(image, min_confidence)
    }
}

/// One provider per role plus the embedding dimensions they must produce.
#[derive(Clone)]
pub struct Gateways {
    pub chat: Arc<dyn ChatGateway>,
    pub images: Arc<dyn ImageEncoder>,
    pub faces: Arc<dyn FaceAnalyzer>,
    pub image_dim: usize,
    pub face_dim: usize,
}

impl fmt::Debug for Gateways {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateways")
            .field("image_dim", &self.image_dim)
            .field("face_dim", &self.face_dim)
            .finish_non_exhaustive()
    }
}

impl Gateways {
    pub fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        request.validate()?;
        let completion = self.chat.complete(request)?;
        if completion.usage.output_tokens > request.max_output_tokens {
            return Err(GatewayError::BudgetExceeded {
                limit: request.max_output_tokens,
                reported: completion.usage.output_tokens,
            });
        }
        Ok(completion)
    }

    pub fn embed_image(&self, image: &ImageRef) -> Result<EmbeddingVector, GatewayError> {
        let v = self.images.embed_image(image)?;
        if v.dim() != self.image_dim {
            return Err(GatewayError::DimMismatch {
                expected: self.image_dim,
                got: v.dim(),
            });
        }
        Ok(v)
    }

    /// Detections below `min_confidence` are filtered out here even if the
    /// provider returned them.
    pub fn detect_faces(&self, image: &ImageRef, min_confidence: f64) -> Result<Vec<FaceDetection>, GatewayError> {
        if !(0.0..=1.0).contains(&min_confidence) {
            return Err(GatewayError::InvalidRequest(format!(
                "min_confidence {min_confidence} outside [0, 1]"
            )));
        }
        let faces = self.faces.detect_faces(image, min_confidence)?;
        let mut out = Vec::with_capacity(faces.len());
        for f in faces {
            if !(0.0..=1.0).contains(&f.confidence) || f.bbox[2] <= 0.0 || f.bbox[3] <= 0.0 {
                return Err(GatewayError::InvalidOutput(format!(
                    "face detection with confidence {} and box {:?}",
                    f.confidence, f.bbox
                )));
            }
            if f.embedding.dim() != self.face_dim {
                return Err(GatewayError::DimMismatch {
                    expected: self.face_dim,
                    got: f.embedding.dim(),
                });
            }
            if f.confidence >= min_confidence {
                out.push(f);
            }
        }
        Ok(out)
    }
}
