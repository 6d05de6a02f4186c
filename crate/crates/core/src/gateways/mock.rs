//! Deterministic, scriptable provider for tests and offline runs.
//!
//! Chat requests are answered from a rule table (first rule whose pattern is
//! a substring of the prompt text wins; its responses are consumed in order
//! and the last one repeats). Requests no rule matches get a heuristic answer
//! built from the prompt's tagged sections, shaped by the request's
//! `response_schema`. Image embeddings are pseudo-random unit vectors seeded
//! by a hash of the image bytes and a salt; faces exist only where planted.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    ChatGateway, ChatRequest, Completion, FaceAnalyzer, FaceDetection, GatewayError, Gateways, ImageEncoder,
    ImageRef, StructuredSchema,
};
use crate::text::{split_sentences, truncate_words};
use crate::vector::EmbeddingVector;

pub const DEFAULT_SALT: &str = "merge-mock-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptedResponse {
    Text(String),
    Failure(ScriptedFailure),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedFailure {
    /// `"transport"` or `"provider"`.
    pub error: String,
    #[serde(default)]
    pub status: Option<u16>,
}

impl ScriptedResponse {
    pub fn text(s: impl Into<String>) -> Self {
        ScriptedResponse::Text(s.into())
    }

    pub fn transport() -> Self {
        ScriptedResponse::Failure(ScriptedFailure {
            error: "transport".into(),
            status: None,
        })
    }

    pub fn provider(status: u16) -> Self {
        ScriptedResponse::Failure(ScriptedFailure {
            error: "provider".into(),
            status: Some(status),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub pattern: String,
    pub responses: Vec<ScriptedResponse>,
}

/// Contents of a mock script file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockScript {
    pub salt: Option<String>,
    pub rules: Vec<ScriptRule>,
    /// Planted face detections keyed by image reference.
    pub faces: BTreeMap<String, Vec<FaceDetection>>,
    /// Planted image embeddings keyed by image reference; others are hashed.
    pub images: BTreeMap<String, EmbeddingVector>,
    /// Used instead of the heuristic when no rule matches.
    pub fallback: Option<String>,
}

impl MockScript {
    pub fn from_path(path: &Path) -> Result<Self, GatewayError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::InvalidRequest(format!("cannot read mock script {}: {e}", path.display())))?;
        serde_json::from_str(&raw)
            .map_err(|e| GatewayError::InvalidRequest(format!("invalid mock script {}: {e}", path.display())))
    }

    pub fn rule(mut self, pattern: impl Into<String>, responses: Vec<ScriptedResponse>) -> Self {
        self.rules.push(ScriptRule {
            pattern: pattern.into(),
            responses,
        });
        self
    }
}

#[derive(Debug)]
pub struct MockGateway {
    script: MockScript,
    salt: String,
    image_dim: usize,
    cursors: Mutex<Vec<usize>>,
    chat_calls: AtomicUsize,
    log: Mutex<Vec<ChatRequest>>,
}

impl MockGateway {
    pub fn new(script: MockScript, image_dim: usize) -> Self {
        let salt = script.salt.clone().unwrap_or_else(|| DEFAULT_SALT.to_string());
        let cursors = Mutex::new(vec![0; script.rules.len()]);
        Self {
            script,
            salt,
            image_dim,
            cursors,
            chat_calls: AtomicUsize::new(0),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn chat_calls(&self) -> usize {
        self.chat_calls.load(Ordering::SeqCst)
    }

    /// Every chat request received so far, in arrival order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Uses this mock for chat, image embedding and face analysis.
    pub fn bundle(self: Arc<Self>, face_dim: usize) -> Gateways {
        Gateways {
            image_dim: self.image_dim,
            face_dim,
            chat: self.clone(),
            images: self.clone(),
            faces: self,
        }
    }

    fn scripted(&self, prompt: &str) -> Option<ScriptedResponse> {
        let idx = self
            .script
            .rules
            .iter()
            .position(|r| prompt.contains(r.pattern.as_str()))?;
        let rule = &self.script.rules[idx];
        if rule.responses.is_empty() {
            return None;
        }
        let mut cursors = self.cursors.lock().unwrap_or_else(|e| e.into_inner());
        let at = cursors[idx].min(rule.responses.len() - 1);
        cursors[idx] += 1;
        Some(rule.responses[at].clone())
    }
}

impl ChatGateway for MockGateway {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        self.chat_calls.fetch_add(1, Ordering::SeqCst);
        self.log.lock().unwrap_or_else(|e| e.into_inner()).push(request.clone());
        let prompt = request.prompt_text();
        let text = match self.scripted(&prompt) {
            Some(ScriptedResponse::Text(t)) => t,
            Some(ScriptedResponse::Failure(f)) => {
                return Err(match f.error.as_str() {
                    "transport" => GatewayError::Transport("scripted transport failure".into()),
                    _ => GatewayError::Provider {
                        status: f.status.unwrap_or(500),
                        message: "scripted provider failure".into(),
                    },
                })
            }
            None => match &self.script.fallback {
                Some(f) => f.clone(),
                None => heuristic_reply(&prompt, request.response_schema),
            },
        };
        // Providers stop generating at the output cap; mimic that.
        let text = if crate::text::word_count(&text) > request.max_output_tokens as usize {
            truncate_words(&text, request.max_output_tokens as usize)
        } else {
            text
        };
        Ok(Completion::new(request, text, None))
    }
}

impl ImageEncoder for MockGateway {
    fn embed_image(&self, image: &ImageRef) -> Result<EmbeddingVector, GatewayError> {
        if let Some(v) = self.script.images.get(image.as_str()) {
            return Ok(v.clone());
        }
        let bytes = image.resolve_bytes()?;
        Ok(hashed_unit_vector(&self.salt, &bytes, self.image_dim))
    }
}

impl FaceAnalyzer for MockGateway {
    fn detect_faces(&self, image: &ImageRef, min_confidence: f64) -> Result<Vec<FaceDetection>, GatewayError> {
        if !self.script.faces.contains_key(image.as_str()) {
            // Still fail on unreadable files like a real detector would.
            image.resolve_bytes()?;
        }
        Ok(self
            .script
            .faces
            .get(image.as_str())
            .map(|fs| fs.iter().filter(|f| f.confidence >= min_confidence).cloned().collect())
            .unwrap_or_default())
    }
}

/// Unit vector drawn from a standard normal generator seeded with
/// `sha256(salt || 0x00 || bytes)`.
pub fn hashed_unit_vector(salt: &str, bytes: &[u8], dim: usize) -> EmbeddingVector {
    let mut h = Sha256::new();
    h.update(salt.as_bytes());
    h.update([0u8]);
    h.update(bytes);
    let seed: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(seed);
    loop {
        let v: Vec<f64> = (0..dim.max(1)).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            let out = v.iter().map(|x| (x / n) as f32).collect();
            return EmbeddingVector::new(out).expect("finite non-empty vector");
        }
    }
}

/// Content between `<tag>` and `</tag>`, if both are present.
pub fn tagged_section<'a>(prompt: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = prompt.find(&open)? + open.len();
    let end = prompt[start..].find(&close)? + start;
    Some(prompt[start..end].trim())
}

fn content_words(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.len() > 3)
        .map(str::to_lowercase)
        .collect()
}

fn heuristic_reply(prompt: &str, schema: Option<StructuredSchema>) -> String {
    let article = tagged_section(prompt, "article").unwrap_or("");
    let sentences = split_sentences(article);
    match schema {
        Some(StructuredSchema::Hypothesis) => {
            let caption = sentences.first().map(|s| truncate_words(s, 25)).unwrap_or_default();
            let key: Vec<&String> = sentences.iter().take(4).collect();
            serde_json::json!({ "caption": caption, "key_sentences": key }).to_string()
        }
        Some(StructuredSchema::SentenceSelection) => {
            let hyp: Vec<String> = content_words(tagged_section(prompt, "hypothesis").unwrap_or(""));
            let mut scored: Vec<(usize, usize)> = sentences
                .iter()
                .enumerate()
                .map(|(i, s)| (content_words(s).iter().filter(|w| hyp.contains(w)).count(), i))
                .collect();
            scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut picked: Vec<usize> = scored.iter().take(3).map(|&(_, i)| i).collect();
            picked.sort_unstable();
            let out: Vec<&String> = picked.iter().map(|&i| &sentences[i]).collect();
            serde_json::json!({ "sentences": out }).to_string()
        }
        Some(StructuredSchema::Summary) => truncate_words(article, 60),
        Some(StructuredSchema::Relations) => {
            let names: Vec<&str> = tagged_section(prompt, "entities")
                .unwrap_or("")
                .lines()
                .map(|l| l.trim().trim_start_matches("- ").trim())
                .filter(|l| !l.is_empty())
                .collect();
            let tuples: Vec<String> = names
                .windows(2)
                .map(|w| format!("(\"{}\", \"{}\", \"appears with\")", w[0], w[1]))
                .collect();
            format!("[{}]", tuples.join(", "))
        }
        None => {
            let hyp = tagged_section(prompt, "hypothesis").unwrap_or("").trim();
            let names: Vec<&str> = tagged_section(prompt, "entities")
                .unwrap_or("")
                .lines()
                .filter_map(|l| l.trim().trim_start_matches("- ").split(" (").next())
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect();
            match (names.is_empty(), hyp.is_empty()) {
                (true, true) => "A news photograph.".to_string(),
                (true, false) => hyp.to_string(),
                (false, true) => format!("{} pictured.", names.join(" and ")),
                (false, false) => format!("{}: {}", names.join(" and "), hyp),
            }
        }
    }
}
