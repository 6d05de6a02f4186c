//! Three-stage alignment of an article with its image.
//!
//! Stage 1 drafts a short hypothesis caption and pulls key sentences, Stage 2
//! picks article sentences that connect the draft to the image, and Stage 3
//! writes a short summary of the whole article. Output limits are enforced
//! here regardless of what the model returns: over-long text is truncated,
//! sentences that do not occur in the article are dropped, and malformed
//! structure triggers a re-prompt.

mod parse;

use std::fmt;

use log::{debug, info};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use parse::{parse_structured, Malformed, Structured};

use crate::gateways::{
    ChatRequest, Completion, GatewayError, Gateways, ImageRef, Message, Part, RetryPolicy, StructuredSchema,
};
use crate::prompts::{PromptError, PromptSet, PromptTemplate};
use crate::text::{fold_whitespace, normalize_sentence, split_sentences, truncate_words, word_count};

pub const MAX_HYPOTHESIS_WORDS: usize = 30;
pub const MAX_KEY_SENTENCES: usize = 10;
pub const MAX_RELEVANT_SENTENCES: usize = 5;
pub const MAX_SUMMARY_WORDS: usize = 100;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypothesisCaption {
    pub text: String,
    pub key_sentences: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevantSentences {
    pub sentences: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalSummary {
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentContext {
    pub hypothesis: HypothesisCaption,
    pub relevant: RelevantSentences,
    pub summary: GlobalSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Hypothesis = 1,
    Selection = 2,
    Summary = 3,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {}", *self as u8)
    }
}

/// Why a model call did not produce usable output.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CallError {
    #[error(transparent)]
    Gateway(GatewayError),
    /// Every attempt returned unparseable output. `raw_outputs` holds each
    /// attempt's text; it is kept out of the display message.
    #[error("malformed output after {attempts} attempts: {last}")]
    Malformed {
        attempts: usize,
        last: Malformed,
        raw_outputs: Vec<String>,
    },
    #[error("{0}")]
    Precondition(String),
}

impl CallError {
    pub fn is_outage(&self) -> bool {
        matches!(self, CallError::Gateway(e) if e.is_outage())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("hcma/{stage}: {source}")]
pub struct HcmaError {
    pub stage: Stage,
    #[source]
    pub source: CallError,
}

impl HcmaError {
    fn new(stage: Stage, source: CallError) -> Self {
        Self { stage, source }
    }
}

impl From<PromptError> for CallError {
    fn from(e: PromptError) -> Self {
        CallError::Precondition(e.to_string())
    }
}

/// Sends `request`, parsing each reply with `parse`. Transient gateway
/// failures back off and retry; malformed replies re-prompt with a short
/// correction. Both share one budget of `1 + retry_limit` calls.
pub fn call_with_retries<T>(
    gateways: &Gateways,
    policy: &RetryPolicy,
    request: &ChatRequest,
    mut parse: impl FnMut(&Completion) -> Result<T, Malformed>,
) -> Result<(T, Completion), CallError> {
    let max_calls = 1 + policy.retry_limit as usize;
    let mut raw_outputs = Vec::new();
    let mut req = request.clone();
    let mut backoffs = 0u32;
    let mut last_malformed = None;
    for call in 0..max_calls {
        match gateways.complete(&req) {
            Ok(c) => match parse(&c) {
                Ok(v) => return Ok((v, c)),
                Err(m) => {
                    debug!("malformed reply on call {}: {m}", call + 1);
                    raw_outputs.push(c.text.clone());
                    req = request.clone();
                    req.messages.push(Message::user(vec![Part::Text {
                        text: format!(
                            "Your previous reply could not be used ({}). Answer again in exactly the requested format.",
                            m.cause
                        ),
                    }]));
                    last_malformed = Some(m);
                }
            },
            Err(e) if e.is_retryable() && call + 1 < max_calls => {
                let d = policy.delay(backoffs);
                backoffs += 1;
                policy.sleep(d);
            }
            Err(e) => return Err(CallError::Gateway(e)),
        }
    }
    match last_malformed {
        Some(last) => Err(CallError::Malformed {
            attempts: raw_outputs.len(),
            last,
            raw_outputs,
        }),
        // Unreachable in practice: the last failed call returns above.
        None => Err(CallError::Gateway(GatewayError::Transport("no attempts made".into()))),
    }
}

#[derive(Debug, Clone)]
pub struct HcmaConfig {
    pub retry: RetryPolicy,
    pub hypothesis_max_tokens: u32,
    pub selection_max_tokens: u32,
    pub summary_max_tokens: u32,
}

impl Default for HcmaConfig {
    fn default() -> Self {
        Self {
            retry: RetryPolicy::default(),
            hypothesis_max_tokens: 512,
            selection_max_tokens: 512,
            summary_max_tokens: 256,
        }
    }
}

/// Runs the alignment stages against one gateway bundle.
pub struct Hcma<'a> {
    pub gateways: &'a Gateways,
    pub prompts: &'a PromptSet,
    pub config: &'a HcmaConfig,
}

fn request(
    template: &PromptTemplate,
    values: &[(&str, &str)],
    image: Option<&ImageRef>,
    max_output_tokens: u32,
    schema: StructuredSchema,
) -> Result<ChatRequest, CallError> {
    Ok(ChatRequest {
        messages: vec![Message::user(template.render(values, image)?)],
        max_output_tokens,
        temperature: 0.0,
        response_schema: Some(schema),
    })
}

fn require_article(article: &str) -> Result<(), CallError> {
    if article.trim().is_empty() {
        return Err(CallError::Precondition("article is empty".into()));
    }
    Ok(())
}

impl Hcma<'_> {
    pub fn generate_hypothesis(&self, image: &ImageRef, article: &str) -> Result<HypothesisCaption, HcmaError> {
        let stage = Stage::Hypothesis;
        let err = |e| HcmaError::new(stage, e);
        require_article(article).map_err(err)?;
        let req = request(
            &self.prompts.hypothesis,
            &[("ARTICLE", article)],
            Some(image),
            self.config.hypothesis_max_tokens,
            StructuredSchema::Hypothesis,
        )
        .map_err(err)?;
        let ((caption, key), _) = call_with_retries(self.gateways, &self.config.retry, &req, |c| {
            match parse_structured(&c.text, StructuredSchema::Hypothesis)? {
                Structured::Hypothesis { caption, key_sentences } => Ok((caption, key_sentences)),
                _ => unreachable!("schema-directed parse"),
            }
        })
        .map_err(err)?;
        if word_count(&caption) > MAX_HYPOTHESIS_WORDS {
            info!("hypothesis caption has {} words, truncating", word_count(&caption));
        }
        let key_sentences = key
            .into_iter()
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .take(MAX_KEY_SENTENCES)
            .collect();
        Ok(HypothesisCaption {
            text: truncate_words(&caption, MAX_HYPOTHESIS_WORDS),
            key_sentences,
        })
    }

    pub fn select_sentences(
        &self,
        hypothesis: &HypothesisCaption,
        image: &ImageRef,
        article: &str,
    ) -> Result<RelevantSentences, HcmaError> {
        let stage = Stage::Selection;
        let err = |e| HcmaError::new(stage, e);
        require_article(article).map_err(err)?;
        let req = request(
            &self.prompts.selection,
            &[("ARTICLE", article), ("HYPOTHESIS", &hypothesis.text)],
            Some(image),
            self.config.selection_max_tokens,
            StructuredSchema::SentenceSelection,
        )
        .map_err(err)?;
        let (picked, _) = call_with_retries(self.gateways, &self.config.retry, &req, |c| {
            match parse_structured(&c.text, StructuredSchema::SentenceSelection)? {
                Structured::Sentences(s) => Ok(s),
                _ => unreachable!("schema-directed parse"),
            }
        })
        .map_err(err)?;
        Ok(ground_sentences(&picked, article))
    }

    pub fn summarize(&self, article: &str) -> Result<GlobalSummary, HcmaError> {
        let stage = Stage::Summary;
        let err = |e| HcmaError::new(stage, e);
        require_article(article).map_err(err)?;
        let req = request(
            &self.prompts.summary,
            &[("ARTICLE", article)],
            None,
            self.config.summary_max_tokens,
            StructuredSchema::Summary,
        )
        .map_err(err)?;
        let (text, _) = call_with_retries(self.gateways, &self.config.retry, &req, |c| {
            match parse_structured(&c.text, StructuredSchema::Summary)? {
                Structured::Summary(s) => Ok(s),
                _ => unreachable!("schema-directed parse"),
            }
        })
        .map_err(err)?;
        Ok(GlobalSummary {
            text: truncate_words(&text, MAX_SUMMARY_WORDS),
        })
    }

    /// Stage 1, then Stage 2 with Stage 3 running alongside it. When both
    /// later stages fail, the Stage 2 error is reported.
    pub fn run(&self, image: &ImageRef, article: &str) -> Result<AlignmentContext, HcmaError> {
        let hypothesis = self.generate_hypothesis(image, article)?;
        let (relevant, summary) = std::thread::scope(|s| {
            let summary = s.spawn(|| self.summarize(article));
            let relevant = self.select_sentences(&hypothesis, image, article);
            let summary = summary.join().unwrap_or_else(|p| std::panic::resume_unwind(p));
            (relevant, summary)
        });
        Ok(AlignmentContext {
            hypothesis,
            relevant: relevant?,
            summary: summary?,
        })
    }
}

/// Keeps selections that occur in the article (after normalization), in
/// article order, without repeats, capped at five and at the article's
/// sentence count.
pub fn ground_sentences(picked: &[String], article: &str) -> RelevantSentences {
    let normalized_article = fold_whitespace(article);
    let cap = MAX_RELEVANT_SENTENCES.min(split_sentences(article).len());
    let mut located: Vec<(usize, String, String)> = Vec::new();
    for s in picked {
        let needle = normalize_sentence(s);
        match (!needle.is_empty()).then(|| normalized_article.find(&needle)).flatten() {
            Some(pos) => {
                if !located.iter().any(|(_, n, _)| *n == needle) {
                    located.push((pos, needle, s.trim().to_string()));
                }
            }
            None => info!("dropping selected sentence not found in article: {:?}", truncate_words(s, 12)),
        }
    }
    located.sort_by_key(|(pos, _, _)| *pos);
    if located.len() > cap {
        debug!("keeping {cap} of {} grounded sentences", located.len());
    }
    RelevantSentences {
        sentences: located.into_iter().take(cap).map(|(_, _, s)| s).collect(),
    }
}
