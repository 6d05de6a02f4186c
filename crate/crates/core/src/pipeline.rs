//! End-to-end caption generation.
//!
//! [`Pipeline::run`] aligns the article with the image, matches entities,
//! builds the background graph from the selected sentences, lays everything
//! out in one prompt that fits the context budget, and asks the model for the
//! caption. The background graph is given to the model as text, one triple
//! per line.

use std::sync::Arc;
use std::time::{Duration, Instant};

use log::debug;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emkb::KnowledgeBase;
use crate::gateways::{ChatRequest, Gateways, ImageRef, Message, Part};
use crate::graph::KnowledgeGraph;
use crate::hcma::{AlignmentContext, Hcma, HcmaConfig};
use crate::ner::{EntityTagger, GazetteerTagger};
use crate::prompts::PromptSet;
use crate::rmki::{build_background_kg, match_entities, EntityMatch, RmkiConfig};
use crate::text::{truncate_words, word_count};

pub const DEFAULT_N_CTX: usize = 1024;
pub const DEFAULT_N_OUT: u32 = 50;
pub const DEFAULT_MAX_TRIPLES: usize = 64;
pub const MIN_N_CTX: usize = 64;

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub n_ctx: usize,
    pub n_out: u32,
    pub max_triples: usize,
    pub hcma: HcmaConfig,
    pub rmki: RmkiConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_ctx: DEFAULT_N_CTX,
            n_out: DEFAULT_N_OUT,
            max_triples: DEFAULT_MAX_TRIPLES,
            hcma: HcmaConfig::default(),
            rmki: RmkiConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_ctx < MIN_N_CTX {
            return Err(format!("n_ctx must be at least {MIN_N_CTX}, got {}", self.n_ctx));
        }
        if self.n_out == 0 {
            return Err("n_out must be at least 1".into());
        }
        if self.max_triples == 0 {
            return Err("max_triples must be at least 1".into());
        }
        let r = &self.rmki;
        if !(0.0..=1.0).contains(&r.face_confidence) {
            return Err(format!("face confidence {} outside [0, 1]", r.face_confidence));
        }
        for (name, v) in [("tau_face", r.tau_face), ("tau_clip", r.tau_clip)] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(format!("{name} {v} outside [-1, 1]"));
            }
        }
        if r.k_clip == 0 {
            return Err("k_clip must be at least 1".into());
        }
        Ok(())
    }
}

/// Renders triples as `source relation target.` lines sorted by
/// `(source, target, relation)`. Past `max_triples` the rest is summarized
/// by a final `…and N more relations.` line.
pub fn linearize_graph(g: &KnowledgeGraph, max_triples: usize) -> String {
    let mut triples: Vec<(String, String, String)> = g.triples().map(|t| (t.source, t.target, t.relation)).collect();
    triples.sort();
    let mut lines: Vec<String> = triples
        .iter()
        .take(max_triples)
        .map(|(s, t, r)| format!("{s} {r} {t}."))
        .collect();
    if triples.len() > max_triples {
        lines.push(format!("…and {} more relations.", triples.len() - max_triples));
    }
    lines.join("\n")
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionInputs {
    pub image: ImageRef,
    pub alignment: AlignmentContext,
    pub entities: Vec<EntityMatch>,
    pub graph: KnowledgeGraph,
}

/// Bundles the parts, keeping one match per entity (highest similarity)
/// ordered by similarity descending, then name.
pub fn assemble_inputs(
    image: ImageRef,
    alignment: AlignmentContext,
    entities: Vec<EntityMatch>,
    graph: KnowledgeGraph,
) -> CaptionInputs {
    let mut best: Vec<EntityMatch> = Vec::new();
    for m in entities {
        match best.iter_mut().find(|b| b.entity_id == m.entity_id) {
            Some(b) if m.similarity > b.similarity => *b = m,
            Some(_) => {}
            None => best.push(m),
        }
    }
    best.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then_with(|| a.canonical_name.cmp(&b.canonical_name))
            .then_with(|| a.entity_id.cmp(&b.entity_id))
    });
    CaptionInputs {
        image,
        alignment,
        entities: best,
        graph,
    }
}

/// How much of each trimmable section made it into the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Kept {
    pub graph_triples: usize,
    pub summary_words: usize,
    pub sentences: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetedPrompt {
    pub parts: Vec<Part>,
    pub estimated_tokens: usize,
    pub kept: Kept,
}

impl BudgetedPrompt {
    pub fn text(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                Part::Text { text } => Some(text.as_str()),
                Part::Image { .. } => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BudgetError {
    #[error("n_ctx {0} is below the minimum of {MIN_N_CTX}")]
    ContextTooSmall(usize),
    #[error("instruction, entities and hypothesis alone need {needed} tokens, over the {n_ctx}-token budget")]
    Irreducible { needed: usize, n_ctx: usize },
    #[error("prompt template: {0}")]
    Template(String),
}

/// Whitespace-word estimate of prompt size, the same measure used when a
/// provider reports no usage.
pub fn estimate_tokens(text: &str) -> usize {
    word_count(text)
}

fn section(tag: &str, body: &str) -> Option<String> {
    (!body.trim().is_empty()).then(|| format!("<{tag}>\n{}\n</{tag}>", body.trim()))
}

/// Context block in fixed order: entities, sentences, summary, hypothesis,
/// graph. Empty sections are left out.
pub fn render_context(inputs: &CaptionInputs, kept: Kept, max_triples: usize) -> String {
    let a = &inputs.alignment;
    let entities: Vec<String> = inputs.entities.iter().map(|e| format!("- {}", e.canonical_name)).collect();
    let sentences = a.relevant.sentences[..kept.sentences.min(a.relevant.sentences.len())].join("\n");
    let summary = truncate_words(&a.summary.text, kept.summary_words);
    let graph = if kept.graph_triples == 0 {
        String::new()
    } else {
        linearize_graph(&inputs.graph, kept.graph_triples.min(max_triples))
    };
    [
        section("entities", &entities.join("\n")),
        section("sentences", &sentences),
        section("summary", &summary),
        section("hypothesis", &a.hypothesis.text),
        section("graph", &graph),
    ]
    .into_iter()
    .flatten()
    .collect::<Vec<_>>()
    .join("\n")
}

/// Builds the final prompt and trims it to `n_ctx` estimated tokens. Graph
/// lines go first (from the end), then the summary's tail, then selected
/// sentences from the end. Entities and the hypothesis are never trimmed.
pub fn enforce_budget(
    inputs: &CaptionInputs,
    prompts: &PromptSet,
    n_ctx: usize,
    max_triples: usize,
) -> Result<BudgetedPrompt, BudgetError> {
    if n_ctx < MIN_N_CTX {
        return Err(BudgetError::ContextTooSmall(n_ctx));
    }
    let render = |kept: Kept| -> Result<(Vec<Part>, usize), BudgetError> {
        let context = render_context(inputs, kept, max_triples);
        let parts = prompts
            .caption
            .render(&[("CONTEXT", &context)], Some(&inputs.image))
            .map_err(|e| BudgetError::Template(e.to_string()))?;
        let tokens = parts
            .iter()
            .map(|p| match p {
                Part::Text { text } => estimate_tokens(text),
                Part::Image { .. } => 0,
            })
            .sum();
        Ok((parts, tokens))
    };
    let a = &inputs.alignment;
    let mut kept = Kept {
        graph_triples: inputs.graph.edge_count().min(max_triples),
        summary_words: word_count(&a.summary.text),
        sentences: a.relevant.sentences.len(),
    };
    let (mut parts, mut tokens) = render(kept)?;
    while tokens > n_ctx {
        let excess = tokens - n_ctx;
        if kept.graph_triples > 0 {
            kept.graph_triples -= 1;
        } else if kept.summary_words > 0 {
            kept.summary_words = kept.summary_words.saturating_sub(excess.max(1));
        } else if kept.sentences > 0 {
            kept.sentences -= 1;
        } else {
            return Err(BudgetError::Irreducible { needed: tokens, n_ctx });
        }
        (parts, tokens) = render(kept)?;
    }
    if kept.graph_triples < inputs.graph.edge_count().min(max_triples)
        || kept.summary_words < word_count(&a.summary.text)
        || kept.sentences < a.relevant.sentences.len()
    {
        debug!("prompt trimmed to {tokens} tokens: {kept:?}");
    }
    Ok(BudgetedPrompt {
        parts,
        estimated_tokens: tokens,
        kept,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub matched_entities: Vec<EntityMatch>,
    pub hypothesis: String,
    pub selected_sentences: Vec<String>,
    pub summary: String,
    pub graph_triple_count: usize,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionResult {
    pub caption: String,
    pub provenance: Provenance,
}

/// A failed run: which stage, why, and whatever was produced before it.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{stage}: {message}")]
pub struct PipelineError {
    pub stage: String,
    pub message: String,
    /// True when the failure reflects an unavailable model backend.
    pub outage: bool,
    pub partial: Box<Provenance>,
}

impl PipelineError {
    fn new(stage: impl Into<String>, message: impl ToString, outage: bool, partial: &Provenance) -> Self {
        Self {
            stage: stage.into(),
            message: message.to_string(),
            outage,
            partial: Box::new(partial.clone()),
        }
    }
}

/// Generates the caption for already assembled inputs: one model call with
/// the output capped at `n_out` tokens (transient failures are retried).
pub fn generate_caption(
    inputs: &CaptionInputs,
    gateways: &Gateways,
    prompts: &PromptSet,
    config: &PipelineConfig,
) -> Result<CaptionResult, PipelineError> {
    let mut provenance = Provenance {
        matched_entities: inputs.entities.clone(),
        hypothesis: inputs.alignment.hypothesis.text.clone(),
        selected_sentences: inputs.alignment.relevant.sentences.clone(),
        summary: inputs.alignment.summary.text.clone(),
        graph_triple_count: inputs.graph.edge_count(),
        prompt_tokens: 0,
        output_tokens: 0,
    };
    let prompt = enforce_budget(inputs, prompts, config.n_ctx, config.max_triples)
        .map_err(|e| PipelineError::new("pipeline/budget", e, false, &provenance))?;
    let request = ChatRequest {
        messages: vec![Message::user(prompt.parts)],
        max_output_tokens: config.n_out,
        temperature: 0.0,
        response_schema: None,
    };
    let completion = config
        .hcma
        .retry
        .run("caption", || gateways.complete(&request))
        .map_err(|e| PipelineError::new("pipeline/generate", &e, e.is_outage(), &provenance))?;
    let caption = completion.text.split_whitespace().collect::<Vec<_>>().join(" ");
    provenance.prompt_tokens = completion.usage.prompt_tokens;
    provenance.output_tokens = completion.usage.output_tokens;
    if caption.is_empty() {
        return Err(PipelineError::new(
            "pipeline/generate",
            "model returned an empty caption",
            false,
            &provenance,
        ));
    }
    Ok(CaptionResult { caption, provenance })
}

/// Wall-clock time spent per stage of one run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub hcma: Duration,
    pub matching: Duration,
    pub graph: Duration,
    pub generate: Duration,
}

/// Everything one run needs besides the article and image.
#[derive(Clone)]
pub struct Pipeline {
    pub kb: Arc<KnowledgeBase>,
    pub gateways: Gateways,
    pub prompts: Arc<PromptSet>,
    pub tagger: Arc<dyn EntityTagger>,
    pub config: PipelineConfig,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("entities", &self.kb.len())
            .field("gateways", &self.gateways)
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl Pipeline {
    /// Pipeline with the built-in prompts and a tagger seeded from the
    /// knowledge base's entity names.
    pub fn new(kb: Arc<KnowledgeBase>, gateways: Gateways, config: PipelineConfig) -> Self {
        let tagger = Arc::new(GazetteerTagger::from_kb(&kb));
        Self {
            kb,
            gateways,
            prompts: Arc::new(PromptSet::default()),
            tagger,
            config,
        }
    }

    pub fn run(&self, image: &ImageRef, article: &str) -> Result<CaptionResult, PipelineError> {
        self.run_timed(image, article).0
    }

    pub fn run_timed(&self, image: &ImageRef, article: &str) -> (Result<CaptionResult, PipelineError>, StageTimings) {
        let mut timings = StageTimings::default();
        let out = self.run_inner(image, article, &mut timings);
        (out, timings)
    }

    fn run_inner(
        &self,
        image: &ImageRef,
        article: &str,
        timings: &mut StageTimings,
    ) -> Result<CaptionResult, PipelineError> {
        let mut partial = Provenance::default();
        if article.trim().is_empty() {
            return Err(PipelineError::new("input", "article is empty", false, &partial));
        }
        let t = Instant::now();
        let hcma = Hcma {
            gateways: &self.gateways,
            prompts: &self.prompts,
            config: &self.config.hcma,
        };
        let alignment = hcma
            .run(image, article)
            .map_err(|e| PipelineError::new(format!("hcma/{}", e.stage), &e.source, e.source.is_outage(), &partial))?;
        timings.hcma = t.elapsed();
        partial.hypothesis = alignment.hypothesis.text.clone();
        partial.selected_sentences = alignment.relevant.sentences.clone();
        partial.summary = alignment.summary.text.clone();

        let t = Instant::now();
        let entities = match_entities(image, &self.kb, &self.gateways, &self.config.rmki)
            .map_err(|e| PipelineError::new(format!("rmki/{}", e.step), &e.source, e.is_outage(), &partial))?;
        timings.matching = t.elapsed();
        partial.matched_entities = entities.clone();

        let t = Instant::now();
        let graph = build_background_kg(
            &alignment.relevant.sentences,
            &self.kb,
            &self.gateways,
            self.tagger.as_ref(),
            &self.prompts,
            &self.config.rmki,
        )
        .map_err(|e| PipelineError::new(format!("rmki/{}", e.step), &e.source, e.is_outage(), &partial))?;
        timings.graph = t.elapsed();

        let t = Instant::now();
        let inputs = assemble_inputs(image.clone(), alignment, entities, graph);
        let out = generate_caption(&inputs, &self.gateways, &self.prompts, &self.config);
        timings.generate = t.elapsed();
        out
    }
}
