//! Knowledge retrieval for one image/article pair.
//!
//! The first retrieval step matches the image to knowledge-base entities,
//! through detected faces when there are any and through the whole-image
//! embedding otherwise. The second builds a background knowledge graph: tag
//! entities in the selected sentences, ask the model for relations between
//! them, and merge the resulting base graph with the stored subgraphs of
//! those entities.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use log::debug;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emkb::{EmkbError, KnowledgeBase, Modality};
use crate::gateways::{ChatRequest, GatewayError, Gateways, ImageRef, Message, RetryPolicy, StructuredSchema};
use crate::graph::{clip_relation, GraphError, KnowledgeGraph};
use crate::hcma::{call_with_retries, parse_structured, CallError, Structured};
use crate::ner::{EntityTagger, NerError};
use crate::prompts::PromptSet;
use crate::text::normalize_label;

pub const DEFAULT_FACE_CONFIDENCE: f64 = 0.8;
pub const DEFAULT_TAU_FACE: f64 = 0.4;
pub const DEFAULT_TAU_CLIP: f64 = 0.25;
pub const DEFAULT_K_CLIP: usize = 1;

#[derive(Debug, Clone)]
pub struct RmkiConfig {
    pub face_confidence: f64,
    pub tau_face: f64,
    pub tau_clip: f64,
    pub k_clip: usize,
    pub retry: RetryPolicy,
    pub relations_max_tokens: u32,
}

impl Default for RmkiConfig {
    fn default() -> Self {
        Self {
            face_confidence: DEFAULT_FACE_CONFIDENCE,
            tau_face: DEFAULT_TAU_FACE,
            tau_clip: DEFAULT_TAU_CLIP,
            k_clip: DEFAULT_K_CLIP,
            retry: RetryPolicy::default(),
            relations_max_tokens: 512,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchPath {
    Face,
    Clip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityMatch {
    pub entity_id: String,
    pub canonical_name: String,
    pub similarity: f64,
    pub path: MatchPath,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RelationTriple {
    pub source: String,
    pub target: String,
    pub relation: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RmkiStep {
    Matching,
    Ner,
    Relations,
    Graph,
}

impl fmt::Display for RmkiStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RmkiStep::Matching => "ras 1",
            RmkiStep::Ner => "ras 2/ner",
            RmkiStep::Relations => "ras 2/relations",
            RmkiStep::Graph => "ras 2/graph",
        })
    }
}

#[derive(Debug, Error)]
pub enum RmkiFailure {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Call(#[from] CallError),
    #[error(transparent)]
    Store(#[from] EmkbError),
    #[error(transparent)]
    Ner(#[from] NerError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Error)]
#[error("rmki/{step}: {source}")]
pub struct RmkiError {
    pub step: RmkiStep,
    #[source]
    pub source: RmkiFailure,
}

impl RmkiError {
    fn at(step: RmkiStep) -> impl Fn(RmkiFailure) -> RmkiError {
        move |source| RmkiError { step, source }
    }

    pub fn is_outage(&self) -> bool {
        match &self.source {
            RmkiFailure::Gateway(e) => e.is_outage(),
            RmkiFailure::Call(e) => e.is_outage(),
            _ => false,
        }
    }
}

/// Entities shown in the image. With at least one confident face, each face
/// is matched to its single nearest stored face and kept when the
/// similarity reaches `tau_face`; the image embedding is not consulted even
/// if no face matches. Without faces, the image embedding's `k_clip` nearest
/// stored images above `tau_clip` are used. Results are unique per entity
/// (best similarity kept), ordered by similarity then entity id.
pub fn match_entities(
    image: &ImageRef,
    kb: &KnowledgeBase,
    gateways: &Gateways,
    config: &RmkiConfig,
) -> Result<Vec<EntityMatch>, RmkiError> {
    let err = RmkiError::at(RmkiStep::Matching);
    let faces = gateways
        .detect_faces(image, config.face_confidence)
        .map_err(|e| err(e.into()))?;
    let mut best: BTreeMap<String, (f64, MatchPath)> = BTreeMap::new();
    let mut keep = |entity_id: String, sim: f64, path: MatchPath| {
        let slot = best.entry(entity_id).or_insert((sim, path));
        if sim > slot.0 {
            *slot = (sim, path);
        }
    };
    if !faces.is_empty() {
        for face in &faces {
            let hits = kb
                .nearest_entities(&face.embedding, Modality::Face, 1)
                .map_err(|e| err(e.into()))?;
            if let Some(top) = hits.into_iter().next() {
                if top.similarity >= config.tau_face {
                    keep(top.entity_id, top.similarity, MatchPath::Face);
                } else {
                    debug!("face best match {} at {:.3} is below the floor", top.entity_id, top.similarity);
                }
            }
        }
    } else {
        let emb = gateways.embed_image(image).map_err(|e| err(e.into()))?;
        let hits = kb
            .nearest_entities(&emb, Modality::Image, config.k_clip.max(1))
            .map_err(|e| err(e.into()))?;
        for hit in hits.into_iter().filter(|h| h.similarity >= config.tau_clip) {
            keep(hit.entity_id, hit.similarity, MatchPath::Clip);
        }
    }
    let mut out: Vec<EntityMatch> = best
        .into_iter()
        .filter_map(|(entity_id, (similarity, path))| {
            let name = kb.get(&entity_id)?.canonical_name.clone();
            Some(EntityMatch {
                entity_id,
                canonical_name: name,
                similarity: similarity.clamp(-1.0, 1.0),
                path,
            })
        })
        .collect();
    out.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then_with(|| a.entity_id.cmp(&b.entity_id)));
    Ok(out)
}

/// Validates raw `(source, target, relation)` tuples against the entity
/// list: endpoints must name a listed entity (normalized match, rewritten
/// to the listed spelling), self-relations and empty relations are dropped,
/// relations are clipped to three words, and each unordered endpoint pair
/// keeps only its first tuple.
pub fn filter_relations(entities: &[String], raw: &[(String, String, String)]) -> Vec<RelationTriple> {
    let known: BTreeMap<String, &str> = entities
        .iter()
        .map(|e| (normalize_label(e), e.as_str()))
        .collect();
    let mut pairs = HashSet::new();
    let mut out = Vec::new();
    for (s, t, r) in raw {
        let (ns, nt) = (normalize_label(s), normalize_label(t));
        let (Some(source), Some(target)) = (known.get(&ns), known.get(&nt)) else {
            debug!("dropping relation with unknown endpoint: ({s}, {t})");
            continue;
        };
        if ns == nt {
            continue;
        }
        let relation = clip_relation(r);
        if relation.is_empty() {
            continue;
        }
        let key = if ns < nt { (ns, nt) } else { (nt, ns) };
        if !pairs.insert(key) {
            continue;
        }
        out.push(RelationTriple {
            source: source.to_string(),
            target: target.to_string(),
            relation,
        });
    }
    out
}

pub fn extract_relations(
    entities: &[String],
    sentences: &[String],
    gateways: &Gateways,
    prompts: &PromptSet,
    config: &RmkiConfig,
) -> Result<Vec<RelationTriple>, CallError> {
    if entities.is_empty() {
        return Err(CallError::Precondition("no entities to relate".into()));
    }
    let entity_list = entities.join("\n");
    let text = sentences.join("\n");
    let parts = prompts
        .relations
        .render(&[("ENTITIES", &entity_list), ("SENTENCES", &text)], None)?;
    let request = ChatRequest {
        messages: vec![Message::user(parts)],
        max_output_tokens: config.relations_max_tokens,
        temperature: 0.0,
        response_schema: Some(StructuredSchema::Relations),
    };
    let (raw, _) = call_with_retries(gateways, &config.retry, &request, |c| {
        match parse_structured(&c.text, StructuredSchema::Relations)? {
            Structured::Relations(r) => Ok(r),
            _ => unreachable!("schema-directed parse"),
        }
    })?;
    Ok(filter_relations(entities, &raw))
}

/// One node per entity (isolated ones included) and one edge per triple.
pub fn construct_base_graph(entities: &[String], triples: &[RelationTriple]) -> Result<KnowledgeGraph, GraphError> {
    let mut g = KnowledgeGraph::new();
    for e in entities {
        g.add_node(e)?;
    }
    for t in triples {
        g.add_edge(&t.source, &t.target, &t.relation)?;
    }
    Ok(g)
}

/// Union of graphs by normalized node label and exact triple; the first
/// label seen for a node is kept for display and base edges come first.
pub fn integrate_graph(base: &KnowledgeGraph, subgraphs: &[KnowledgeGraph]) -> KnowledgeGraph {
    let mut g = base.clone();
    for sub in subgraphs {
        for n in sub.nodes() {
            g.add_node(n).expect("labels from a valid graph are non-empty");
        }
        for t in sub.triples() {
            g.add_edge(&t.source, &t.target, &t.relation)
                .expect("endpoints were added above");
        }
    }
    g
}

/// Entity names mentioned in `sentences`, unique by normalized label, in
/// order of first mention.
pub fn sentence_entities(sentences: &[String], tagger: &dyn EntityTagger) -> Result<Vec<String>, NerError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for s in sentences {
        for e in tagger.tag(s)? {
            if seen.insert(normalize_label(&e.surface)) {
                out.push(e.surface);
            }
        }
    }
    Ok(out)
}

/// Background graph for the selected sentences: tagging, relation
/// extraction, base graph, stored subgraphs of the tagged entities, merge.
/// Fewer than two entities means no relation can exist, so the model is not
/// asked.
pub fn build_background_kg(
    sentences: &[String],
    kb: &KnowledgeBase,
    gateways: &Gateways,
    tagger: &dyn EntityTagger,
    prompts: &PromptSet,
    config: &RmkiConfig,
) -> Result<KnowledgeGraph, RmkiError> {
    let entities = sentence_entities(sentences, tagger).map_err(|e| RmkiError::at(RmkiStep::Ner)(e.into()))?;
    let triples = if entities.len() >= 2 {
        extract_relations(&entities, sentences, gateways, prompts, config)
            .map_err(|e| RmkiError::at(RmkiStep::Relations)(e.into()))?
    } else {
        Vec::new()
    };
    let base = construct_base_graph(&entities, &triples).map_err(|e| RmkiError::at(RmkiStep::Graph)(e.into()))?;
    let subgraphs: Vec<KnowledgeGraph> = entities
        .iter()
        .filter_map(|name| kb.ids_by_name(name).first().map(|id| kb.get_subgraph(id)))
        .filter(|g| !g.is_empty())
        .collect();
    debug!(
        "background graph: {} entities, {} relations, {} subgraphs",
        entities.len(),
        triples.len(),
        subgraphs.len()
    );
    Ok(integrate_graph(&base, &subgraphs))
}
