//! Step-by-step oracle for background graph construction.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use merge_core::emkb::{EntityRecord, EntityType, KnowledgeBase, StoreConfig};
use merge_core::gateways::mock::{MockGateway, MockScript};
use merge_core::graph::KnowledgeGraph;
use merge_core::ner::{EntityTagger, NerError, TaggedEntity};
use merge_core::prompts::PromptSet;
use merge_core::rmki::{build_background_kg, RmkiConfig};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{fold, random_words, Check};

/// Tagger stub: each sentence maps to a fixed list of surfaces.
pub struct StubTagger(pub HashMap<String, Vec<String>>);

impl EntityTagger for StubTagger {
    fn tag(&self, text: &str) -> Result<Vec<TaggedEntity>, NerError> {
        Ok(self
            .0
            .get(text)
            .map(|v| {
                v.iter()
                    .map(|s| TaggedEntity {
                        surface: s.clone(),
                        kind: EntityType::Other,
                    })
                    .collect()
            })
            .unwrap_or_default())
    }
}

pub type Triple = (String, String, String);
pub type Triples = BTreeSet<Triple>;

pub struct Instance {
    pub sentences: Vec<String>,
    pub tags: HashMap<String, Vec<String>>,
    /// Raw relation tuples the model returns.
    pub raw: Vec<Triple>,
    /// Stored records as `(id, name, subgraph edges)`.
    pub stored: Vec<(String, String, Vec<Triple>)>,
}

fn variant(rng: &mut ChaCha8Rng, name: &str) -> String {
    match rng.random_range(0..4) {
        0 => name.to_uppercase(),
        1 => name.to_lowercase(),
        2 => name.replace(' ', "  "),
        _ => name.to_string(),
    }
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let n_entities = rng.random_range(0..=12);
    let names: Vec<String> = (0..n_entities).map(|i| format!("Name{i} {}", ["Alpha", "Beta", "Gamma"][i % 3])).collect();
    let n_sentences = rng.random_range(1..=5);
    let mut sentences = Vec::new();
    let mut tags = HashMap::new();
    for i in 0..n_sentences {
        let s = format!("Sentence {i} about {}.", random_words(rng, 3).join(" "));
        let k = if names.is_empty() { 0 } else { rng.random_range(0..=names.len().min(5)) };
        let picked: Vec<String> = (0..k)
            .map(|_| {
                let name = names.choose(rng).unwrap().clone();
                variant(rng, &name)
            })
            .collect();
        tags.insert(s.clone(), picked);
        sentences.push(s);
    }
    let pool: Vec<String> = names.iter().cloned().chain(["Stranger One".to_string(), "Nobody".to_string()]).collect();
    let n_raw = rng.random_range(0..=20);
    let raw = (0..n_raw)
        .map(|_| {
            let a = pool.choose(rng).unwrap().clone();
            let s = variant(rng, &a);
            let t = if rng.random_bool(0.1) {
                s.clone()
            } else {
                let b = pool.choose(rng).unwrap().clone();
                variant(rng, &b)
            };
            let words = rng.random_range(0..=5);
            (s, t, random_words(rng, words).join(" "))
        })
        .collect();
    let mut stored = Vec::new();
    let n_sub = rng.random_range(0..=5).min(names.len());
    let mut chosen: Vec<&String> = names.choose_multiple(rng, n_sub).collect();
    // Occasionally a second record shares a name with a different subgraph.
    if let Some(first) = chosen.first().copied() {
        if rng.random_bool(0.3) {
            chosen.push(first);
        }
    }
    for (k, name) in chosen.into_iter().enumerate() {
        let edges: Vec<(String, String, String)> = (0..rng.random_range(0..=3))
            .map(|j| {
                let other = if j % 2 == 0 && names.len() > 1 {
                    names.choose(rng).unwrap().clone()
                } else {
                    format!("Place {}", rng.random_range(0..4))
                };
                let words = rng.random_range(1..=3);
                (name.clone(), other, random_words(rng, words).join(" "))
            })
            .filter(|(s, t, _)| fold(s) != fold(t))
            .collect();
        stored.push((format!("id{:02}", 50 - k), name.clone(), edges));
    }
    Instance {
        sentences,
        tags,
        raw,
        stored,
    }
}

fn clip(rel: &str) -> String {
    rel.split_whitespace().take(3).collect::<Vec<_>>().join(" ")
}

/// Composition of the four steps, each written from its contract.
pub fn oracle(inst: &Instance) -> (BTreeSet<String>, Triples) {
    // Step 1: tagged surfaces, unique by normalized form, first spelling.
    let mut entities: Vec<String> = Vec::new();
    for s in &inst.sentences {
        for e in inst.tags.get(s).into_iter().flatten() {
            if !entities.iter().any(|x| fold(x) == fold(e)) {
                entities.push(e.clone());
            }
        }
    }
    // Step 2: relation filter.
    let mut triples: Triples = BTreeSet::new();
    if entities.len() >= 2 {
        let known: BTreeSet<String> = entities.iter().map(|e| fold(e)).collect();
        let mut pairs = BTreeSet::new();
        for (s, t, r) in &inst.raw {
            let (fs, ft) = (fold(s), fold(t));
            if !known.contains(&fs) || !known.contains(&ft) || fs == ft || clip(r).is_empty() {
                continue;
            }
            let pair = if fs < ft { (fs.clone(), ft.clone()) } else { (ft.clone(), fs.clone()) };
            if pairs.insert(pair) {
                triples.insert((fs, ft, clip(r)));
            }
        }
    }
    // Step 3: base graph nodes.
    let mut nodes: BTreeSet<String> = entities.iter().map(|e| fold(e)).collect();
    // Step 4: union with the subgraph of the lowest id stored under each name.
    for e in &entities {
        let best = inst
            .stored
            .iter()
            .filter(|(_, name, _)| fold(name) == fold(e))
            .min_by(|a, b| a.0.cmp(&b.0));
        if let Some((_, name, edges)) = best {
            if edges.is_empty() {
                continue;
            }
            nodes.insert(fold(name));
            for (s, t, r) in edges {
                nodes.insert(fold(s));
                nodes.insert(fold(t));
                triples.insert((fold(s), fold(t), clip(r)));
            }
        }
    }
    (nodes, triples)
}

pub fn run_system(inst: &Instance) -> Result<KnowledgeGraph, String> {
    let mut kb = KnowledgeBase::new(StoreConfig::new(4, 4)).unwrap();
    for (id, name, edges) in &inst.stored {
        let mut g = KnowledgeGraph::new();
        for (s, t, r) in edges {
            g.link(s, t, r).map_err(|e| e.to_string())?;
        }
        kb.upsert(EntityRecord {
            entity_id: id.clone(),
            canonical_name: name.clone(),
            entity_type: EntityType::Person,
            images: vec![],
            background_text: String::new(),
            subgraph: g,
        })
        .map_err(|e| e.to_string())?;
    }
    let reply: Vec<[&str; 3]> = inst.raw.iter().map(|(s, t, r)| [s.as_str(), t.as_str(), r.as_str()]).collect();
    let script = MockScript {
        fallback: Some(serde_json::to_string(&reply).unwrap()),
        ..Default::default()
    };
    let gateways = Arc::new(MockGateway::new(script, 4)).bundle(4);
    let tagger = StubTagger(inst.tags.clone());
    build_background_kg(
        &inst.sentences,
        &kb,
        &gateways,
        &tagger,
        &PromptSet::default(),
        &RmkiConfig::default(),
    )
    .map_err(|e| e.to_string())
}

pub fn check_algorithm(cases: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats: BTreeMap<&str, usize> = BTreeMap::new();
    for k in 0..cases {
        let inst = random_instance(&mut rng);
        let (nodes, triples) = oracle(&inst);
        let g = run_system(&inst).map_err(|e| format!("instance {k}: {e}"))?;
        if g.normalized_triples() != triples {
            return Err(format!(
                "instance {k}: triples differ\n system: {:?}\n oracle: {:?}",
                g.normalized_triples(),
                triples
            ));
        }
        if g.normalized_nodes() != nodes {
            return Err(format!(
                "instance {k}: nodes differ\n system: {:?}\n oracle: {:?}",
                g.normalized_nodes(),
                nodes
            ));
        }
        *stats.entry("triples").or_default() += triples.len();
        *stats.entry("subgraphs").or_default() += inst.stored.len();
    }
    Ok(format!(
        "{cases}/{cases} instances equal the step oracles ({} triples, {} stored subgraphs)",
        stats.get("triples").unwrap_or(&0),
        stats.get("subgraphs").unwrap_or(&0)
    ))
}
