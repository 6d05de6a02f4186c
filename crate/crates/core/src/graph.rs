//! Labeled directed knowledge graphs used for entity subgraphs, base relation
//! graphs and the integrated background graph.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::normalize_label;

/// Longest relation description kept on an edge, in words.
pub const MAX_RELATION_WORDS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("node label is empty")]
    EmptyLabel,
    #[error("relation between {source_label:?} and {target:?} is empty")]
    EmptyRelation { source_label: String, target: String },
    #[error("edge endpoint {0:?} is not a node of the graph")]
    UnknownNode(String),
}

/// A directed, labeled edge. Endpoints carry display labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub source: String,
    pub target: String,
    pub relation: String,
}

/// Collapse whitespace and keep the first [`MAX_RELATION_WORDS`] words.
pub fn clip_relation(relation: &str) -> String {
    relation
        .split_whitespace()
        .take(MAX_RELATION_WORDS)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeGraph {
    /// Display labels in insertion order.
    labels: Vec<String>,
    /// Normalized label -> position in `labels`.
    index: HashMap<String, usize>,
    /// Edges as (source node, target node, relation) in insertion order.
    edges: Vec<(usize, usize, String)>,
    edge_set: HashSet<(usize, usize, String)>,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.labels.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Adds a node unless a node with the same normalized label exists; the
    /// first display label seen wins. Returns the node's position.
    pub fn add_node(&mut self, label: &str) -> Result<usize, GraphError> {
        let key = normalize_label(label);
        if key.is_empty() {
            return Err(GraphError::EmptyLabel);
        }
        if let Some(&i) = self.index.get(&key) {
            return Ok(i);
        }
        let i = self.labels.len();
        self.labels.push(label.split_whitespace().collect::<Vec<_>>().join(" "));
        self.index.insert(key, i);
        Ok(i)
    }

    pub fn contains_node(&self, label: &str) -> bool {
        self.index.contains_key(&normalize_label(label))
    }

    /// Adds an edge between existing nodes. The relation is clipped to
    /// [`MAX_RELATION_WORDS`] words. Returns `false` when the triple was
    /// already present.
    pub fn add_edge(&mut self, source: &str, target: &str, relation: &str) -> Result<bool, GraphError> {
        let s = *self
            .index
            .get(&normalize_label(source))
            .ok_or_else(|| GraphError::UnknownNode(source.to_string()))?;
        let t = *self
            .index
            .get(&normalize_label(target))
            .ok_or_else(|| GraphError::UnknownNode(target.to_string()))?;
        let relation = clip_relation(relation);
        if relation.is_empty() {
            return Err(GraphError::EmptyRelation {
                source_label: source.to_string(),
                target: target.to_string(),
            });
        }
        let edge = (s, t, relation);
        if self.edge_set.contains(&edge) {
            return Ok(false);
        }
        self.edge_set.insert(edge.clone());
        self.edges.push(edge);
        Ok(true)
    }

    /// Adds both endpoints (if missing) and the edge.
    pub fn link(&mut self, source: &str, target: &str, relation: &str) -> Result<bool, GraphError> {
        self.add_node(source)?;
        self.add_node(target)?;
        self.add_edge(source, target, relation)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().map(String::as_str)
    }

    pub fn triples(&self) -> impl Iterator<Item = Triple> + '_ {
        self.edges.iter().map(|(s, t, r)| Triple {
            source: self.labels[*s].clone(),
            target: self.labels[*t].clone(),
            relation: r.clone(),
        })
    }

    /// Normalized node keys, for label-insensitive comparisons.
    pub fn normalized_nodes(&self) -> BTreeSet<String> {
        self.index.keys().cloned().collect()
    }

    /// Triples with normalized endpoints.
    pub fn normalized_triples(&self) -> BTreeSet<(String, String, String)> {
        self.edges
            .iter()
            .map(|(s, t, r)| {
                (
                    normalize_label(&self.labels[*s]),
                    normalize_label(&self.labels[*t]),
                    r.clone(),
                )
            })
            .collect()
    }

    fn isolated_nodes(&self) -> Vec<&str> {
        let mut touched = vec![false; self.labels.len()];
        for (s, t, _) in &self.edges {
            touched[*s] = true;
            touched[*t] = true;
        }
        self.labels
            .iter()
            .zip(touched)
            .filter(|(_, used)| !used)
            .map(|(l, _)| l.as_str())
            .collect()
    }

    /// Canonical text form: `source<TAB>relation<TAB>target` lines plus
    /// isolated-node lines `node<TAB><TAB>`, sorted together. Every line ends
    /// with `\n`.
    pub fn to_tsv(&self) -> String {
        let mut lines: Vec<String> = self
            .triples()
            .map(|t| format!("{}\t{}\t{}", t.source, t.relation, t.target))
            .chain(self.isolated_nodes().into_iter().map(|n| format!("{n}\t\t")))
            .collect();
        lines.sort();
        let mut out = String::new();
        for line in lines {
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    /// Parses the form written by [`KnowledgeGraph::to_tsv`].
    pub fn from_tsv(text: &str) -> Result<Self, GraphError> {
        let mut g = Self::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let mut parts = line.splitn(3, '\t');
            let source = parts.next().unwrap_or_default();
            let relation = parts.next().unwrap_or_default();
            let target = parts.next().unwrap_or_default();
            if relation.is_empty() && target.is_empty() {
                g.add_node(source)?;
            } else {
                g.link(source, target, relation)?;
            }
        }
        Ok(g)
    }
}

/// Serialized shape used in `entities.jsonl` and other JSON surfaces.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub nodes: Vec<String>,
    pub edges: Vec<(String, String, String)>,
}

impl From<&KnowledgeGraph> for GraphRecord {
    fn from(g: &KnowledgeGraph) -> Self {
        Self {
            nodes: g.labels.clone(),
            edges: g.triples().map(|t| (t.source, t.target, t.relation)).collect(),
        }
    }
}

impl TryFrom<GraphRecord> for KnowledgeGraph {
    type Error = GraphError;

    fn try_from(rec: GraphRecord) -> Result<Self, Self::Error> {
        let mut g = KnowledgeGraph::new();
        for n in &rec.nodes {
            g.add_node(n)?;
        }
        for (s, t, r) in &rec.edges {
            g.add_edge(s, t, r)?;
        }
        Ok(g)
    }
}

impl Serialize for KnowledgeGraph {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        GraphRecord::from(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for KnowledgeGraph {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let rec = GraphRecord::deserialize(deserializer)?;
        KnowledgeGraph::try_from(rec).map_err(serde::de::Error::custom)
    }
}
