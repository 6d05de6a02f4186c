//! Caption evaluation: BLEU-4, ROUGE-L, CIDEr-D and named-entity
//! precision/recall/F1.
//!
//! All text metrics share [`tokenize`]: lowercase, then split into maximal
//! runs of alphanumeric characters, so punctuation never forms a token.

mod bleu;
mod cider;
mod entity;
mod rouge;

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bleu::bleu4;
pub use cider::{cider_d, cider_d_items, CIDER_SIGMA};
pub use entity::{entity_prf, normalize_entity, Averaging, Prf};
pub use rouge::{lcs_len, rouge_l, rouge_l_item, ROUGE_BETA};

use crate::ner::{EntityTagger, NerError};

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// All n-grams of `tokens` for one `n`, as slices.
pub(crate) fn ngrams(tokens: &[String], n: usize) -> impl Iterator<Item = &[String]> {
    tokens.windows(n)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub item_id: String,
    pub candidate: String,
    pub references: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCorpus {
    pub items: Vec<EvalItem>,
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("corpus has {got} items; at least {needed} are required")]
    TooFewItems { needed: usize, got: usize },
    #[error("duplicate item id {0}")]
    DuplicateId(String),
    #[error("item {0} has no references")]
    NoReferences(String),
    #[error("entity tagging failed on item {item_id}: {source}")]
    Ner {
        item_id: String,
        #[source]
        source: NerError,
    },
}

impl EvalCorpus {
    pub fn new(items: Vec<EvalItem>) -> Result<Self, MetricsError> {
        let c = Self { items };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.items.is_empty() {
            return Err(MetricsError::EmptyCorpus);
        }
        let mut seen = HashSet::new();
        for it in &self.items {
            if !seen.insert(it.item_id.as_str()) {
                return Err(MetricsError::DuplicateId(it.item_id.clone()));
            }
            if it.references.is_empty() {
                return Err(MetricsError::NoReferences(it.item_id.clone()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub items: usize,
    pub bleu4: f64,
    pub rouge_l: f64,
    /// Absent for single-item corpora, where document frequencies are
    /// meaningless.
    pub cider: Option<f64>,
    pub averaging: Averaging,
    /// Keyed by `ALL`, `PERSON`, `GPE`, `ORG` (and `OTHER`).
    pub entity_scores: BTreeMap<String, Prf>,
}

pub fn evaluate(corpus: &EvalCorpus, tagger: &dyn EntityTagger, averaging: Averaging) -> Result<EvalReport, MetricsError> {
    corpus.validate()?;
    let cider = if corpus.len() >= 2 { Some(cider_d(corpus)?) } else { None };
    Ok(EvalReport {
        items: corpus.len(),
        bleu4: bleu4(corpus)?,
        rouge_l: rouge_l(corpus)?,
        cider,
        averaging,
        entity_scores: entity_prf(corpus, tagger, averaging)?,
    })
}

impl EvalReport {
    /// Fixed-width text table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "items    {}", self.items);
        let _ = writeln!(out, "BLEU-4   {:.4}", self.bleu4);
        let _ = writeln!(out, "ROUGE-L  {:.4}", self.rouge_l);
        match self.cider {
            Some(c) => {
                let _ = writeln!(out, "CIDEr-D  {c:.4}");
            }
            None => {
                let _ = writeln!(out, "CIDEr-D  n/a");
            }
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<8} {:>9} {:>9} {:>9} {:>8} {:>8} {:>8}",
            "entity", "precision", "recall", "f1", "matched", "pred", "ref"
        );
        for (k, s) in &self.entity_scores {
            let _ = writeln!(
                out,
                "{:<8} {:>9.4} {:>9.4} {:>9.4} {:>8} {:>8} {:>8}",
                k, s.precision, s.recall, s.f1, s.matched, s.predicted, s.reference
            );
        }
        out
    }
}
