use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{EvalCorpus, MetricsError};
use crate::emkb::EntityType;
use crate::ner::EntityTagger;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Pool match counts over the corpus, then compute P/R/F1.
    #[default]
    Micro,
    /// Average per-item precision and recall, then compute F1 from them.
    Macro,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub matched: usize,
    pub predicted: usize,
    pub reference: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

impl Prf {
    fn from_counts(matched: usize, predicted: usize, reference: usize) -> Self {
        let (p, r) = (ratio(matched, predicted), ratio(matched, reference));
        Self {
            precision: p,
            recall: r,
            f1: f1(p, r),
            matched,
            predicted,
            reference,
        }
    }
}

/// Matching key for entity surfaces: case-folded, whitespace collapsed, a
/// leading "the" removed.
pub fn normalize_entity(surface: &str) -> String {
    let folded = surface.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    match folded.strip_prefix("the ") {
        Some(rest) if !rest.is_empty() => rest.to_string(),
        _ => folded,
    }
}

type Bag = HashMap<(String, EntityType), usize>;

fn bag(tagger: &dyn EntityTagger, text: &str) -> Result<Bag, crate::ner::NerError> {
    let mut b = Bag::new();
    for e in tagger.tag(text)? {
        *b.entry((normalize_entity(&e.surface), e.kind)).or_insert(0) += 1;
    }
    Ok(b)
}

/// Counts `(matched, predicted, reference)` restricted to `kind`, or over all
/// types when `kind` is `None`.
fn item_counts(cand: &Bag, refs: &Bag, kind: Option<EntityType>) -> (usize, usize, usize) {
    let keep = |k: &EntityType| kind.is_none_or(|t| t == *k);
    let predicted = cand.iter().filter(|((_, k), _)| keep(k)).map(|(_, c)| c).sum();
    let reference = refs.iter().filter(|((_, k), _)| keep(k)).map(|(_, c)| c).sum();
    let matched = cand
        .iter()
        .filter(|((_, k), _)| keep(k))
        .map(|(key, c)| (*c).min(refs.get(key).copied().unwrap_or(0)))
        .sum();
    (matched, predicted, reference)
}

/// Entity precision/recall/F1 for `ALL` types and per type. Entities are
/// `(normalized surface, type)` multisets; reference multisets are the
/// per-key maximum over an item's references.
pub fn entity_prf(
    corpus: &EvalCorpus,
    tagger: &dyn EntityTagger,
    averaging: Averaging,
) -> Result<BTreeMap<String, Prf>, MetricsError> {
    corpus.validate()?;
    let mut bags = Vec::with_capacity(corpus.len());
    for it in &corpus.items {
        let err = |source| MetricsError::Ner {
            item_id: it.item_id.clone(),
            source,
        };
        let cand = bag(tagger, &it.candidate).map_err(err)?;
        let mut refs = Bag::new();
        for r in &it.references {
            for (k, c) in bag(tagger, r).map_err(err)? {
                let e = refs.entry(k).or_insert(0);
                *e = (*e).max(c);
            }
        }
        bags.push((cand, refs));
    }
    let mut kinds: Vec<(String, Option<EntityType>)> = vec![("ALL".into(), None)];
    kinds.extend(
        [EntityType::Person, EntityType::Gpe, EntityType::Org, EntityType::Other]
            .map(|k| (k.as_str().to_string(), Some(k))),
    );
    let mut out = BTreeMap::new();
    for (name, kind) in kinds {
        let per_item: Vec<(usize, usize, usize)> = bags.iter().map(|(c, r)| item_counts(c, r, kind)).collect();
        let (m, p, r) = per_item
            .iter()
            .fold((0, 0, 0), |acc, x| (acc.0 + x.0, acc.1 + x.1, acc.2 + x.2));
        let prf = match averaging {
            Averaging::Micro => Prf::from_counts(m, p, r),
            Averaging::Macro => {
                let n = per_item.len() as f64;
                let precision = per_item.iter().map(|x| ratio(x.0, x.1)).sum::<f64>() / n;
                let recall = per_item.iter().map(|x| ratio(x.0, x.2)).sum::<f64>() / n;
                Prf {
                    precision,
                    recall,
                    f1: f1(precision, recall),
                    matched: m,
                    predicted: p,
                    reference: r,
                }
            }
        };
        out.insert(name, prf);
    }
    Ok(out)
}
