//! Named-entity tagging.
//!
//! [`EntityTagger`] is the pluggable interface. [`GazetteerTagger`] is a
//! deterministic default: longest-match lookup against a name list (usually
//! the knowledge base's canonical names), then a capitalization heuristic
//! for remaining proper-noun runs.

use std::collections::HashMap;

use thiserror::Error;

use crate::emkb::{EntityType, KnowledgeBase};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedEntity {
    pub surface: String,
    pub kind: EntityType,
}

#[derive(Debug, Error)]
#[error("entity tagger failed: {0}")]
pub struct NerError(pub String);

pub trait EntityTagger: Send + Sync {
    /// Entities in order of appearance; repeated mentions are repeated.
    fn tag(&self, text: &str) -> Result<Vec<TaggedEntity>, NerError>;
}

const SKIP_WORDS: &[&str] = &[
    "a", "an", "the", "he", "she", "it", "they", "we", "i", "you", "his", "her", "their", "its", "our",
    "in", "on", "at", "of", "for", "to", "from", "by", "with", "as", "and", "but", "or", "if", "when",
    "while", "after", "before", "this", "that", "these", "those", "there", "here", "what", "who",
    "mr", "mrs", "ms", "dr", "january", "february", "march", "april", "may", "june", "july",
    "august", "september", "october", "november", "december", "monday", "tuesday", "wednesday",
    "thursday", "friday", "saturday", "sunday", "today", "yesterday", "tomorrow",
];

const ORG_HEADS: &[&str] = &[
    "inc", "corp", "corporation", "company", "co", "ltd", "llc", "group", "university", "college",
    "institute", "foundation", "association", "council", "committee", "party", "bank", "agency",
    "ministry", "department", "court", "senate", "congress", "parliament", "church", "league",
    "union", "club", "fc", "airlines", "motors", "times", "news", "post", "journal", "team",
    "organization", "federation", "commission", "board", "police", "army", "navy",
];

const KNOWN_GPE: &[&str] = &[
    "america", "united states", "u.s.", "us", "usa", "china", "beijing", "japan", "tokyo", "india",
    "russia", "moscow", "france", "paris", "germany", "berlin", "britain", "london", "england",
    "canada", "mexico", "brazil", "italy", "rome", "spain", "madrid", "washington", "new york",
    "california", "texas", "florida", "chicago", "boston", "los angeles", "ukraine", "israel",
    "iran", "iraq", "syria", "egypt", "australia", "korea", "south korea", "north korea", "europe",
    "africa", "asia",
];

#[derive(Debug, Clone)]
struct GazetteerEntry {
    tokens: Vec<String>,
    surface: String,
    kind: EntityType,
}

#[derive(Debug, Clone)]
pub struct GazetteerTagger {
    by_first: HashMap<String, Vec<GazetteerEntry>>,
    heuristics: bool,
}

/// A whitespace token with surrounding punctuation removed.
struct Token<'a> {
    word: &'a str,
    norm: String,
    /// Punctuation after the word ends a capitalized run.
    breaks_after: bool,
    sentence_start: bool,
}

fn tokenize(text: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let mut next_starts = true;
    for raw in text.split_whitespace() {
        let lead = raw.trim_start_matches(|c: char| !c.is_alphanumeric());
        let mut word = lead.trim_end_matches(|c: char| !c.is_alphanumeric() && c != '.');
        if !is_initialism(word) {
            word = word.trim_end_matches('.');
        }
        let word = word.strip_suffix("'s").or_else(|| word.strip_suffix("’s")).unwrap_or(word);
        let tail = &lead[word.len().min(lead.len())..];
        let ends_sentence = tail.contains(['.', '!', '?']);
        if !word.is_empty() {
            out.push(Token {
                word,
                norm: word.to_lowercase(),
                breaks_after: !tail.is_empty(),
                sentence_start: next_starts,
            });
        }
        next_starts = ends_sentence;
    }
    out
}

/// "U.S." style tokens keep their periods.
fn is_initialism(w: &str) -> bool {
    let letters = w.chars().filter(|c| c.is_alphabetic()).count();
    letters >= 1 && w.chars().filter(|&c| c == '.').count() >= letters && letters <= 4
}

fn is_capitalized(w: &str) -> bool {
    w.chars().next().is_some_and(|c| c.is_uppercase())
}

impl Default for GazetteerTagger {
    fn default() -> Self {
        Self::new()
    }
}

impl GazetteerTagger {
    /// Tagger with no names and the capitalization heuristic enabled.
    pub fn new() -> Self {
        Self {
            by_first: HashMap::new(),
            heuristics: true,
        }
    }

    pub fn from_kb(kb: &KnowledgeBase) -> Self {
        let mut t = Self::new();
        for r in kb.records() {
            t.add(&r.canonical_name, r.entity_type);
        }
        t
    }

    /// Disables the capitalization fallback, leaving pure gazetteer lookup.
    pub fn gazetteer_only(mut self) -> Self {
        self.heuristics = false;
        self
    }

    pub fn add(&mut self, name: &str, kind: EntityType) {
        let tokens: Vec<String> = tokenize(name).into_iter().map(|t| t.norm).collect();
        let Some(first) = tokens.first().cloned() else {
            return;
        };
        let bucket = self.by_first.entry(first).or_default();
        if bucket.iter().any(|e| e.tokens == tokens) {
            return;
        }
        bucket.push(GazetteerEntry {
            tokens,
            surface: name.split_whitespace().collect::<Vec<_>>().join(" "),
            kind,
        });
        bucket.sort_by_key(|e| std::cmp::Reverse(e.tokens.len()));
    }

    fn lookup(&self, toks: &[Token<'_>], i: usize) -> Option<(usize, &GazetteerEntry)> {
        let bucket = self.by_first.get(&toks[i].norm)?;
        bucket.iter().find_map(|e| {
            let n = e.tokens.len();
            if i + n > toks.len() {
                return None;
            }
            let hit = (0..n).all(|k| toks[i + k].norm == e.tokens[k] && (k + 1 == n || !toks[i + k].breaks_after));
            hit.then_some((n, e))
        })
    }

    fn classify(words: &[&str]) -> EntityType {
        let joined = words.join(" ").to_lowercase();
        let last = words.last().map(|w| w.to_lowercase()).unwrap_or_default();
        if ORG_HEADS.contains(&last.trim_end_matches('.')) {
            EntityType::Org
        } else if KNOWN_GPE.contains(&joined.as_str()) {
            EntityType::Gpe
        } else if words.len() >= 2 && words.iter().all(|w| w.chars().any(|c| c.is_lowercase())) {
            EntityType::Person
        } else if words.len() == 1 && words[0].chars().filter(|c| c.is_alphabetic()).all(|c| c.is_uppercase()) && words[0].len() > 1 {
            EntityType::Org
        } else {
            EntityType::Other
        }
    }
}

impl EntityTagger for GazetteerTagger {
    fn tag(&self, text: &str) -> Result<Vec<TaggedEntity>, NerError> {
        let toks = tokenize(text);
        let mut out = Vec::new();
        let mut i = 0;
        while i < toks.len() {
            if let Some((n, e)) = self.lookup(&toks, i) {
                out.push(TaggedEntity {
                    surface: e.surface.clone(),
                    kind: e.kind,
                });
                i += n;
                continue;
            }
            if !self.heuristics || !is_capitalized(toks[i].word) || SKIP_WORDS.contains(&toks[i].norm.as_str()) {
                i += 1;
                continue;
            }
            let start = i;
            let mut words = vec![toks[i].word];
            while !toks[i].breaks_after
                && i + 1 < toks.len()
                && is_capitalized(toks[i + 1].word)
                && !SKIP_WORDS.contains(&toks[i + 1].norm.as_str())
                && self.lookup(&toks, i + 1).is_none()
            {
                i += 1;
                words.push(toks[i].word);
            }
            i += 1;
            // A lone capitalized word opening a sentence is usually not a name.
            if words.len() == 1 && toks[start].sentence_start && !KNOWN_GPE.contains(&toks[start].norm.as_str()) {
                continue;
            }
            out.push(TaggedEntity {
                surface: words.join(" "),
                kind: Self::classify(&words),
            });
        }
        Ok(out)
    }
}
