//! Small text helpers shared across stages: word counting, truncation,
//! normalization and a rule-based sentence splitter.

/// Number of whitespace-separated tokens after trimming.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Keeps at most `max_words` whitespace tokens. Text already within the limit
/// is returned trimmed but otherwise unchanged; longer text is re-joined with
/// single spaces.
pub fn truncate_words(text: &str, max_words: usize) -> String {
    let trimmed = text.trim();
    if word_count(trimmed) <= max_words {
        return trimmed.to_string();
    }
    trimmed
        .split_whitespace()
        .take(max_words)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Case-fold and collapse all internal whitespace runs to one space.
pub fn fold_whitespace(text: &str) -> String {
    text.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Normalized key for node labels and entity names.
pub fn normalize_label(label: &str) -> String {
    fold_whitespace(label)
}

fn is_wrapping_char(c: char) -> bool {
    c.is_ascii_punctuation() && c != '$' && c != '%' || matches!(c, '“' | '”' | '‘' | '’' | '«' | '»' | '…')
}

/// Normalization used for sentence provenance checks: case-fold, collapse
/// whitespace, then strip surrounding quotes and punctuation.
pub fn normalize_sentence(sentence: &str) -> String {
    let folded = fold_whitespace(sentence);
    folded
        .trim_matches(|c: char| is_wrapping_char(c) || c.is_whitespace())
        .to_string()
}

/// True when `sentence` (normalized) occurs inside `article` (case-folded,
/// whitespace-collapsed). Empty sentences never match.
pub fn is_normalized_substring(sentence: &str, normalized_article: &str) -> bool {
    let needle = normalize_sentence(sentence);
    !needle.is_empty() && normalized_article.contains(&needle)
}

const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "mt", "gen", "gov", "sen", "rep", "lt",
    "col", "capt", "sgt", "inc", "corp", "co", "ltd", "vs", "etc", "no", "jan", "feb", "mar",
    "apr", "jun", "jul", "aug", "sep", "sept", "oct", "nov", "dec", "u.s", "u.k", "u.n", "e.g",
    "i.e", "a.m", "p.m", "ft", "ave", "blvd",
];

fn ends_with_abbreviation(token: &str) -> bool {
    let core = token
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .trim_end_matches('.')
        .to_lowercase();
    if core.is_empty() {
        return false;
    }
    // Single-letter initials such as "J." in "J. Smith".
    if core.chars().count() == 1 && core.chars().all(|c| c.is_alphabetic()) {
        return true;
    }
    ABBREVIATIONS.contains(&core.as_str())
}

/// Splits text into sentences on terminal punctuation (`.`, `!`, `?`,
/// optionally followed by closing quotes or brackets) that is followed by
/// whitespace, skipping common abbreviations and initials. Newline pairs
/// also end a sentence.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut current = String::new();
    let tokens: Vec<&str> = text.split_whitespace().collect();
    // Paragraph breaks are sentence boundaries regardless of punctuation.
    let paragraph_ends = paragraph_boundaries(text);
    let mut consumed = 0usize;
    for (i, token) in tokens.iter().enumerate() {
        if !current.is_empty() {
            current.push(' ');
        }
        current.push_str(token);
        consumed += 1;
        let stripped = token.trim_end_matches(['"', '\'', ')', ']', '”', '’']);
        let terminal = stripped.ends_with(['.', '!', '?']);
        let is_last = i + 1 == tokens.len();
        let break_here = if paragraph_ends.contains(&consumed) {
            true
        } else if terminal && !is_last {
            // A closing quote after the period ends the sentence even when
            // the word itself looks like an abbreviation ("no.").
            let quoted = stripped.len() != token.len();
            quoted || !(stripped.ends_with('.') && ends_with_abbreviation(stripped))
        } else {
            false
        };
        if break_here || is_last {
            let s = current.trim().to_string();
            if !s.is_empty() {
                sentences.push(s);
            }
            current.clear();
        }
    }
    sentences
}

/// Token counts (prefix lengths) at which a blank line occurs.
fn paragraph_boundaries(text: &str) -> Vec<usize> {
    let mut out = Vec::new();
    let mut count = 0usize;
    for (i, para) in text.split("\n\n").enumerate() {
        if i > 0 && count > 0 {
            out.push(count);
        }
        count += para.split_whitespace().count();
    }
    out
}

/// Strips a surrounding markdown code fence, if present.
pub fn strip_code_fence(raw: &str) -> &str {
    let t = raw.trim();
    if let Some(rest) = t.strip_prefix("```") {
        let rest = match rest.find('\n') {
            Some(nl) => &rest[nl + 1..],
            None => rest,
        };
        return rest.trim_end().strip_suffix("```").unwrap_or(rest).trim();
    }
    t
}
