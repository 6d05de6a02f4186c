//! Canonical article corpus: one JSON record per line.
//!
//! Fields: `article_id` (string, unique), `image_ref` (string), `headline`
//! (optional string), `body` (non-empty string), `gold_caption` (optional
//! string) and `split` (`train`, `val` or `test`). Unknown fields are
//! ignored. Blank lines are skipped.

pub mod fixtures;

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateways::ImageRef;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArticleRecord {
    pub article_id: String,
    pub image_ref: ImageRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub headline: Option<String>,
    pub body: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_caption: Option<String>,
    pub split: Split,
}

impl ArticleRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.article_id.trim().is_empty() {
            return Err("article_id is empty".into());
        }
        if self.image_ref.as_str().trim().is_empty() {
            return Err("image_ref is empty".into());
        }
        if self.body.trim().is_empty() {
            return Err("body is empty".into());
        }
        Ok(())
    }

    /// Headline and body as one text, separated by a blank line.
    pub fn article_text(&self) -> String {
        match self.headline.as_deref().map(str::trim).filter(|h| !h.is_empty()) {
            Some(h) => format!("{h}\n\n{}", self.body),
            None => self.body.clone(),
        }
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("{invalid} of {total} lines invalid, over the allowed rate of {max_rate}")]
    TooManyErrors { invalid: usize, total: usize, max_rate: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoadMode {
    /// The first invalid line ends the stream with an error.
    #[default]
    Strict,
    /// Invalid lines are reported and skipped.
    Lenient,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    pub mode: LoadMode,
    /// Lenient mode aborts once the share of invalid lines exceeds this.
    pub max_error_rate: f64,
    /// Lines read before the rate is enforced mid-stream; the final check
    /// at end of input always applies.
    pub min_lines_for_rate: usize,
    pub check_duplicates: bool,
    /// Reject records with empty ids, image references or bodies. Callers
    /// that report such records themselves can turn this off.
    pub validate_fields: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            mode: LoadMode::Strict,
            max_error_rate: 0.05,
            min_lines_for_rate: 100,
            check_duplicates: true,
            validate_fields: true,
        }
    }
}

impl LoadOptions {
    pub fn lenient() -> Self {
        Self {
            mode: LoadMode::Lenient,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: usize,
    pub message: String,
}

/// Streaming reader over canonical records. Memory use does not grow with
/// the corpus apart from a 16-byte digest per id for duplicate detection.
pub struct CorpusStream<R> {
    reader: R,
    options: LoadOptions,
    line_no: usize,
    records_lines: usize,
    invalid: usize,
    seen: HashSet<u128>,
    buf: String,
    diagnostics: Vec<Diagnostic>,
    done: bool,
}

/// At most this many diagnostics are kept; the count is always exact.
const MAX_DIAGNOSTICS: usize = 1000;

pub fn load_corpus(path: &Path, options: LoadOptions) -> Result<CorpusStream<BufReader<File>>, IngestError> {
    let f = File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(CorpusStream::new(BufReader::new(f), options))
}

fn id_digest(id: &str) -> u128 {
    let d = Sha256::digest(id.as_bytes());
    u128::from_le_bytes(d[..16].try_into().expect("16 bytes"))
}

impl<R: BufRead> CorpusStream<R> {
    pub fn new(reader: R, options: LoadOptions) -> Self {
        Self {
            reader,
            options,
            line_no: 0,
            records_lines: 0,
            invalid: 0,
            seen: HashSet::new(),
            buf: String::new(),
            diagnostics: Vec::new(),
            done: false,
        }
    }

    /// Invalid lines skipped so far (lenient mode).
    pub fn diagnostics(&self) -> &[Diagnostic] {
        &self.diagnostics
    }

    pub fn invalid_count(&self) -> usize {
        self.invalid
    }

    fn parse_line(&mut self, line: &str) -> Result<ArticleRecord, String> {
        let rec: ArticleRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        if self.options.validate_fields {
            rec.validate()?;
        }
        if self.options.check_duplicates && !self.seen.insert(id_digest(&rec.article_id)) {
            return Err(format!("duplicate article_id {}", rec.article_id));
        }
        Ok(rec)
    }

    fn rate_exceeded(&self) -> bool {
        self.records_lines > 0 && self.invalid as f64 / self.records_lines as f64 > self.options.max_error_rate
    }

    fn too_many(&self) -> IngestError {
        IngestError::TooManyErrors {
            invalid: self.invalid,
            total: self.records_lines,
            max_rate: self.options.max_error_rate,
        }
    }
}

impl<R: BufRead> Iterator for CorpusStream<R> {
    type Item = Result<ArticleRecord, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        loop {
            self.buf.clear();
            match self.reader.read_line(&mut self.buf) {
                Ok(0) => {
                    self.done = true;
                    if self.options.mode == LoadMode::Lenient && self.rate_exceeded() {
                        return Some(Err(self.too_many()));
                    }
                    return None;
                }
                Ok(_) => {}
                Err(source) => {
                    self.done = true;
                    return Some(Err(IngestError::Io {
                        path: format!("line {}", self.line_no + 1),
                        source,
                    }));
                }
            }
            self.line_no += 1;
            let line = std::mem::take(&mut self.buf);
            let trimmed = line.trim();
            if trimmed.is_empty() {
                self.buf = line;
                continue;
            }
            self.records_lines += 1;
            let parsed = self.parse_line(trimmed);
            self.buf = line;
            match parsed {
                Ok(rec) => return Some(Ok(rec)),
                Err(message) => {
                    if self.options.mode == LoadMode::Strict {
                        self.done = true;
                        return Some(Err(IngestError::Invalid {
                            line: self.line_no,
                            message,
                        }));
                    }
                    warn!("line {}: {message}; skipping", self.line_no);
                    self.invalid += 1;
                    if self.diagnostics.len() < MAX_DIAGNOSTICS {
                        self.diagnostics.push(Diagnostic {
                            line: self.line_no,
                            message,
                        });
                    }
                    if self.records_lines >= self.options.min_lines_for_rate && self.rate_exceeded() {
                        self.done = true;
                        return Some(Err(self.too_many()));
                    }
                }
            }
        }
    }
}

/// Writes one record as a canonical line.
pub fn write_record(w: &mut impl Write, rec: &ArticleRecord) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, rec)?;
    w.write_all(b"\n")
}
