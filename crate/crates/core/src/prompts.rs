//! Versioned prompt templates.
//!
//! A template file starts with `#` header lines, one of which must be
//! `# version: N`; the rest is the body. Placeholders are upper-case names in
//! braces (`{ARTICLE}`); `{IMAGE}` marks where the image part goes. Other
//! brace text (such as JSON examples) is left alone.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::gateways::{ImageRef, Part};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template {name}: missing `# version:` header")]
    MissingVersion { name: String },
    #[error("template {name}: unsupported version {version}")]
    Version { name: String, version: u32 },
    #[error("template {name}: no value for placeholder {{{placeholder}}}")]
    MissingValue { name: String, placeholder: String },
    #[error("template {name}: uses {{IMAGE}} but no image was supplied")]
    MissingImage { name: String },
    #[error("cannot read template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub const TEMPLATE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub name: String,
    pub version: u32,
    body: String,
}

enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn pieces(body: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let name_len = after
            .find(|c: char| !(c.is_ascii_uppercase() || c == '_'))
            .unwrap_or(after.len());
        if name_len > 0 && after[name_len..].starts_with('}') {
            out.push(Piece::Text(&rest[..open]));
            out.push(Piece::Slot(&after[..name_len]));
            rest = &after[name_len + 1..];
        } else {
            out.push(Piece::Text(&rest[..open + 1]));
            rest = after;
        }
    }
    out.push(Piece::Text(rest));
    out
}

impl PromptTemplate {
    pub fn parse(name: &str, raw: &str) -> Result<Self, PromptError> {
        let mut version = None;
        let mut body_start = 0;
        for line in raw.split_inclusive('\n') {
            let t = line.trim();
            if !t.starts_with('#') {
                break;
            }
            if let Some(v) = t.trim_start_matches('#').trim().strip_prefix("version:") {
                version = v.trim().parse::<u32>().ok();
            }
            body_start += line.len();
        }
        let version = version.ok_or_else(|| PromptError::MissingVersion { name: name.into() })?;
        if version != TEMPLATE_VERSION {
            return Err(PromptError::Version {
                name: name.into(),
                version,
            });
        }
        Ok(Self {
            name: name.into(),
            version,
            body: raw[body_start..].to_string(),
        })
    }

    pub fn placeholders(&self) -> Vec<&str> {
        pieces(&self.body)
            .into_iter()
            .filter_map(|p| match p {
                Piece::Slot(s) => Some(s),
                Piece::Text(_) => None,
            })
            .collect()
    }

    pub fn uses_image(&self) -> bool {
        self.placeholders().contains(&"IMAGE")
    }

    /// Fills placeholders and splits the result into message parts, with the
    /// image part at the `{IMAGE}` position.
    pub fn render(&self, values: &[(&str, &str)], image: Option<&ImageRef>) -> Result<Vec<Part>, PromptError> {
        let mut parts = Vec::new();
        let mut buf = String::new();
        for piece in pieces(&self.body) {
            match piece {
                Piece::Text(t) => buf.push_str(t),
                Piece::Slot("IMAGE") => {
                    let image = image.ok_or_else(|| PromptError::MissingImage { name: self.name.clone() })?;
                    if !buf.trim().is_empty() {
                        parts.push(Part::Text { text: buf.clone() });
                    }
                    buf.clear();
                    parts.push(Part::Image { image: image.clone() });
                }
                Piece::Slot(slot) => {
                    let v = values
                        .iter()
                        .find(|(k, _)| *k == slot)
                        .ok_or_else(|| PromptError::MissingValue {
                            name: self.name.clone(),
                            placeholder: slot.to_string(),
                        })?;
                    buf.push_str(v.1);
                }
            }
        }
        let tail = buf.trim_start_matches('\n');
        if !tail.trim().is_empty() {
            parts.push(Part::Text { text: tail.to_string() });
        }
        Ok(parts)
    }

    /// Rendered text only (image parts dropped).
    pub fn render_text(&self, values: &[(&str, &str)]) -> Result<String, PromptError> {
        let dummy = ImageRef::new("mem://");
        let parts = self.render(values, Some(&dummy))?;
        Ok(parts
            .into_iter()
            .filter_map(|p| match p {
                Part::Text { text } => Some(text),
                Part::Image { .. } => None,
            })
            .collect())
    }
}

/// The five templates the pipeline uses.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub hypothesis: PromptTemplate,
    pub selection: PromptTemplate,
    pub summary: PromptTemplate,
    pub relations: PromptTemplate,
    pub caption: PromptTemplate,
}

const BUILTIN: [(&str, &str); 5] = [
    ("hypothesis", include_str!("../prompts/hypothesis.txt")),
    ("selection", include_str!("../prompts/selection.txt")),
    ("summary", include_str!("../prompts/summary.txt")),
    ("relations", include_str!("../prompts/relations.txt")),
    ("caption", include_str!("../prompts/caption.txt")),
];

impl Default for PromptSet {
    fn default() -> Self {
        Self::from_sources(BUILTIN.iter().map(|(n, s)| (*n, s.to_string())).collect())
            .expect("built-in templates are valid")
    }
}

impl PromptSet {
    fn from_sources(mut src: BTreeMap<&str, String>) -> Result<Self, PromptError> {
        let mut take = |name: &str| PromptTemplate::parse(name, &src.remove(name).unwrap_or_default());
        Ok(Self {
            hypothesis: take("hypothesis")?,
            selection: take("selection")?,
            summary: take("summary")?,
            relations: take("relations")?,
            caption: take("caption")?,
        })
    }

    /// Built-in templates, overridden by any `<name>.txt` found in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut src: BTreeMap<&str, String> = BUILTIN.iter().map(|(n, s)| (*n, s.to_string())).collect();
        for (name, _) in BUILTIN {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                let raw = std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                src.insert(name, raw);
            }
        }
        Self::from_sources(src)
    }
}
