//! Tolerant parsing of structured model output.
//!
//! Models wrap JSON in code fences, prefix it with chatter, or emit broken
//! JSON. [`parse_structured`] strips fences, parses the first JSON value it
//! finds (ignoring trailing text) and checks it against the expected shape.
//! It never panics; failures come back as [`Malformed`] with a cause and,
//! when known, a byte position in the raw text.

use std::fmt;

use serde_json::Value;

use crate::gateways::StructuredSchema;
use crate::text::strip_code_fence;

#[derive(Debug, Clone, PartialEq)]
pub enum Structured {
    Hypothesis { caption: String, key_sentences: Vec<String> },
    Sentences(Vec<String>),
    Summary(String),
    /// `(source, target, relation)` in output order, unvalidated.
    Relations(Vec<(String, String, String)>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Malformed {
    pub cause: String,
    pub position: Option<usize>,
}

impl fmt::Display for Malformed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.position {
            Some(p) => write!(f, "{} (at byte {p})", self.cause),
            None => f.write_str(&self.cause),
        }
    }
}

fn malformed(cause: impl Into<String>, position: Option<usize>) -> Malformed {
    Malformed {
        cause: cause.into(),
        position,
    }
}

pub fn parse_structured(raw: &str, schema: StructuredSchema) -> Result<Structured, Malformed> {
    let body = strip_code_fence(raw);
    let base = offset_in(raw, body);
    match schema {
        StructuredSchema::Hypothesis => {
            let v = first_json(body, base)?;
            let obj = v.as_object().ok_or_else(|| malformed("expected a JSON object", None))?;
            let caption = string_field(obj, "caption")?;
            let key_sentences = string_array(
                obj.get("key_sentences")
                    .ok_or_else(|| malformed("missing field `key_sentences`", None))?,
                "key_sentences",
            )?;
            Ok(Structured::Hypothesis { caption, key_sentences })
        }
        StructuredSchema::SentenceSelection => {
            let v = first_json(body, base)?;
            let list = match &v {
                Value::Object(obj) => obj
                    .get("sentences")
                    .ok_or_else(|| malformed("missing field `sentences`", None))?,
                Value::Array(_) => &v,
                _ => return Err(malformed("expected an object or array", None)),
            };
            Ok(Structured::Sentences(string_array(list, "sentences")?))
        }
        StructuredSchema::Summary => {
            let t = body.trim();
            let text = if t.starts_with('{') {
                let v = first_json(t, base)?;
                let obj = v.as_object().ok_or_else(|| malformed("expected a JSON object", None))?;
                string_field(obj, "summary")?
            } else {
                t.to_string()
            };
            if text.trim().is_empty() {
                return Err(malformed("empty summary", None));
            }
            Ok(Structured::Summary(text.trim().to_string()))
        }
        StructuredSchema::Relations => parse_relations(body, base).map(Structured::Relations),
    }
}

fn offset_in(outer: &str, inner: &str) -> usize {
    (inner.as_ptr() as usize).saturating_sub(outer.as_ptr() as usize)
}

fn first_json(text: &str, base: usize) -> Result<Value, Malformed> {
    let start = text
        .find(['{', '['])
        .ok_or_else(|| malformed("no JSON value found", None))?;
    let slice = &text[start..];
    let mut stream = serde_json::Deserializer::from_str(slice).into_iter::<Value>();
    match stream.next() {
        Some(Ok(v)) => Ok(v),
        Some(Err(e)) => Err(malformed(
            format!("invalid JSON: {e}"),
            Some(base + start + line_col_offset(slice, e.line(), e.column())),
        )),
        None => Err(malformed("no JSON value found", Some(base + start))),
    }
}

fn line_col_offset(text: &str, line: usize, column: usize) -> usize {
    let mut off = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return off + column.saturating_sub(1).min(l.len());
        }
        off += l.len();
    }
    text.len()
}

fn string_field(obj: &serde_json::Map<String, Value>, field: &str) -> Result<String, Malformed> {
    match obj.get(field) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(malformed(format!("field `{field}` must be a string"), None)),
        None => Err(malformed(format!("missing field `{field}`"), None)),
    }
}

fn string_array(v: &Value, field: &str) -> Result<Vec<String>, Malformed> {
    let arr = v
        .as_array()
        .ok_or_else(|| malformed(format!("field `{field}` must be an array"), None))?;
    arr.iter()
        .map(|x| {
            x.as_str()
                .map(str::to_string)
                .ok_or_else(|| malformed(format!("field `{field}` must hold only strings"), None))
        })
        .collect()
}

fn parse_relations(text: &str, base: usize) -> Result<Vec<(String, String, String)>, Malformed> {
    let start = text
        .find(['[', '('])
        .ok_or_else(|| malformed("no relation list found", None))?;
    // JSON form: [["a","b","rel"], ...]
    if let Ok(Value::Array(items)) = serde_json::Deserializer::from_str(&text[start..])
        .into_iter::<Value>()
        .next()
        .unwrap_or(Ok(Value::Null))
    {
        return items
            .iter()
            .map(|it| {
                let parts = string_array(it, "relation")?;
                match <[String; 3]>::try_from(parts) {
                    Ok([s, t, r]) => Ok((s, t, r)),
                    Err(_) => Err(malformed("relation must have exactly 3 elements", None)),
                }
            })
            .collect();
    }
    TupleParser {
        src: text,
        pos: start,
        base,
    }
    .list()
}

/// Hand parser for `[("a", "b", "rel"), (c, d, rel)]`; quotes optional.
struct TupleParser<'a> {
    src: &'a str,
    pos: usize,
    base: usize,
}

impl TupleParser<'_> {
    fn err(&self, cause: &str) -> Malformed {
        malformed(cause, Some(self.base + self.pos))
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if !c.is_whitespace() {
                break;
            }
            self.pos += c.len_utf8();
        }
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn list(mut self) -> Result<Vec<(String, String, String)>, Malformed> {
        let bracketed = self.eat('[');
        let mut out = Vec::new();
        loop {
            self.skip_ws();
            match self.peek() {
                Some('(') => out.push(self.tuple()?),
                Some(']') if bracketed => {
                    self.pos += 1;
                    return Ok(out);
                }
                None if !bracketed => return Ok(out),
                None => return Err(self.err("unterminated relation list")),
                Some(_) if !bracketed => return Ok(out),
                Some(_) => return Err(self.err("expected `(` or `]`")),
            }
            if !self.eat(',') {
                self.skip_ws();
                if !bracketed && self.peek() != Some('(') {
                    return Ok(out);
                }
            }
        }
    }

    fn tuple(&mut self) -> Result<(String, String, String), Malformed> {
        self.eat('(');
        let mut items = Vec::new();
        loop {
            items.push(self.item()?);
            if self.eat(',') {
                continue;
            }
            if self.eat(')') {
                break;
            }
            return Err(self.err("expected `,` or `)` in tuple"));
        }
        match <[String; 3]>::try_from(items) {
            Ok([s, t, r]) => Ok((s, t, r)),
            Err(v) => Err(self.err(&format!("tuple has {} elements, expected 3", v.len()))),
        }
    }

    fn item(&mut self) -> Result<String, Malformed> {
        self.skip_ws();
        match self.peek() {
            Some(q @ ('"' | '\'')) => {
                self.pos += 1;
                let mut s = String::new();
                loop {
                    let Some(c) = self.peek() else {
                        return Err(self.err("unterminated string"));
                    };
                    self.pos += c.len_utf8();
                    if c == '\\' {
                        if let Some(n) = self.peek() {
                            self.pos += n.len_utf8();
                            s.push(n);
                        }
                    } else if c == q {
                        // An apostrophe inside a word ("O'Neil") is not a closing quote.
                        if q == '\'' && self.peek().is_some_and(|n| n.is_alphanumeric()) {
                            s.push(c);
                            continue;
                        }
                        return Ok(s);
                    } else {
                        s.push(c);
                    }
                }
            }
            Some(_) => {
                let rest = &self.src[self.pos..];
                let end = rest.find([',', ')']).ok_or_else(|| self.err("unterminated tuple"))?;
                let s = rest[..end].trim().to_string();
                self.pos += end;
                if s.is_empty() {
                    return Err(self.err("empty tuple element"));
                }
                Ok(s)
            }
            None => Err(self.err("unexpected end of input")),
        }
    }
}
