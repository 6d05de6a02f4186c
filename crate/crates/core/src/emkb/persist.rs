//! On-disk layout of a knowledge base directory:
//!
//! - `entities.jsonl`: one JSON record per entity (sorted by id) holding the
//!   name, type, background text, subgraph and asset metadata. Embeddings are
//!   referenced by absolute byte offset into `embeddings.bin`.
//! - `embeddings.bin`: 24-byte header (`EMKB` magic, format version `u32`,
//!   face dim `u32`, image dim `u32`, vector count `u64`, all little-endian)
//!   followed by row-major little-endian `f32` vectors.
//! - `MANIFEST`: format version, store settings and a SHA-256 checksum plus
//!   byte length for each data file.
//!
//! Loading validates magic, version, lengths and checksums before any record
//! is parsed, so a failed load never yields a partial store.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{EmkbError, EntityRecord, EntityType, ImageAsset, ImageSource, KnowledgeBase, StoreConfig};
use crate::graph::{GraphRecord, KnowledgeGraph};
use crate::vector::EmbeddingVector;

pub const MAGIC: &[u8; 4] = b"EMKB";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;
pub const ENTITIES_FILE: &str = "entities.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const MANIFEST_FILE: &str = "MANIFEST";
const MANIFEST_TAG: &str = "merge-emkb-manifest";

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed store: {0}")]
    Format(String),
    #[error("unsupported format version {found} (this build reads up to {supported})")]
    Version { found: u32, supported: u32 },
    #[error("{file} is truncated: expected {expected} bytes, found {actual}")]
    Truncated {
        file: &'static str,
        expected: u64,
        actual: u64,
    },
    #[error("{file} checksum mismatch")]
    Checksum { file: &'static str },
    #[error("{ENTITIES_FILE} line {line}: {message}")]
    Record { line: usize, message: String },
    #[error(transparent)]
    Store(#[from] EmkbError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistError + '_ {
    move |source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct VectorRef {
    offset: u64,
    dim: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct AssetLine {
    asset_id: String,
    source: ImageSource,
    uri: String,
    image: VectorRef,
    #[serde(default)]
    faces: Vec<VectorRef>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntityLine {
    id: String,
    name: String,
    #[serde(rename = "type")]
    entity_type: EntityType,
    #[serde(default)]
    background_text: String,
    #[serde(default)]
    subgraph: GraphRecord,
    #[serde(default)]
    assets: Vec<AssetLine>,
}

struct VectorWriter {
    bytes: Vec<u8>,
    count: u64,
}

impl VectorWriter {
    fn push(&mut self, v: &EmbeddingVector) -> VectorRef {
        let offset = self.bytes.len() as u64;
        for x in v.as_slice() {
            self.bytes.extend_from_slice(&x.to_le_bytes());
        }
        self.count += 1;
        VectorRef {
            offset,
            dim: v.dim() as u32,
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), PersistError> {
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    let dst = dir.join(name);
    fs::rename(&tmp, &dst).map_err(io_err(&dst))
}

impl KnowledgeBase {
    /// Writes the store into `dir` (created if missing). The manifest is
    /// replaced last.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), PersistError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let cfg = &self.config;

        let mut vectors = VectorWriter {
            bytes: vec![0; HEADER_LEN],
            count: 0,
        };
        let mut jsonl = String::new();
        for r in self.records.values() {
            let assets = r
                .images
                .iter()
                .map(|a| AssetLine {
                    asset_id: a.asset_id.clone(),
                    source: a.source,
                    uri: a.uri.clone(),
                    image: vectors.push(&a.image_embedding),
                    faces: a.face_embeddings.iter().map(|f| vectors.push(f)).collect(),
                })
                .collect();
            let line = EntityLine {
                id: r.entity_id.clone(),
                name: r.canonical_name.clone(),
                entity_type: r.entity_type,
                background_text: r.background_text.clone(),
                subgraph: GraphRecord::from(&r.subgraph),
                assets,
            };
            jsonl.push_str(&serde_json::to_string(&line).expect("entity line serializes"));
            jsonl.push('\n');
        }
        let mut header = Vec::with_capacity(HEADER_LEN);
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        header.extend_from_slice(&(cfg.face_dim as u32).to_le_bytes());
        header.extend_from_slice(&(cfg.image_dim as u32).to_le_bytes());
        header.extend_from_slice(&vectors.count.to_le_bytes());
        vectors.bytes[..HEADER_LEN].copy_from_slice(&header);

        let manifest = format!(
            "{MANIFEST_TAG} {FORMAT_VERSION}\nimage_cap {}\ndelta {}\nsha256 {} {} {ENTITIES_FILE}\nsha256 {} {} {EMBEDDINGS_FILE}\n",
            cfg.image_cap,
            cfg.delta,
            sha256_hex(jsonl.as_bytes()),
            jsonl.len(),
            sha256_hex(&vectors.bytes),
            vectors.bytes.len(),
        );
        write_atomic(dir, ENTITIES_FILE, jsonl.as_bytes())?;
        write_atomic(dir, EMBEDDINGS_FILE, &vectors.bytes)?;
        write_atomic(dir, MANIFEST_FILE, manifest.as_bytes())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, PersistError> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest_text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let manifest = Manifest::parse(&manifest_text)?;

        let emb_path = dir.join(EMBEDDINGS_FILE);
        let emb = fs::read(&emb_path).map_err(io_err(&emb_path))?;
        if emb.len() < 4 || &emb[..4] != MAGIC {
            return Err(PersistError::Format(format!("{EMBEDDINGS_FILE}: bad magic")));
        }
        if emb.len() < HEADER_LEN {
            return Err(PersistError::Truncated {
                file: EMBEDDINGS_FILE,
                expected: HEADER_LEN as u64,
                actual: emb.len() as u64,
            });
        }
        let u32_at = |at: usize| u32::from_le_bytes(emb[at..at + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version > FORMAT_VERSION || version == 0 {
            return Err(PersistError::Version {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let face_dim = u32_at(8) as usize;
        let image_dim = u32_at(12) as usize;
        let count = u64::from_le_bytes(emb[16..24].try_into().expect("8 bytes"));

        let ent_path = dir.join(ENTITIES_FILE);
        let entities = fs::read(&ent_path).map_err(io_err(&ent_path))?;
        for (file, bytes, entry) in [
            (ENTITIES_FILE, &entities, &manifest.entities),
            (EMBEDDINGS_FILE, &emb, &manifest.embeddings),
        ] {
            if (bytes.len() as u64) < entry.len {
                return Err(PersistError::Truncated {
                    file,
                    expected: entry.len,
                    actual: bytes.len() as u64,
                });
            }
            if bytes.len() as u64 != entry.len || sha256_hex(bytes) != entry.sha256 {
                return Err(PersistError::Checksum { file });
            }
        }

        let config = StoreConfig {
            face_dim,
            image_dim,
            image_cap: manifest.image_cap,
            delta: manifest.delta,
        };
        let mut kb = KnowledgeBase::new(config)?;
        let text = std::str::from_utf8(&entities)
            .map_err(|e| PersistError::Format(format!("{ENTITIES_FILE}: {e}")))?;
        let mut seen_vectors = 0u64;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let line_no = i + 1;
            let rec_err = |message: String| PersistError::Record {
                line: line_no,
                message,
            };
            let parsed: EntityLine = serde_json::from_str(line).map_err(|e| rec_err(e.to_string()))?;
            let read_vec = |r: &VectorRef| -> Result<EmbeddingVector, PersistError> {
                let start = r.offset as usize;
                let end = start + r.dim as usize * 4;
                if start < HEADER_LEN || end > emb.len() {
                    return Err(PersistError::Truncated {
                        file: EMBEDDINGS_FILE,
                        expected: end as u64,
                        actual: emb.len() as u64,
                    });
                }
                let values = emb[start..end]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                EmbeddingVector::new(values).map_err(|e| rec_err(e.to_string()))
            };
            let mut images = Vec::with_capacity(parsed.assets.len());
            for a in &parsed.assets {
                let image_embedding = read_vec(&a.image)?;
                let face_embeddings = a.faces.iter().map(read_vec).collect::<Result<Vec<_>, _>>()?;
                seen_vectors += 1 + face_embeddings.len() as u64;
                images.push(ImageAsset {
                    asset_id: a.asset_id.clone(),
                    source: a.source,
                    image_embedding,
                    face_embeddings,
                    uri: a.uri.clone(),
                });
            }
            let subgraph = KnowledgeGraph::try_from(parsed.subgraph).map_err(|e| rec_err(e.to_string()))?;
            kb.upsert(EntityRecord {
                entity_id: parsed.id,
                canonical_name: parsed.name,
                entity_type: parsed.entity_type,
                images,
                background_text: parsed.background_text,
                subgraph,
            })?;
        }
        if seen_vectors != count {
            return Err(PersistError::Format(format!(
                "header declares {count} vectors, records reference {seen_vectors}"
            )));
        }
        Ok(kb)
    }
}

struct FileEntry {
    sha256: String,
    len: u64,
}

struct Manifest {
    image_cap: usize,
    delta: f64,
    entities: FileEntry,
    embeddings: FileEntry,
}

impl Manifest {
    fn parse(text: &str) -> Result<Self, PersistError> {
        let bad = |m: &str| PersistError::Format(format!("{MANIFEST_FILE}: {m}"));
        let mut lines = text.lines();
        let first = lines.next().ok_or_else(|| bad("empty"))?;
        let version = first
            .strip_prefix(MANIFEST_TAG)
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| bad("missing header"))?;
        if version > FORMAT_VERSION || version == 0 {
            return Err(PersistError::Version {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let (mut image_cap, mut delta, mut entities, mut embeddings) = (None, None, None, None);
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                ["image_cap", v] => image_cap = v.parse().ok(),
                ["delta", v] => delta = v.parse().ok(),
                ["sha256", hash, len, file] => {
                    let entry = FileEntry {
                        sha256: hash.to_string(),
                        len: len.parse().map_err(|_| bad("bad length"))?,
                    };
                    match *file {
                        ENTITIES_FILE => entities = Some(entry),
                        EMBEDDINGS_FILE => embeddings = Some(entry),
                        other => return Err(bad(&format!("unknown file {other}"))),
                    }
                }
                _ => return Err(bad(&format!("unrecognized line {line:?}"))),
            }
        }
        Ok(Self {
            image_cap: image_cap.ok_or_else(|| bad("missing image_cap"))?,
            delta: delta.ok_or_else(|| bad("missing delta"))?,
            entities: entities.ok_or_else(|| bad("missing entities checksum"))?,
            embeddings: embeddings.ok_or_else(|| bad("missing embeddings checksum"))?,
        })
    }
}
