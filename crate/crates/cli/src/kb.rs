//! `merge kb`: build, filter, inspect and query a knowledge base directory.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};
use log::info;
use merge_core::emkb::persist::MANIFEST_FILE;
use merge_core::emkb::{EntityRecord, KnowledgeBase, Modality, StoreConfig};
use merge_core::EmbeddingVector;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

#[derive(Debug, Subcommand)]
pub enum KbCommand {
    /// Create a store, or update an existing one, from entity records.
    Build(BuildArgs),
    /// Drop images too similar to holdout images or to each other.
    Dedup(DedupArgs),
    /// Print entity, image and triple counts.
    Stats(StatsArgs),
    /// Nearest stored entities for an embedding.
    Query(QueryArgs),
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// JSONL file, one entity record per line.
    #[arg(long)]
    pub records: PathBuf,
    /// Face embedding dimension; required when creating a store.
    #[arg(long)]
    pub face_dim: Option<usize>,
    /// Image embedding dimension; required when creating a store.
    #[arg(long)]
    pub image_dim: Option<usize>,
    /// Images kept per entity.
    #[arg(long)]
    pub image_cap: Option<usize>,
    /// Run the delta filter over the whole store after ingesting.
    #[arg(long)]
    pub dedup: bool,
    /// JSON array of embeddings the stored images must not resemble.
    #[arg(long)]
    pub holdout: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DedupArgs {
    #[arg(long)]
    pub holdout: Option<PathBuf>,
    /// Report without rewriting the store.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModalityArg {
    Face,
    Image,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// JSON array of numbers.
    #[arg(long)]
    pub embedding: PathBuf,
    #[arg(long, value_enum, default_value = "image")]
    pub modality: ModalityArg,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long)]
    pub json: bool,
}

pub fn open(path: &Path) -> Result<KnowledgeBase> {
    if !path.join(MANIFEST_FILE).exists() {
        return Err(CliError::Data(format!("{} is not a knowledge base directory", path.display())));
    }
    Ok(KnowledgeBase::load(path)?)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_vectors(path: Option<&Path>) -> Result<Vec<EmbeddingVector>> {
    match path {
        Some(p) => read_json(p),
        None => Ok(Vec::new()),
    }
}

pub fn cmd_kb(cmd: &KbCommand, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let path = cfg.kb_path()?;
    match cmd {
        KbCommand::Build(a) => build(path, a, cfg, out),
        KbCommand::Dedup(a) => {
            let mut kb = open(path)?;
            let holdout = read_vectors(a.holdout.as_deref())?;
            let report = kb.dedup(&holdout, cfg.thresholds.delta)?;
            for (owner, r) in &report.removed {
                writeln!(out, "removed {} from {owner}: {}", r.asset_id(), json!(r)).map_err(stdout_err)?;
            }
            writeln!(
                out,
                "examined {} images, removed {} (delta {})",
                report.examined,
                report.removed.len(),
                cfg.thresholds.delta
            )
            .map_err(stdout_err)?;
            if !a.dry_run && !report.removed.is_empty() {
                kb.save(path)?;
            }
            Ok(())
        }
        KbCommand::Stats(a) => {
            let kb = open(path)?;
            let s = kb.stats();
            if a.json {
                writeln!(out, "{}", json!(s)).map_err(stdout_err)?;
            } else {
                writeln!(
                    out,
                    "entities {}\nimages {}\nfaces {}\nsubgraph_nodes {}\ntriples {}",
                    s.entities, s.images, s.faces, s.subgraph_nodes, s.triples
                )
                .map_err(stdout_err)?;
            }
            Ok(())
        }
        KbCommand::Query(a) => {
            let kb = open(path)?;
            let query: EmbeddingVector = read_json(&a.embedding)?;
            let modality = match a.modality {
                ModalityArg::Face => Modality::Face,
                ModalityArg::Image => Modality::Image,
            };
            if a.k == 0 {
                return Err(CliError::Usage("--k must be at least 1".into()));
            }
            let hits = kb.nearest_entities(&query, modality, a.k)?;
            for (rank, h) in hits.iter().enumerate() {
                let name = kb.get(&h.entity_id).map(|r| r.canonical_name.as_str()).unwrap_or("");
                if a.json {
                    let line = json!({
                        "rank": rank + 1,
                        "entity_id": h.entity_id,
                        "canonical_name": name,
                        "asset_id": h.asset_id,
                        "similarity": h.similarity,
                    });
                    writeln!(out, "{line}").map_err(stdout_err)?;
                } else {
                    writeln!(out, "{}\t{}\t{}\t{:.6}\t{name}", rank + 1, h.entity_id, h.asset_id, h.similarity)
                        .map_err(stdout_err)?;
                }
            }
            Ok(())
        }
    }
}

fn build(path: &Path, a: &BuildArgs, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let mut kb = if path.join(MANIFEST_FILE).exists() {
        let kb = KnowledgeBase::load(path)?;
        let c = kb.config();
        if a.face_dim.is_some_and(|d| d != c.face_dim) || a.image_dim.is_some_and(|d| d != c.image_dim) {
            return Err(CliError::Usage(format!(
                "{} already stores {}-dim faces and {}-dim images",
                path.display(),
                c.face_dim,
                c.image_dim
            )));
        }
        kb
    } else {
        let (Some(face_dim), Some(image_dim)) = (a.face_dim, a.image_dim) else {
            return Err(CliError::Usage("a new store needs --face-dim and --image-dim".into()));
        };
        let mut sc = StoreConfig::new(face_dim, image_dim);
        sc.delta = cfg.thresholds.delta;
        if let Some(cap) = a.image_cap {
            sc.image_cap = cap;
        }
        KnowledgeBase::new(sc).map_err(|e| CliError::Usage(e.to_string()))?
    };

    let file = File::open(&a.records).map_err(|e| CliError::io(&a.records, e))?;
    let (mut added, mut updated) = (0, 0);
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(&a.records, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EntityRecord = serde_json::from_str(&line)
            .map_err(|e| CliError::Data(format!("{} line {}: {e}", a.records.display(), i + 1)))?;
        let existed = kb.get(&record.entity_id).is_some();
        kb.upsert(record)
            .map_err(|e| CliError::Data(format!("{} line {}: {e}", a.records.display(), i + 1)))?;
        if existed {
            updated += 1;
        } else {
            added += 1;
        }
    }
    let mut removed = 0;
    if a.dedup || a.holdout.is_some() {
        let holdout = read_vectors(a.holdout.as_deref())?;
        removed = kb.dedup(&holdout, cfg.thresholds.delta)?.removed.len();
    }
    kb.save(path)?;
    info!("saved {} entities to {}", kb.len(), path.display());
    writeln!(out, "added {added}, updated {updated}, removed {removed} images; store has {} entities", kb.len())
        .map_err(stdout_err)
}

pub fn stdout_err(e: std::io::Error) -> CliError {
    CliError::Data(format!("writing output: {e}"))
}
