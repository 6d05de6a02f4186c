//! `merge eval`: score a captions file against the gold captions of a
//! corpus.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use log::warn;
use merge_core::ingest::{load_corpus, LoadOptions};
use merge_core::metrics::{evaluate, Averaging, EvalCorpus, EvalItem, EvalReport};
use merge_core::ner::EntityTagger;

use crate::error::{CliError, Result};
use crate::run::OutputRecord;

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AveragingArg {
    Micro,
    Macro,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Captions file written by `merge run`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Corpus whose records carry `gold_caption`.
    #[arg(long)]
    pub gold: PathBuf,
    /// Also write the report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "micro")]
    pub averaging: AveragingArg,
}

const MAX_LISTED: usize = 20;

fn listing(ids: &[&str]) -> String {
    let mut s = ids.iter().take(MAX_LISTED).copied().collect::<Vec<_>>().join(", ");
    if ids.len() > MAX_LISTED {
        s.push_str(&format!(", ... ({} more)", ids.len() - MAX_LISTED));
    }
    s
}

fn read_predictions(path: &Path) -> Result<BTreeMap<String, String>> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: OutputRecord = serde_json::from_str(&line)
            .map_err(|e| CliError::Data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        let caption = r.caption.unwrap_or_else(|| {
            warn!("{}: no caption (failed run), scored as empty", r.article_id);
            String::new()
        });
        if out.insert(r.article_id.clone(), caption).is_some() {
            return Err(CliError::Data(format!("{}: duplicate article_id {}", path.display(), r.article_id)));
        }
    }
    Ok(out)
}

/// Pairs predictions with gold captions in corpus order. Ids present on
/// only one side are an error that lists them.
pub fn aligned_corpus(predictions: &Path, gold: &Path) -> Result<EvalCorpus> {
    let mut preds = read_predictions(predictions)?;
    let mut items = Vec::new();
    let mut missing = Vec::new();
    for rec in load_corpus(gold, LoadOptions::default())? {
        let rec = rec?;
        let Some(reference) = rec.gold_caption.filter(|g| !g.trim().is_empty()) else {
            return Err(CliError::Data(format!("{}: {} has no gold caption", gold.display(), rec.article_id)));
        };
        match preds.remove(&rec.article_id) {
            Some(candidate) => items.push(EvalItem {
                item_id: rec.article_id,
                candidate,
                references: vec![reference],
            }),
            None => missing.push(rec.article_id),
        }
    }
    let extra: Vec<&str> = preds.keys().map(String::as_str).collect();
    if !missing.is_empty() || !extra.is_empty() {
        let mut msg = String::from("predictions and gold are not aligned");
        if !missing.is_empty() {
            let ids: Vec<&str> = missing.iter().map(String::as_str).collect();
            msg.push_str(&format!("; no prediction for {}", listing(&ids)));
        }
        if !extra.is_empty() {
            msg.push_str(&format!("; not in gold: {}", listing(&extra)));
        }
        return Err(CliError::Data(msg));
    }
    EvalCorpus::new(items).map_err(|e| CliError::Data(e.to_string()))
}

pub fn cmd_eval(args: &EvalArgs, tagger: &dyn EntityTagger) -> Result<EvalReport> {
    let corpus = aligned_corpus(&args.predictions, &args.gold)?;
    let averaging = match args.averaging {
        AveragingArg::Micro => Averaging::Micro,
        AveragingArg::Macro => Averaging::Macro,
    };
    let report = evaluate(&corpus, tagger, averaging).map_err(|e| CliError::Data(e.to_string()))?;
    if let Some(path) = &args.out {
        let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?;
        std::fs::write(path, json + "\n").map_err(|e| CliError::io(path, e))?;
    }
    Ok(report)
}
