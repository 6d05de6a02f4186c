//! `merge run`: caption a corpus into a JSONL file, one line per article.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::Args;
use log::{debug, info, warn};
use merge_core::ingest::{load_corpus, ArticleRecord, LoadOptions};
use merge_core::pipeline::{Pipeline, Provenance, StageTimings};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Corpus in canonical JSONL form.
    #[arg(long)]
    pub input: PathBuf,
    /// Captions file; overwritten unless `--resume` is given.
    #[arg(long)]
    pub output: PathBuf,
    /// Keep captions already in the output file and process only the rest.
    #[arg(long)]
    pub resume: bool,
    /// Stop at the first failed record.
    #[arg(long)]
    pub fail_fast: bool,
}

/// One line of the captions file. Exactly one of `caption` and `error` is
/// set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub article_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<RecordError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordError {
    pub stage: String,
    pub message: String,
    #[serde(default)]
    pub outage: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub captioned: usize,
    pub failed: usize,
    /// Already captioned in the output file and skipped.
    pub skipped: usize,
    pub timings: StageTotals,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTotals {
    pub hcma: Duration,
    pub matching: Duration,
    pub graph: Duration,
    pub generate: Duration,
}

impl StageTotals {
    fn add(&mut self, t: &StageTimings) {
        self.hcma += t.hcma;
        self.matching += t.matching;
        self.graph += t.graph;
        self.generate += t.generate;
    }
}

fn caption_one(pipeline: &Pipeline, rec: &ArticleRecord) -> (OutputRecord, StageTimings) {
    let failed = |stage: &str, message: String, outage| OutputRecord {
        article_id: rec.article_id.clone(),
        caption: None,
        provenance: None,
        error: Some(RecordError {
            stage: stage.into(),
            message,
            outage,
        }),
    };
    if let Err(m) = rec.validate() {
        return (failed("input", m, false), StageTimings::default());
    }
    let (out, timings) = pipeline.run_timed(&rec.image_ref, &rec.article_text());
    let record = match out {
        Ok(r) => OutputRecord {
            article_id: rec.article_id.clone(),
            caption: Some(r.caption),
            provenance: Some(r.provenance),
            error: None,
        },
        Err(e) => failed(&e.stage, e.message, e.outage),
    };
    (record, timings)
}

/// Keeps the captioned lines of an earlier output file, dropping failures
/// and any torn final line, and returns their ids.
fn prepare_resume(path: &Path) -> Result<HashSet<String>> {
    let mut done = HashSet::new();
    if !path.exists() {
        return Ok(done);
    }
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut kept = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        match serde_json::from_str::<OutputRecord>(&line) {
            Ok(r) if r.caption.is_some() => {
                if done.insert(r.article_id.clone()) {
                    kept.push(line);
                }
            }
            Ok(_) => {}
            Err(_) if line.trim().is_empty() => {}
            Err(e) => warn!("{}: dropping unreadable line: {e}", path.display()),
        }
    }
    let tmp = path.with_extension("resume.tmp");
    let mut w = BufWriter::new(File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?);
    for line in &kept {
        writeln!(w, "{line}").map_err(|e| CliError::io(&tmp, e))?;
    }
    w.flush().map_err(|e| CliError::io(&tmp, e))?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))?;
    Ok(done)
}

/// Captions every record not already done. Records are processed in chunks
/// on `workers` threads and written in input order, so the output does not
/// depend on the worker count.
pub fn cmd_run(pipeline: &Pipeline, args: &RunArgs, workers: usize) -> Result<RunSummary> {
    let mut summary = RunSummary::default();
    let done = if args.resume {
        prepare_resume(&args.output)?
    } else {
        HashSet::new()
    };
    let options = LoadOptions {
        validate_fields: false,
        ..LoadOptions::default()
    };
    let mut corpus = load_corpus(&args.input, options)?;
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .truncate(false)
        .open(&args.output)
        .map_err(|e| CliError::io(&args.output, e))?;
    if !args.resume {
        file.set_len(0).map_err(|e| CliError::io(&args.output, e))?;
    }
    let mut out = BufWriter::new(file);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {workers} workers: {e}")))?;
    let chunk_size = workers * 4;
    let started = Instant::now();
    loop {
        let mut chunk = Vec::with_capacity(chunk_size);
        for rec in corpus.by_ref() {
            let rec = rec?;
            if done.contains(&rec.article_id) {
                summary.skipped += 1;
                continue;
            }
            chunk.push(rec);
            if chunk.len() == chunk_size {
                break;
            }
        }
        if chunk.is_empty() {
            break;
        }
        let results: Vec<(OutputRecord, StageTimings)> =
            pool.install(|| chunk.par_iter().map(|r| caption_one(pipeline, r)).collect());
        for (record, timings) in results {
            summary.timings.add(&timings);
            debug!(
                "{}: hcma {:?}, matching {:?}, graph {:?}, generate {:?}",
                record.article_id, timings.hcma, timings.matching, timings.graph, timings.generate
            );
            let line = serde_json::to_string(&record).map_err(|e| CliError::Data(e.to_string()))?;
            writeln!(out, "{line}").map_err(|e| CliError::io(&args.output, e))?;
            match &record.error {
                None => summary.captioned += 1,
                Some(err) => {
                    summary.failed += 1;
                    warn!("{}: failed at {}: {}", record.article_id, err.stage, err.message);
                    if args.fail_fast {
                        out.flush().map_err(|e| CliError::io(&args.output, e))?;
                        let msg = format!("{}: failed at {}: {}", record.article_id, err.stage, err.message);
                        return Err(if err.outage { CliError::Gateway(msg) } else { CliError::Data(msg) });
                    }
                }
            }
        }
        out.flush().map_err(|e| CliError::io(&args.output, e))?;
        info!(
            "{} captioned, {} failed, {} skipped ({:.1}s)",
            summary.captioned,
            summary.failed,
            summary.skipped,
            started.elapsed().as_secs_f64()
        );
    }
    let t = summary.timings;
    info!(
        "stage totals: hcma {:?}, matching {:?}, graph {:?}, generate {:?}",
        t.hcma, t.matching, t.graph, t.generate
    );
    Ok(summary)
}
