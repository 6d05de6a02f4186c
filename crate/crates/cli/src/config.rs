//! Run configuration: built-in defaults, then a TOML file, then flags.
//!
//! ```toml
//! version = 1
//! kb = "kb"
//! workers = 4
//!
//! [gateway]
//! kind = "mock"            # or "http"
//! mock_script = "mock_script.json"
//! base_url = "http://127.0.0.1:8000/v1"
//! model = "caption-model"
//!
//! [thresholds]
//! delta = 0.95
//! face_confidence = 0.8
//! tau_face = 0.4
//! tau_clip = 0.25
//! k_clip = 1
//!
//! [budget]
//! n_ctx = 1024
//! n_out = 50
//! max_triples = 64
//!
//! [retry]
//! limit = 3
//! backoff_ms = 250
//!
//! [serve]
//! addr = "127.0.0.1:8080"
//! drain_timeout_secs = 10
//! ```
//!
//! Relative paths in the file are resolved against the file's directory.
//! Secrets never live here; the HTTP API key comes from `MERGE_API_KEY`.

use std::path::{Path, PathBuf};
use std::time::Duration;

use merge_core::emkb::DEFAULT_DELTA;
use merge_core::gateways::{RetryPolicy, DEFAULT_BACKOFF_BASE, DEFAULT_RETRY_LIMIT};
use merge_core::pipeline::{PipelineConfig, DEFAULT_MAX_TRIPLES, DEFAULT_N_CTX, DEFAULT_N_OUT};
use merge_core::rmki::RmkiConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum GatewayKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySection {
    pub kind: GatewayKind,
    /// Script for the mock provider; without one every image gets a hashed
    /// embedding and no faces.
    pub mock_script: Option<PathBuf>,
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub timeout_secs: u64,
}

impl Default for GatewaySection {
    fn default() -> Self {
        Self {
            kind: GatewayKind::Mock,
            mock_script: None,
            base_url: None,
            model: None,
            timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub delta: f64,
    pub face_confidence: f64,
    pub tau_face: f64,
    pub tau_clip: f64,
    pub k_clip: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        let r = RmkiConfig::default();
        Self {
            delta: DEFAULT_DELTA,
            face_confidence: r.face_confidence,
            tau_face: r.tau_face,
            tau_clip: r.tau_clip,
            k_clip: r.k_clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budget {
    pub n_ctx: usize,
    pub n_out: u32,
    pub max_triples: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            n_ctx: DEFAULT_N_CTX,
            n_out: DEFAULT_N_OUT,
            max_triples: DEFAULT_MAX_TRIPLES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Retry {
    pub limit: u32,
    pub backoff_ms: u64,
}

impl Default for Retry {
    fn default() -> Self {
        Self {
            limit: DEFAULT_RETRY_LIMIT,
            backoff_ms: DEFAULT_BACKOFF_BASE.as_millis() as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub addr: String,
    pub drain_timeout_secs: f64,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
            drain_timeout_secs: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub kb: Option<PathBuf>,
    pub workers: usize,
    /// Salt for the mock provider's hashed embeddings when its script sets
    /// none.
    pub seed: Option<u64>,
    pub gateway: GatewaySection,
    pub thresholds: Thresholds,
    pub budget: Budget,
    pub retry: Retry,
    pub serve: ServeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            kb: None,
            workers: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(8),
            seed: None,
            gateway: GatewaySection::default(),
            thresholds: Thresholds::default(),
            budget: Budget::default(),
            retry: Retry::default(),
            serve: ServeSection::default(),
        }
    }
}

/// Values given on the command line; each one beats the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub kb: Option<PathBuf>,
    pub gateway: Option<GatewayKind>,
    pub mock_script: Option<PathBuf>,
    pub delta: Option<f64>,
    pub tau_face: Option<f64>,
    pub tau_clip: Option<f64>,
    pub n_ctx: Option<usize>,
    pub n_out: Option<u32>,
    pub workers: Option<usize>,
}

fn rebase(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p.as_mut() {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::Usage(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    /// Defaults, then `file` if given, then `overrides`; validated.
    pub fn load(file: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
                let mut cfg = Self::parse(&text)?;
                let base = path.parent().unwrap_or(Path::new("."));
                rebase(base, &mut cfg.kb);
                rebase(base, &mut cfg.gateway.mock_script);
                cfg
            }
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.kb {
            self.kb = Some(v.clone());
        }
        if let Some(v) = o.gateway {
            self.gateway.kind = v;
        }
        if let Some(v) = &o.mock_script {
            self.gateway.mock_script = Some(v.clone());
        }
        if let Some(v) = o.delta {
            self.thresholds.delta = v;
        }
        if let Some(v) = o.tau_face {
            self.thresholds.tau_face = v;
        }
        if let Some(v) = o.tau_clip {
            self.thresholds.tau_clip = v;
        }
        if let Some(v) = o.n_ctx {
            self.budget.n_ctx = v;
        }
        if let Some(v) = o.n_out {
            self.budget.n_out = v;
        }
        if let Some(v) = o.workers {
            self.workers = v;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Usage(m));
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        let d = self.thresholds.delta;
        if !(d > 0.0 && d <= 1.0) {
            return bad(format!("delta must be in (0, 1], got {d}"));
        }
        if self.serve.drain_timeout_secs.is_nan() || self.serve.drain_timeout_secs < 0.0 {
            return bad("serve.drain_timeout_secs must be non-negative".into());
        }
        if self.gateway.kind == GatewayKind::Http && self.gateway.base_url.is_none() {
            return bad("gateway.base_url is required for the http gateway".into());
        }
        self.pipeline_config().validate().map_err(CliError::Usage)
    }

    pub fn kb_path(&self) -> Result<&Path> {
        self.kb
            .as_deref()
            .ok_or_else(|| CliError::Usage("no knowledge base given (use --kb or `kb` in the config)".into()))
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy::new(self.retry.limit, Duration::from_millis(self.retry.backoff_ms))
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        let mut p = PipelineConfig {
            n_ctx: self.budget.n_ctx,
            n_out: self.budget.n_out,
            max_triples: self.budget.max_triples,
            ..PipelineConfig::default()
        };
        let t = &self.thresholds;
        p.rmki.face_confidence = t.face_confidence;
        p.rmki.tau_face = t.tau_face;
        p.rmki.tau_clip = t.tau_clip;
        p.rmki.k_clip = t.k_clip;
        p.rmki.retry = self.retry_policy();
        p.hcma.retry = self.retry_policy();
        p
    }

    pub fn drain_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.serve.drain_timeout_secs)
    }
}
