//! Command-line tools and caption service for `merge-core`.
//!
//! Exit status: 0 success, 1 usage error, 2 data error, 3 gateway error.

pub mod config;
pub mod error;
pub mod eval;
pub mod gateway;
pub mod kb;
pub mod run;
pub mod serve;

use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use merge_core::ingest::fixtures::make_fixtures;
use merge_core::ner::GazetteerTagger;
use merge_core::pipeline::Pipeline;

use crate::config::{GatewayKind, Overrides, RunConfig};
pub use crate::error::{CliError, Result};
use crate::kb::stdout_err;

#[derive(Debug, Parser)]
#[command(name = "merge", version, about = "Entity-aware news image captioning")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Knowledge base directory.
    #[arg(long, global = true)]
    pub kb: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub gateway: Option<GatewayKind>,
    /// Script for the mock gateway.
    #[arg(long, global = true)]
    pub mock_script: Option<PathBuf>,
    /// Near-duplicate image threshold.
    #[arg(long, global = true)]
    pub delta: Option<f64>,
    /// Minimum face similarity for a match.
    #[arg(long, global = true)]
    pub tau_face: Option<f64>,
    /// Minimum whole-image similarity for a match.
    #[arg(long, global = true)]
    pub tau_clip: Option<f64>,
    /// Token budget for the caption prompt.
    #[arg(long, global = true)]
    pub n_ctx: Option<usize>,
    /// Token cap for the caption.
    #[arg(long, global = true)]
    pub n_out: Option<u32>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

impl GlobalArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            kb: self.kb.clone(),
            gateway: self.gateway,
            mock_script: self.mock_script.clone(),
            delta: self.delta,
            tau_face: self.tau_face,
            tau_clip: self.tau_clip,
            n_ctx: self.n_ctx,
            n_out: self.n_out,
            workers: self.workers,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Manage the knowledge base.
    Kb {
        #[command(subcommand)]
        cmd: kb::KbCommand,
    },
    /// Write a synthetic corpus, store, mock script and config.
    Fixtures(FixturesArgs),
    /// Caption a corpus.
    Run(run::RunArgs),
    /// Score captions against gold captions.
    Eval(eval::EvalArgs),
    /// Serve caption requests over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct FixturesArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub n: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub addr: Option<SocketAddr>,
    /// Seconds to wait for in-flight requests at shutdown.
    #[arg(long)]
    pub drain_timeout: Option<f64>,
}

pub const FIXTURE_CONFIG: &str = "version = 1
kb = \"kb\"

[gateway]
kind = \"mock\"
mock_script = \"mock_script.json\"
";

/// Knowledge base, gateways and pipeline from the resolved config.
pub fn load_pipeline(cfg: &RunConfig) -> Result<Pipeline> {
    let kb = kb::open(cfg.kb_path()?)?;
    let gateways = gateway::build(cfg, kb.config())?;
    Ok(Pipeline::new(Arc::new(kb), gateways, cfg.pipeline_config()))
}

pub fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    if let Command::Fixtures(a) = &cli.command {
        return fixtures(a, out);
    }
    let mut cfg = RunConfig::load(cli.global.config.as_deref(), &cli.global.overrides())?;
    match &cli.command {
        Command::Fixtures(_) => unreachable!(),
        Command::Kb { cmd } => kb::cmd_kb(cmd, &cfg, out),
        Command::Run(args) => {
            let pipeline = load_pipeline(&cfg)?;
            let s = run::cmd_run(&pipeline, args, cfg.workers)?;
            writeln!(out, "captioned {}, failed {}, skipped {}", s.captioned, s.failed, s.skipped).map_err(stdout_err)
        }
        Command::Eval(args) => {
            let tagger = match &cfg.kb {
                Some(path) => GazetteerTagger::from_kb(&kb::open(path)?),
                None => GazetteerTagger::new(),
            };
            let report = eval::cmd_eval(args, &tagger)?;
            write!(out, "{}", report.to_table()).map_err(stdout_err)
        }
        Command::Serve(args) => {
            if let Some(a) = args.addr {
                cfg.serve.addr = a.to_string();
            }
            if let Some(d) = args.drain_timeout {
                cfg.serve.drain_timeout_secs = d;
            }
            cfg.validate()?;
            let addr: SocketAddr = cfg
                .serve
                .addr
                .parse()
                .map_err(|e| CliError::Usage(format!("serve.addr {:?}: {e}", cfg.serve.addr)))?;
            let path = cfg.kb_path()?.to_path_buf();
            let kb = kb::open(&path)?;
            let gateways = gateway::build(&cfg, kb.config())?;
            let service = serve::Service::new(kb, Some(path), gateways, cfg.pipeline_config(), cfg.workers);
            serve::run_blocking(service, addr, cfg.drain_timeout()).map(|_| ())
        }
    }
}

fn fixtures(a: &FixturesArgs, out: &mut dyn Write) -> Result<()> {
    if a.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let f = make_fixtures(a.seed, a.n);
    f.write_to(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let cfg = a.out.join("merge.toml");
    std::fs::write(&cfg, FIXTURE_CONFIG).map_err(|e| CliError::io(&cfg, e))?;
    writeln!(
        out,
        "wrote {} articles and {} entities to {}",
        f.articles.len(),
        f.kb.len(),
        a.out.display()
    )
    .map_err(stdout_err)
}
