//! Command-line front end for the federated prompt-learning experiments in
//! plan-core: deterministic runs with full output directories, checkpoint
//! evaluation, hyperparameter sweeps, and dataset export.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use commands::{EvalDomains, Failure, SweepGrid};
use config::ConfigError;

#[derive(Debug, Parser)]
#[command(
    name = "plan",
    version,
    about = "Federated prompt-learning experiment runner",
    propagate_version = true
)]
pub struct Cli {
    /// Output root directory (default: $PLAN_OUT, then ./runs).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Run one experiment and write metrics, summary, manifest, checkpoint.
    Run(RunArgs),
    /// Evaluate saved checkpoints on the experiment domains.
    Eval(EvalArgs),
    /// Cartesian hyperparameter sweep; one run directory per cell.
    Sweep(SweepArgs),
    /// Export generated domains in the named-tensor blob format.
    ExportDataset(ExportArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Config file path, or a profile name: toy, desk, paper.
    #[arg(long, default_value = "desk")]
    pub config: String,
    /// Training method: plan or avg_baseline.
    #[arg(long)]
    pub method: Option<String>,
    /// Ablation switch, repeatable: disable_kl, disable_zsi, avg_text_agg,
    /// avg_vis_agg.
    #[arg(long)]
    pub ablate: Vec<String>,
    /// Field override, repeatable: --set train.lr=0.05
    #[arg(long, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<plan_core::fed::ExperimentConfig, ConfigError> {
        config::resolve(&self.config, self.method.as_deref(), &self.ablate, &self.set)
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Run directory name (default: run-<hash>-s<seed>).
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Checkpoint file, repeatable.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    /// Domain id, or "all".
    #[arg(long, default_value = "all")]
    pub domain: String,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Comma-separated alpha values (default: the base config's alpha).
    #[arg(long)]
    pub alpha: Option<String>,
    /// Comma-separated encoder depths.
    #[arg(long)]
    pub depth: Option<String>,
    /// Comma-separated prompt lengths (sets both modalities).
    #[arg(long)]
    pub prompt_len: Option<String>,
    /// Comma-separated round counts.
    #[arg(long)]
    pub rounds: Option<String>,
    /// Sweep directory name (default: sweep-<hash>).
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Domain id, or "all".
    #[arg(long, default_value = "all")]
    pub domain: String,
    /// Destination file.
    #[arg(long)]
    pub to: PathBuf,
}

fn parse_domains(s: &str) -> Result<EvalDomains, ConfigError> {
    if s == "all" {
        Ok(EvalDomains::All)
    } else {
        s.parse()
            .map(EvalDomains::One)
            .map_err(|_| ConfigError(vec![format!("domain: {s:?} is neither an id nor \"all\"")]))
    }
}

fn parse_list<T: std::str::FromStr>(axis: &str, s: &str) -> Result<Vec<T>, ConfigError> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(
            part.parse()
                .map_err(|_| ConfigError(vec![format!("{axis}: cannot parse {part:?}")]))?,
        );
    }
    Ok(out)
}

fn out_root(cli_out: Option<PathBuf>) -> PathBuf {
    cli_out
        .or_else(|| std::env::var_os("PLAN_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let root = out_root(cli.out);
    match cli.cmd {
        Cmd::Run(args) => {
            let cfg = args.config.resolve()?;
            commands::cmd_run(&cfg, &root, args.name)
        }
        Cmd::Eval(args) => {
            let cfg = args.config.resolve()?;
            let domains = parse_domains(&args.domain)?;
            commands::cmd_eval(&cfg, &args.checkpoint, domains)
        }
        Cmd::Sweep(args) => {
            let cfg = args.config.resolve()?;
            let grid = SweepGrid {
                alpha: match &args.alpha {
                    Some(s) => parse_list("alpha", s)?,
                    None => vec![cfg.train.alpha],
                },
                depth: match &args.depth {
                    Some(s) => parse_list("depth", s)?,
                    None => vec![cfg.model.depth],
                },
                prompt_len: match &args.prompt_len {
                    Some(s) => parse_list("prompt_len", s)?,
                    None => vec![cfg.model.m_t],
                },
                rounds: match &args.rounds {
                    Some(s) => parse_list("rounds", s)?,
                    None => vec![cfg.rounds],
                },
            };
            commands::cmd_sweep(&cfg, &grid, &root, args.name)
        }
        Cmd::ExportDataset(args) => {
            let cfg = args.config.resolve()?;
            let domain = parse_domains(&args.domain)?;
            commands::cmd_export_dataset(&cfg, domain, &args.to)
        }
    }
}

/// Parses and runs; returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("{}", f.message);
            f.code
        }
    }
}
