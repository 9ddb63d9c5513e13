//! `ovfree`: runs experiment configs and writes CSV/JSON artifacts.
//!
//! Exit codes: 0 success, 1 I/O or `--verify` mismatch, 2 schema error,
//! 3 numerical failure or failed check (JSON report on stderr).

mod config;
mod output;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use config::{Command, ExperimentConfig};
use run::CliError;
use serde_json::json;

#[derive(Parser)]
#[command(name = "ovfree", version, about = "Operator-valued free probability experiments")]
struct Cli {
    #[command(subcommand)]
    action: Action,
}

#[derive(Subcommand)]
enum Action {
    /// Run a JSON experiment config.
    Run {
        config: PathBuf,
        /// Overrides the config's `output`; `-` writes to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Check that the existing output was produced by this config instead of running.
        #[arg(long)]
        verify: bool,
    },
    /// Evaluate resolvent-word moments.
    Moments {
        #[command(subcommand)]
        action: MomentsAction,
    },
    /// Build a killer F-transform for comma-separated targets.
    Killer {
        #[arg(long)]
        targets: String,
        #[arg(long, default_value_t = 1e-3)]
        delta: f64,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate one word in all four independence modes.
    Fbcs {
        #[arg(long)]
        word: Option<String>,
    },
    /// List the config commands.
    Commands,
}

#[derive(Subcommand)]
enum MomentsAction {
    Eval {
        /// For example `[(2i,1),(3i,2)]` (variables are one-based).
        #[arg(long)]
        word: String,
        #[arg(long, default_value = "free")]
        mode: String,
        /// A law name (`cauchy`, `semicircle`, `bernoulli`, `arcsine`, `point_mass`) or JSON.
        #[arg(long, default_value = "cauchy")]
        law: String,
    },
}

fn law_value(src: &str) -> serde_json::Value {
    serde_json::from_str(src).unwrap_or_else(|_| json!(src))
}

fn to_config(action: Action) -> Result<(ExperimentConfig, Option<PathBuf>, bool), CliError> {
    let direct = |command, seed, params| (ExperimentConfig { command, seed, params, output: None }, None, false);
    Ok(match action {
        Action::Run { config, output, verify } => {
            let text = std::fs::read_to_string(&config)?;
            let cfg: ExperimentConfig =
                serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", config.display())))?;
            (cfg, output, verify)
        }
        Action::Moments { action: MomentsAction::Eval { word, mode, law } } => {
            direct(Command::Moments, 0, json!({ "word": word, "mode": mode, "law": law_value(&law) }))
        }
        Action::Killer { targets, delta, samples, seed } => {
            direct(Command::Killer, seed, json!({ "targets": targets, "delta": delta, "samples": samples }))
        }
        Action::Fbcs { word } => {
            direct(Command::Fbcs, 0, word.map(|w| json!({ "word": w })).unwrap_or_else(|| json!({})))
        }
        Action::Commands => unreachable!("handled before dispatch"),
    })
}

fn write_artifact(path: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match path {
        Some(p) if p != Path::new("-") => std::fs::write(p, bytes)?,
        _ => {
            use std::io::Write;
            let mut out = std::io::stdout().lock();
            out.write_all(bytes)?;
            out.flush()?;
        }
    }
    Ok(())
}

fn execute(action: Action) -> Result<(), CliError> {
    let (cfg, output_override, verify) = to_config(action)?;
    let target = output_override.or_else(|| cfg.output.clone());
    let hash = cfg.hash();
    if verify {
        let path = target.ok_or_else(|| CliError::Schema("--verify needs an output path".into()))?;
        let bytes = std::fs::read(&path)?;
        return match output::embedded_hash(&bytes) {
            Some(h) if h == hash => Ok(()),
            Some(h) => Err(CliError::Verify(format!("{} was produced by config {h}, not {hash}", path.display()))),
            None => Err(CliError::Verify(format!("{} carries no config hash", path.display()))),
        };
    }
    let outcome = run::run(&cfg)?;
    write_artifact(target.as_deref(), &output::render(&outcome.artifact, cfg.command.name(), &hash))?;
    match outcome.failure {
        Some(msg) => Err(CliError::Check(msg)),
        None => Ok(()),
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var("OVFREE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // Fails only if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Action::Commands = cli.action {
        for c in Command::ALL {
            println!("{}", c.name());
        }
        return ExitCode::SUCCESS;
    }
    configure_threads();
    match execute(cli.action) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.report());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
