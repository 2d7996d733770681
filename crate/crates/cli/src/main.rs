use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Parser;
use serde_json::json;

mod artifacts;
mod config;
mod pipeline;

use artifacts::write_files;
use config::{Command, ExperimentConfig};

/// Optimal and minimax-robust extrapolation experiments.
#[derive(Debug, Parser)]
#[command(name = "pc-extrap", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `output`, then `./out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `mc.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; falls back to PC_EXTRAP_THREADS.
    #[arg(long)]
    threads: Option<usize>,
}

fn thread_count(arg: Option<usize>) -> Result<Option<usize>> {
    if arg.is_some() {
        return Ok(arg);
    }
    match std::env::var("PC_EXTRAP_THREADS") {
        Ok(v) if !v.trim().is_empty() => {
            let n = v.trim().parse().with_context(|| format!("PC_EXTRAP_THREADS={v:?} is not a thread count"))?;
            Ok(Some(n))
        }
        _ => Ok(None),
    }
}

fn execute(cli: Cli) -> Result<bool> {
    let started = chrono::Utc::now();
    let mut cfg = ExperimentConfig::load(&cli.config)?;
    if let Some(c) = cfg.command {
        if c != cli.command {
            bail!("config field `command`: config is for `{}` but `{}` was requested", c.name(), cli.command.name());
        }
    }
    if let Some(seed) = cli.seed {
        cfg.mc.seed = seed;
    }
    let threads = thread_count(cli.threads)?;
    if let Some(n) = threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    let out = cli.out.clone().or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("out"));

    let outcome = pipeline::run(cli.command, &cfg)?;

    let mut files = vec![("result.json".to_string(), serde_json::to_vec_pretty(&outcome.result)?)];
    for t in &outcome.tables {
        files.push((t.name.to_string(), t.to_csv()?));
    }
    let entries = write_files(&out, &files)?;
    let manifest = json!({
        "tool": "pc-extrap",
        "version": env!("CARGO_PKG_VERSION"),
        "command": cli.command.name(),
        "config_path": cli.config.display().to_string(),
        "config": cfg,
        "threads": threads.unwrap_or_else(rayon::current_num_threads),
        "passed": outcome.passed,
        "files": entries,
        "started_at": started.to_rfc3339(),
        "finished_at": chrono::Utc::now().to_rfc3339(),
    });
    write_files(&out, &[("manifest.json".to_string(), serde_json::to_vec_pretty(&manifest)?)])?;
    Ok(outcome.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("checks failed; see result.json");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
