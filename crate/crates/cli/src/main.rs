mod config;
mod experiments;
mod output;
mod runner;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use isingfield::exec::Execution;

use crate::config::ExperimentConfig;
use crate::output::RunContext;

#[derive(Parser)]
#[command(name = "isingfield", version, about = "Monte Carlo experiments on the critical Ising magnetization field")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Exit with status 1 if any invariant check fails.
        #[arg(long)]
        check: bool,
        /// Worker threads; 1 runs sequentially.
        #[arg(long)]
        workers: Option<usize>,
        /// Continue an interrupted run from its output directory.
        #[arg(long, value_name = "DIR")]
        resume: Option<PathBuf>,
        /// Also write every sampled bond configuration in binary form.
        #[arg(long)]
        dump_raw: bool,
    },
}

fn main() -> ExitCode {
    let Command::Run { config, check, workers, resume, dump_raw } = Cli::parse().command;
    match run(config, workers, resume, dump_raw) {
        Ok(checks) => {
            let failed = checks.iter().filter(|c| !c.pass).count();
            for c in &checks {
                println!("{}  {}: {}", if c.pass { "pass" } else { "FAIL" }, c.name, c.detail);
            }
            println!("{} of {} checks passed", checks.len() - failed, checks.len());
            if check && failed > 0 {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(path: PathBuf, workers: Option<usize>, resume: Option<PathBuf>, dump_raw: bool) -> anyhow::Result<Vec<experiments::Check>> {
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let config = ExperimentConfig::parse(&text).with_context(|| format!("invalid config {}", path.display()))?;
    if workers == Some(0) {
        anyhow::bail!("--workers must be positive");
    }
    let out_dir = resume.clone().unwrap_or_else(|| config.output.clone());
    let ctx = RunContext::new(config, text, out_dir, resume.is_some(), dump_raw);
    for dir in [ctx.out_dir.clone(), ctx.checkpoint_dir()] {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    if dump_raw {
        fs::create_dir_all(ctx.raw_dir())?;
    }
    experiments::run(&ctx, Execution::from_workers(workers))
}
