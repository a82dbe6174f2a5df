use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use kreuse_cli::{commands, Overrides, RunConfig};
use kreuse_core::supernet::Level;

#[derive(Parser)]
#[command(name = "kreuse", version, about = "Kernel-reusing differentiable search for detection backbones and FPNs")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both the search seed and the dataset seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent directory for run directories.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// s, m, l, x, s-mini or m-mini.
    #[arg(long, global = true)]
    level: Option<Level>,
}

#[derive(Subcommand)]
enum Command {
    /// Bilevel search; writes genotype.json, metrics.csv and arch.json.
    Search {
        /// Saved dataset directory instead of generating one.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Genotype from an architecture checkpoint, or from zero logits.
    Derive {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Trains a genotype from scratch; writes metrics.csv.
    Eval {
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Exact and rounded search-space sizes of the full presets.
    CountSpace,
    /// Runs the invariant suite; exits nonzero on any failure.
    Selfcheck {
        /// Only run checks whose name contains one of these.
        #[arg(long)]
        only: Vec<String>,
    },
    /// Writes a synthetic dataset directory.
    GenData,
}

fn run(cli: Cli) -> Result<bool> {
    let common = cli.common;
    let o = Overrides { seed: common.seed, out: common.out, level: common.level };
    // count-space reads the level itself; mini levels are rejected there.
    let cfg_overrides = match cli.command {
        Command::CountSpace => Overrides { level: None, ..o.clone() },
        _ => o.clone(),
    };
    let cfg = RunConfig::resolve(common.config.as_deref(), &cfg_overrides)?;
    let report = match cli.command {
        Command::Search { data } => commands::search(&cfg, data.as_deref())?,
        Command::Derive { checkpoint } => commands::derive_cmd(&cfg, checkpoint.as_deref())?,
        Command::Eval { genotype, data } => commands::eval(&cfg, &genotype, data.as_deref())?,
        Command::CountSpace => commands::count_space(&cfg, o.level)?,
        Command::Selfcheck { only } => commands::selfcheck(&cfg, o.seed.unwrap_or(0), &only)?,
        Command::GenData => commands::gen_data(&cfg)?,
    };
    print!("{}", report.summary);
    println!("run directory: {}", report.dir.display());
    Ok(report.passed)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(2)
        }
    }
}
