use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use shelab::experiment::{run, ExperimentConfig, Kind};

#[derive(Parser)]
#[command(name = "shelab", version, about = "Fluctuation experiments for the attenuated 2D stochastic heat equation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Heat-kernel / box-mollifier L1 gap sweep.
    KernelCheck(Common),
    /// Renormalization flow, closed-form and blow-up checks.
    Flow(Common),
    /// FBSDE path oracles and J tables.
    Fbsde(Common),
    /// Plain ensembles, snapshots, moment and residual probes.
    Simulate(Common),
    /// Pairing ensembles over the rho ladder.
    Fluctuations(Common),
    /// Concentration probes over the rho ladder.
    Concentration(Common),
    /// Merge fluctuation runs into trend tables and verdicts.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directories to merge.
        dirs: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicas: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, common, dirs) = match cli.command {
        Command::KernelCheck(c) => (Kind::KernelCheck, c, vec![]),
        Command::Flow(c) => (Kind::Flow, c, vec![]),
        Command::Fbsde(c) => (Kind::Fbsde, c, vec![]),
        Command::Simulate(c) => (Kind::Simulate, c, vec![]),
        Command::Fluctuations(c) => (Kind::Fluctuations, c, vec![]),
        Command::Concentration(c) => (Kind::Concentration, c, vec![]),
        Command::Report { common, dirs } => (Kind::Report, common, dirs),
    };
    match execute(kind, common, dirs) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn execute(kind: Kind, c: Common, dirs: Vec<PathBuf>) -> shelab::Result<u8> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(k) = cfg.kind {
        if k != kind {
            return Err(shelab::Error::Config {
                field: "kind".into(),
                reason: format!("config says `{}` but the subcommand is `{}`", k.name(), kind.name()),
            });
        }
    }
    cfg.kind = Some(kind);
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(r) = c.replicas {
        cfg.replicas = r;
    }
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
    if let Some(o) = c.out {
        cfg.out = Some(o);
    }
    if !dirs.is_empty() {
        cfg.report.dirs = dirs;
    }
    let outcome = run(cfg, c.force)?;
    for v in &outcome.verdicts {
        println!("{}", v.line());
    }
    println!("wrote {}", outcome.dir.display());
    Ok(outcome.exit_code() as u8)
}
