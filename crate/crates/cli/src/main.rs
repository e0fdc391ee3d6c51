//! `lab`: run an experiment from a config file, or verify a finished run.
//!
//! Exit codes: 0 success, 1 acceptance-relevant failure, 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kpzlab::config::{parse_config, Kind};
use kpzlab::runner::{run, verify, RunOptions};
use kpzlab::LabError;

#[derive(Parser)]
#[command(name = "lab", version, about = "Lattice Monte Carlo laboratory for the stochastic heat and KPZ equations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment config file (key = value with sections).
    #[arg(long)]
    config: PathBuf,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Replica count, overriding the config.
    #[arg(long)]
    replicas: Option<u64>,
    /// Output directory, overriding OUTPUT_DIR and the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Empirical covariance of the noise slices.
    NoiseCheck(RunArgs),
    /// Solutions from ones, recorded at probe sites.
    She(RunArgs),
    /// Green's functions and their mass process.
    Green(RunArgs),
    /// Long-lookback stationary field estimates.
    Stationary(RunArgs),
    /// Homogenisation defect of the Green's function.
    Homog(RunArgs),
    /// Fluctuation pairings against the additive equation.
    Fluct(RunArgs),
    /// Height function against the additive equation.
    Kpz(RunArgs),
    /// Feynman-Kac second-moment oracle.
    Oracle(RunArgs),
    /// Recompute the checksums listed in a manifest.
    Verify {
        #[arg(long)]
        manifest: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Run(String),
}

impl From<LabError> for Failure {
    fn from(e: LabError) -> Self {
        match e {
            LabError::Config(_) | LabError::Domain(_) => Failure::Usage(e.to_string()),
            _ => Failure::Run(e.to_string()),
        }
    }
}

fn run_kind(kind: Kind, args: RunArgs) -> Result<i32, Failure> {
    let mut cfg = parse_config(&args.config).map_err(|e| match e {
        LabError::Io(io) => Failure::Usage(format!("cannot read {}: {io}", args.config.display())),
        other => other.into(),
    })?;
    if cfg.kind != kind {
        return Err(Failure::Usage(format!(
            "config {} is for kind '{}', not '{}'",
            args.config.display(),
            cfg.kind.name(),
            kind.name()
        )));
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(r) = args.replicas {
        cfg.replicas = r;
    }
    if let Some(dir) = args.out.or_else(|| std::env::var_os("OUTPUT_DIR").map(PathBuf::from)) {
        cfg.output_dir = dir;
    }
    cfg.validate()?;
    let opts = RunOptions::from_env()?;
    let manifest = run(&cfg, &opts)?;
    for f in &manifest.failures {
        eprintln!("replica {} failed: {}", f.replica, f.error);
    }
    if let Some(e) = &manifest.finish_error {
        eprintln!("products incomplete: {e}");
    }
    println!("{}", cfg.output_dir.join("manifest.json").display());
    Ok(manifest.exit_code())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::NoiseCheck(a) => run_kind(Kind::NoiseCheck, a),
        Command::She(a) => run_kind(Kind::She, a),
        Command::Green(a) => run_kind(Kind::Green, a),
        Command::Stationary(a) => run_kind(Kind::Stationary, a),
        Command::Homog(a) => run_kind(Kind::Homog, a),
        Command::Fluct(a) => run_kind(Kind::Fluct, a),
        Command::Kpz(a) => run_kind(Kind::Kpz, a),
        Command::Oracle(a) => run_kind(Kind::Oracle, a),
        Command::Verify { manifest } => verify(&manifest).map_err(Failure::from).map(|rep| {
            for p in &rep.mismatched {
                eprintln!("checksum mismatch: {p}");
            }
            for p in &rep.missing {
                eprintln!("missing: {p}");
            }
            println!("checked {} files", rep.checked);
            if rep.ok() {
                0
            } else {
                1
            }
        }),
    };
    match outcome {
        Ok(code) => ExitCode::from(code as u8),
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Run(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
