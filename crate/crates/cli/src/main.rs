//! `rcm-lab`: batch front end for the random-conductance laboratory.
//!
//! Every run reads one TOML config, executes a pipeline from the core
//! crate's harness, writes plot-ready CSV tables plus a JSON manifest into
//! the output directory, and reports through the exit status:
//!
//!   0  run finished (and passed, where a verdict applies)
//!   2  run finished but missed an acceptance threshold
//!   3  configuration problem (bad file, bad values, window too small)
//!   64 command-line usage error
//!
//! Anything else that goes wrong at runtime exits 1.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use rcmlab_core::harness::config::ExperimentConfig;
use rcmlab_core::harness::experiments::{self, HarnessError, RunContext};
use rcmlab_core::harness::io::RunManifest;

#[derive(Parser)]
#[command(
    name = "rcm-lab",
    version,
    about = "Numerical laboratory for planar random walks among random conductances"
)]
struct Cli {
    /// Experiment configuration (TOML). Required by every command except
    /// `env inspect`.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override the master seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for tables, snapshots, and manifests. Defaults to the
    /// config's `out_dir`, then the current directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// What to print on stdout: a readable summary or the manifest JSON.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,

    /// Worker threads. Defaults to the config, then RCM_LAB_THREADS, then
    /// all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a static environment, or inspect a saved snapshot.
    Env {
        #[command(subcommand)]
        which: EnvCommand,
    },
    /// Estimate the open-cluster density.
    Theta,
    /// Estimate the walk covariance and the derived logarithmic slope.
    Sigma,
    /// Killed Green function at the center of growing balls.
    Green,
    /// Potential-kernel values at short separations.
    Potential,
    /// Scaled return density along a time grid.
    Llt,
    /// Verification pipelines with pass/fail verdicts.
    Verify {
        #[command(subcommand)]
        which: VerifyCommand,
    },
    /// Dynamic-conductance and interface pipelines.
    Dynamic {
        #[command(subcommand)]
        which: DynamicCommand,
    },
}

#[derive(Subcommand)]
enum EnvCommand {
    /// Draw one environment and write it as a snapshot.
    Sample,
    /// Summarize a snapshot file. Needs no config.
    Inspect { file: PathBuf },
}

#[derive(Subcommand)]
enum VerifyCommand {
    /// Sup-deviation of the rescaled potential kernel over an annulus.
    Thm12,
    /// On-diagonal killed-Green growth, with the exact sandwich.
    #[command(name = "thm13-on")]
    Thm13On,
    /// Off-diagonal killed-Green profile residuals.
    #[command(name = "thm13-off")]
    Thm13Off,
    /// Exit-identity residuals on small random domains.
    Lemma22,
    /// Punctured-lattice identity residuals.
    Cor23,
    /// Additive constant of the homogeneous expansion.
    Classical,
}

#[derive(Subcommand)]
enum DynamicCommand {
    /// Annealed gradient decay and annealed potential values.
    Annealed,
    /// Interface variance scaling for the configured potential.
    Interface,
    /// The homogeneous instance: slope against 1/pi plus the
    /// variance-to-potential consistency check.
    Thm34,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's own convention is 2 for usage errors; this tool
            // reserves 2 for threshold failures and reports usage
            // problems with the sysexits code instead.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 64,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, HarnessError> {
    // The one command that reads no config.
    if let Command::Env { which: EnvCommand::Inspect { file } } = &cli.command {
        let manifest = experiments::env_inspect(file)?;
        emit(&manifest, cli.format);
        return Ok(ExitCode::SUCCESS);
    }

    let config_path = cli.config.as_deref().ok_or_else(|| {
        rcmlab_core::harness::config::ConfigError::Value(
            "a configuration file is required: pass --config <FILE>".into(),
        )
    })?;
    let (mut cfg, hash) = ExperimentConfig::load(config_path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = Some(threads);
    }
    let out_dir = cli
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir)?;
    let ctx = RunContext::new(cfg, config_path.display().to_string(), hash);

    let manifest = dispatch(&cli.command, &ctx, &out_dir)?;
    manifest.save(&out_dir.join(format!("{}_manifest.json", manifest.pipeline)))?;
    emit(&manifest, cli.format);
    Ok(match manifest.pass {
        Some(false) => ExitCode::from(2),
        _ => ExitCode::SUCCESS,
    })
}

fn dispatch(
    command: &Command,
    ctx: &RunContext,
    out: &Path,
) -> Result<RunManifest, HarnessError> {
    match command {
        Command::Env { which: EnvCommand::Sample } => experiments::env_sample(ctx, out),
        Command::Env { which: EnvCommand::Inspect { .. } } => unreachable!("handled in run"),
        Command::Theta => experiments::run_theta(ctx, out),
        Command::Sigma => experiments::run_sigma(ctx, out),
        Command::Green => experiments::run_green(ctx, out),
        Command::Potential => experiments::run_potential(ctx, out),
        Command::Llt => experiments::run_llt(ctx, out),
        Command::Verify { which } => match which {
            VerifyCommand::Thm12 => experiments::verify_thm12(ctx, out),
            VerifyCommand::Thm13On => experiments::verify_thm13_ondiag(ctx, out),
            VerifyCommand::Thm13Off => experiments::verify_thm13_offdiag(ctx, out),
            VerifyCommand::Lemma22 => experiments::verify_lemma22(ctx, out),
            VerifyCommand::Cor23 => experiments::verify_cor23(ctx, out),
            VerifyCommand::Classical => experiments::classical_constant(ctx, out),
        },
        Command::Dynamic { which } => match which {
            DynamicCommand::Annealed => experiments::run_dynamic_annealed(ctx, out),
            DynamicCommand::Interface => experiments::run_dynamic_interface(ctx, out),
            DynamicCommand::Thm34 => experiments::run_dynamic_thm34(ctx, out),
        },
    }
}

fn emit(manifest: &RunManifest, format: Format) {
    match format {
        Format::Json => {
            println!(
                "{}",
                serde_json::to_string_pretty(manifest)
                    .expect("manifests are plain data and always serialize")
            );
        }
        Format::Csv => {
            println!("pipeline:   {}", manifest.pipeline);
            println!("experiment: {}", manifest.experiment);
            if !manifest.config_hash.is_empty() {
                println!("config:     {} ({})", manifest.config_path, manifest.config_hash);
            }
            println!("seed:       {}", manifest.seed);
            for (name, est) in &manifest.estimates {
                if est.std_error > 0.0 {
                    println!("{:<26} {} \u{00b1} {}", name, est.value, est.std_error);
                } else {
                    println!("{:<26} {}", name, est.value);
                }
            }
            let wall: f64 = manifest.wall_seconds.values().sum();
            if wall > 0.0 {
                println!("wall:       {wall:.1}s");
            }
            if !manifest.outputs.is_empty() {
                println!("outputs:    {}", manifest.outputs.join(", "));
            }
            if let Some(pass) = manifest.pass {
                println!("verdict:    {}", if pass { "pass" } else { "FAIL" });
            }
        }
    }
}
