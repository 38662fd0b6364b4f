use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use weatherir::checkpoint::Checkpoint;
use weatherir::commands;
use weatherir::config::RunConfig;
use weatherir::error::exit;
use weatherir::manifest::Manifest;
use weatherir::{CliError, Result};
use weatherir_core::trainer::SeverityRegime;

/// All-in-one weather restoration: corpus synthesis, training, evaluation and inference.
#[derive(Parser, Debug)]
#[command(name = "weatherir", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// key = value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Configuration override, `key=value`; repeatable, applied after the file
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic degraded/clean corpus and its manifest
    Synth,
    /// Train stage 1 and stage 2
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Continue from a checkpoint written by an earlier run
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// PSNR/SSIM of a checkpoint on a manifest, before and after restoration
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Restore an image or every PNG in a directory
    Restore {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Number of restoration passes
        #[arg(long, default_value_t = 1)]
        iters: usize,
    },
    /// Contact sheet of restorations along the severity direction
    Modulate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(
            long,
            value_delimiter = ',',
            allow_hyphen_values = true,
            default_value = "-0.5,0,0.5,1"
        )]
        alphas: Vec<f64>,
    },
    /// Train one model per severity-loss regime and compare them
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        /// Rows scored after training; defaults to the training manifest
        #[arg(long)]
        eval_manifest: Option<PathBuf>,
        #[arg(long = "regime", value_delimiter = ',', default_value = "none,direct,mrl,mqrl")]
        regimes: Vec<SeverityRegime>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    let cfg = RunConfig::load(c.config.as_deref(), &c.overrides, c.seed)?;
    let out = &c.out;
    match cli.command {
        Command::Synth => {
            let s = commands::synth(&cfg, out)?;
            println!(
                "wrote {} rows to {} (sha256 {})",
                s.manifest.rows.len(),
                s.manifest_path.display(),
                s.hash
            );
        }
        Command::Train { manifest, resume } => {
            let data = Manifest::read(&manifest)?.load_dataset()?;
            let resume = resume.as_deref().map(Checkpoint::load).transpose()?;
            let s = commands::train(&cfg, &data, out, resume).map_err(|e| match e {
                CliError::Numeric(m) => {
                    CliError::Numeric(format!("{m}; batch dumped to {}", out.join("nan_batch").display()))
                }
                e => e,
            })?;
            println!("trained {} steps, wrote {}", s.steps, s.final_checkpoint.display());
        }
        Command::Eval { checkpoint, manifest } => {
            let rows = Manifest::read(&manifest)?.load()?;
            let model = commands::load_model(&checkpoint)?;
            let (_, bytes) = commands::eval(&model, &rows, out)?;
            print!("{}", String::from_utf8_lossy(&bytes));
        }
        Command::Restore {
            checkpoint,
            input,
            iters,
        } => {
            let model = commands::load_model(&checkpoint)?;
            let written = commands::restore(&model, &input, iters, out)?;
            println!("restored {} image(s) into {}", written.len(), out.display());
        }
        Command::Modulate {
            checkpoint,
            input,
            alphas,
        } => {
            let model = commands::load_model(&checkpoint)?;
            for m in commands::modulate(&model, &input, &alphas, out)? {
                println!(
                    "alpha {:>6}: residual {:.5}, quality {:.4}",
                    m.alpha, m.residual_energy, m.predicted_quality
                );
            }
        }
        Command::Ablate {
            manifest,
            eval_manifest,
            regimes,
        } => {
            let m = Manifest::read(&manifest)?;
            let e = match eval_manifest {
                Some(p) => Manifest::read(&p)?,
                None => m.clone(),
            };
            let data = m.load_dataset()?;
            let rows = e.load()?;
            let (report, bytes) = commands::ablate(&cfg, &data, &rows, &regimes, out)?;
            for r in &report.regimes {
                println!(
                    "{:<6} ordering {:?} interval {:?} psnr {:.2} -> {:.2}",
                    r.regime,
                    r.ranking.ordering_accuracy,
                    r.ranking.interval_error,
                    r.restoration.overall.psnr_before,
                    r.restoration.overall.psnr_after
                );
            }
            println!("report sha256 {}", weatherir::manifest::hex_digest(&bytes));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { exit::OK });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
