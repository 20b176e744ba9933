use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use voxreg_cli::config::{ExperimentConfig, Preset};
use voxreg_cli::runner::{run_gen, run_metrics, run_register, run_train};

/// Synthetic multimodal volume registration and classification experiments.
#[derive(Parser)]
#[command(name = "voxreg", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with exact ground-truth fields.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the joint model on generated cases.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ablation preset: baseline | f | a | af | overfit4.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Optimize alignment on a single generated pair.
    Register {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute accuracy/F1/AUC from prediction and label files.
    Metrics {
        /// Text file with one `pred score` pair per line.
        #[arg(long)]
        pred: PathBuf,
        /// Text file with one 0/1 label per line.
        #[arg(long)]
        labels: PathBuf,
    },
}

fn run() -> voxreg_core::Result<()> {
    if let Ok(threads) = std::env::var("VOXREG_THREADS") {
        let n: usize = threads
            .parse()
            .map_err(|_| voxreg_core::Error::config("VOXREG_THREADS must be an integer"))?;
        if n > 0 {
            voxreg_core::configure_threads(n)?;
        }
    }
    match Cli::parse().cmd {
        Cmd::Gen { config, out } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let n = run_gen(&cfg, &out)?;
            println!("wrote {n} cases to {}", out.display());
        }
        Cmd::Train {
            config,
            out,
            preset,
        } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(p) = preset {
                Preset::parse(&p)?.apply(&mut cfg);
            }
            let report = run_train(&cfg, &out)?;
            println!(
                "{}",
                serde_json::to_string(&report).expect("serializable report")
            );
        }
        Cmd::Register { config, out } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let report = run_register(&cfg, &out)?;
            println!(
                "{}",
                serde_json::to_string(&report).expect("serializable report")
            );
        }
        Cmd::Metrics { pred, labels } => {
            let m = run_metrics(&pred, &labels)?;
            println!("{}", serde_json::to_string(&m).expect("serializable metrics"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
