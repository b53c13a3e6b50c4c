use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fusionbiopsy::commands::{
    cmd_evaluate, cmd_fixture, cmd_generate, cmd_robustness, cmd_run, error_json, EvaluateArgs,
    Overrides,
};
use fusionbiopsy::Error;

/// Multimodal virtual biopsy pipeline: fusion, evaluation and robustness reports.
#[derive(Parser)]
#[command(name = "fusionbiopsy", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured settings and write report.json, tables and plots.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Fuse and evaluate an external score table without touching images.
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Scores of generated CESM images, enabling the synthetic settings.
        #[arg(long)]
        synthetic_scores: Option<PathBuf>,
        /// Explicit validation/test folds; drawn at random when absent.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Generate synthetic CESM images and measure them against real ones.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the missing-modality robustness sweep.
    Robustness {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Write a synthetic dataset with manifest and config.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        /// JSON fixture spec; defaults are used when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn overrides(seed: Option<u64>, folds: Option<usize>) -> Result<Overrides, Error> {
    Ok(Overrides {
        seed,
        folds,
        threads: Overrides::threads_from_env()?,
    })
}

fn execute(command: Command) -> Result<String, Error> {
    let summary = match command {
        Command::Run {
            config,
            out,
            seed,
            folds,
        } => {
            let report = cmd_run(&config, &out, &overrides(seed, folds)?)?;
            format!("wrote {} settings to {}", report.settings.len(), out.display())
        }
        Command::Robustness {
            config,
            out,
            seed,
            folds,
        } => {
            let report = cmd_robustness(&config, &out, &overrides(seed, folds)?)?;
            format!("wrote {} settings to {}", report.settings.len(), out.display())
        }
        Command::Evaluate {
            scores,
            manifest,
            synthetic_scores,
            split,
            out,
            seed,
            folds,
        } => {
            let args = EvaluateArgs {
                scores,
                manifest,
                synthetic_scores,
                split,
                folds,
                seed,
                threads: Overrides::threads_from_env()?,
            };
            let report = cmd_evaluate(&args, &out)?;
            format!("wrote {} settings to {}", report.settings.len(), out.display())
        }
        Command::Generate { config, out, seed } => {
            let report = cmd_generate(&config, &out, &overrides(seed, None)?)?;
            format!(
                "generated {} images ({} evaluated) in {}",
                report.generated,
                report.evaluated,
                out.display()
            )
        }
        Command::Fixture { out, spec, seed } => {
            let summary = cmd_fixture(&out, spec.as_deref(), seed)?;
            format!(
                "wrote {} records ({} malignant, {} benign) to {}",
                summary.records,
                summary.malignant,
                summary.benign,
                out.display()
            )
        }
    };
    Ok(summary)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", error_json(&err));
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
