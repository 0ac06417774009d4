use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tailflow::error::Result;
use tailflow::model::Variant;
use tailflow_cli::commands::{
    cmd_estimate, cmd_evaluate, cmd_generate, cmd_project_stats, cmd_qq_data, cmd_train,
    format_metrics, write_default_config,
};
use tailflow_cli::config::ExperimentConfig;
use tailflow_cli::suite::{cmd_suite, run_trial, SuiteOptions, RESOLVED_CONFIG};

/// Tail-adaptive normalizing flows: data synthesis, tail estimation,
/// training, and evaluation.
#[derive(Parser)]
#[command(name = "tailflow", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the default experiment configuration to a file.
    InitConfig {
        /// Destination path for the JSON config.
        #[arg(long, default_value = "tailflow.json")]
        out: PathBuf,
    },
    /// Sample train/val/test splits from a synthetic copula target.
    GenerateData {
        /// Experiment config (defaults used when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the CSV splits and spec document.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's base seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate per-column tail indices and classes from a CSV sample.
    EstimateTails {
        /// Input CSV of shape (rows, dim).
        #[arg(long)]
        data: PathBuf,
        /// Where to write the tail report JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one flow variant on an existing dataset directory.
    Train {
        /// Experiment config (defaults used when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Which variant to train: vanilla, taf, gtaf, or mtaf.
        #[arg(long)]
        variant: String,
        /// Directory holding train.csv and val.csv.
        #[arg(long)]
        data: PathBuf,
        /// Tail report JSON (required for mtaf, optional otherwise).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Output directory for checkpoint.json and history.csv.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's optimization step count.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a checkpoint against a test CSV and ground truth.
    Evaluate {
        /// Trained model checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test CSV of shape (rows, dim).
        #[arg(long)]
        data: PathBuf,
        /// Generating spec JSON: enables the exact-density reference and
        /// true tail classes.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Tail report JSON: estimated classes, used when no spec is given.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Output directory for metrics.json and per_column.csv.
        #[arg(long)]
        out: PathBuf,
        /// Number of model samples to draw (defaults to the test size).
        #[arg(long)]
        samples: Option<usize>,
        /// Seed for the model's sampler.
        #[arg(long, default_value_t = 7_777_777)]
        seed: u64,
    },
    /// Compare random 1-D projections of data and model samples.
    ProjectStats {
        /// Trained model checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Reference CSV of shape (rows, dim).
        #[arg(long)]
        data: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Number of random projections.
        #[arg(long, default_value_t = 50)]
        projections: usize,
        /// Seed for projection directions and the model sampler.
        #[arg(long, default_value_t = 4242)]
        seed: u64,
    },
    /// Emit per-column quantile-quantile pairs for data vs. the model.
    QqData {
        /// Trained model checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Reference CSV of shape (rows, dim).
        #[arg(long)]
        data: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Number of quantile levels per column.
        #[arg(long, default_value_t = 200)]
        levels: usize,
        /// Seed for the model sampler.
        #[arg(long, default_value_t = 4242)]
        seed: u64,
    },
    /// Run the full experiment: data, tails, all variants × trials,
    /// aggregate tables.
    Suite {
        /// Experiment config (defaults used when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Suite output directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's trials-per-variant count.
        #[arg(long)]
        trials: Option<usize>,
        /// Override the config's optimization step count.
        #[arg(long)]
        steps: Option<usize>,
        /// Concurrent trials (worker processes when greater than 1).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Worker entry point used by `suite --jobs N`; runs one trial inside
    /// an existing suite directory.
    #[command(hide = true)]
    RunTrial {
        /// Suite directory containing resolved_config.json.
        #[arg(long)]
        dir: PathBuf,
        /// Variant name.
        #[arg(long)]
        variant: String,
        /// Trial index.
        #[arg(long)]
        trial: usize,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::InitConfig { out } => {
            write_default_config(&out)?;
            eprintln!("wrote default config to {}", out.display());
        }
        Cmd::GenerateData { config, out, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let paths = cmd_generate(&cfg, &out)?;
            eprintln!(
                "wrote {}, {}, {}, {}",
                paths.train.display(),
                paths.val.display(),
                paths.test.display(),
                paths.spec.display()
            );
        }
        Cmd::EstimateTails { data, out } => {
            let report = cmd_estimate(&data, &out)?;
            for (j, m) in report.marginals.iter().enumerate() {
                let idx = m
                    .index_estimate
                    .map_or("n/a".to_string(), |v| format!("{v:.3}"));
                eprintln!(
                    "column {j}: {:?} (tail index {idx}, k = {})",
                    m.class, m.k_used
                );
            }
            eprintln!("wrote {}", out.display());
        }
        Cmd::Train {
            config,
            variant,
            data,
            report,
            out,
            seed,
            steps,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = steps {
                cfg.train.steps = n;
            }
            let variant = Variant::parse(&variant)?;
            let report = match &report {
                Some(p) => Some(tailflow_cli::docs::load_tail_report(p)?),
                None => None,
            };
            let outcome = cmd_train(&cfg, variant, &data, report.as_ref(), &out, cfg.seed)?;
            eprintln!(
                "best validation NLL {:.6} at step {}; wrote {}",
                outcome.history.best_val_nll,
                outcome.history.best_step,
                outcome.checkpoint.display()
            );
        }
        Cmd::Evaluate {
            checkpoint,
            data,
            spec,
            report,
            out,
            samples,
            seed,
        } => {
            let doc = cmd_evaluate(
                &checkpoint,
                &data,
                spec.as_deref(),
                report.as_deref(),
                &out,
                samples,
                seed,
            )?;
            print!("{}", format_metrics(&doc));
        }
        Cmd::ProjectStats {
            checkpoint,
            data,
            out,
            projections,
            seed,
        } => {
            cmd_project_stats(&checkpoint, &data, &out, projections, None, seed)?;
            eprintln!("wrote {}", out.display());
        }
        Cmd::QqData {
            checkpoint,
            data,
            out,
            levels,
            seed,
        } => {
            cmd_qq_data(&checkpoint, &data, &out, levels, None, seed)?;
            eprintln!("wrote {}", out.display());
        }
        Cmd::Suite {
            config,
            out,
            seed,
            trials,
            steps,
            jobs,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = trials {
                cfg.n_trials = n;
            }
            if let Some(n) = steps {
                cfg.train.steps = n;
            }
            let opts = SuiteOptions {
                jobs,
                worker_exe: if jobs > 1 {
                    Some(std::env::current_exe()?)
                } else {
                    None
                },
            };
            cmd_suite(&cfg, &out, &opts)?;
        }
        Cmd::RunTrial {
            dir,
            variant,
            trial,
        } => {
            let cfg = ExperimentConfig::load(&dir.join(RESOLVED_CONFIG))?;
            let variant = Variant::parse(&variant)?;
            let doc = run_trial(&cfg, &dir, None, variant, trial)?;
            eprintln!(
                "trial {variant}-t{trial}: test NLL {:.6}",
                doc.nll
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
