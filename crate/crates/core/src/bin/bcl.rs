//! Command-line front end: data generation, training, evaluation, sweeps,
//! and sequential compatibility chains.
//!
//! Exit status: 0 success, 2 usage/config error, 3 runtime numerical failure.

use bcl_core::config::ExperimentConfig;
use bcl_core::error::Error;
use bcl_core::runner;
use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "bcl",
    about = "Backward-compatible embedding learning with prototype perturbation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    Old,
    New,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset container files.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the old model, an independent new model, or a
    /// backward-compatible new model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        model: ModelKind,
        /// baseline | ndpp | ndpp-old | odpp | odpp-old. Omitting it with
        /// --model new trains the new model independently (no old
        /// checkpoint needed).
        #[arg(long)]
        method: Option<String>,
    },
    /// Evaluate an old/new checkpoint pair: self-tests, cross-test,
    /// compatibility verdict, surrogate scores, PCA dump.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        old: PathBuf,
        #[arg(long)]
        new: PathBuf,
        /// Dataset directory; defaults to the config's output_dir.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train+eval once per value of one hyperparameter; emits a CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// One of: alpha1, alpha2, K, theta_old, theta_new, gamma, lambda, tau.
        #[arg(long)]
        param: String,
        /// Comma-separated values, e.g. 0,0.01,0.1
        #[arg(long)]
        values: String,
    },
    /// Sequential chain: each model stays compatible with its predecessor.
    Sequential {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated increasing class fractions ending at 1.0,
        /// e.g. 0.09,0.30,1.0
        #[arg(long)]
        fractions: String,
    },
    /// Print the default experiment config as TOML.
    InitConfig,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::BadK { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn parse_f64_list(text: &str) -> Result<Vec<f64>, Error> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(format!("cannot parse '{s}' as a number")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData { config } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let summary = runner::gen_data(&cfg)?;
            println!(
                "generated dataset in {}: {} classes ({} old / {} new), \
                 {} old-train rows, {} new-train rows, {} query rows, {} gallery rows",
                cfg.output_dir.display(),
                summary.class_count,
                summary.old_classes,
                summary.new_classes,
                summary.old_train_rows,
                summary.new_train_rows,
                summary.query_rows,
                summary.gallery_rows
            );
            Ok(())
        }
        Command::Train {
            config,
            model,
            method,
        } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let path = match (model, method) {
                (ModelKind::Old, None) => runner::train_old_cmd(&cfg)?,
                (ModelKind::Old, Some(_)) => {
                    return Err(Error::config(
                        "--method does not apply to --model old (cross-entropy only)",
                    ))
                }
                (ModelKind::New, None) => runner::train_new_independent_cmd(&cfg)?,
                (ModelKind::New, Some(kind)) => {
                    let m = runner::method_from_config(&cfg, &kind)?;
                    runner::train_new_cmd(&cfg, &m)?
                }
            };
            println!("checkpoint written to {}", path.display());
            Ok(())
        }
        Command::Eval {
            config,
            old,
            new,
            data,
        } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let out = runner::eval_cmd(&cfg, &old, &new, data.as_deref())?;
            print!(
                "{}",
                out.report.to_table(
                    new.file_stem()
                        .and_then(|s| s.to_str())
                        .unwrap_or("new")
                )
            );
            println!(
                "report: {} / {}",
                out.report_json.display(),
                out.report_txt.display()
            );
            if let Some(pca) = out.pca_csv {
                println!("pca dump: {}", pca.display());
            }
            Ok(())
        }
        Command::Sweep {
            config,
            param,
            values,
        } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let values = parse_f64_list(&values)?;
            let path = runner::sweep_cmd(&cfg, &param, &values)?;
            println!("sweep table written to {}", path.display());
            Ok(())
        }
        Command::Sequential { config, fractions } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let fractions = parse_f64_list(&fractions)?;
            let reports = runner::sequential_cmd(&cfg, &fractions)?;
            for (i, r) in reports.iter().enumerate() {
                println!(
                    "step {}: cross-test {:.4} vs predecessor self-test {:.4} -> {}",
                    i + 1,
                    r.map_cross,
                    r.map_self_old,
                    if r.compatible {
                        "compatible"
                    } else {
                        "NOT compatible"
                    }
                );
            }
            Ok(())
        }
        Command::InitConfig => {
            print!("{}", ExperimentConfig::desk_default().to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
