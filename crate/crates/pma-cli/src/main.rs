//! Command-line harness: training, evaluation, the gradient audit, the three
//! reporting experiments, and synthetic dataset generation. Artifacts are
//! written under fixed names in the working directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pma_core::config::RunConfig;
use pma_core::data::{generate_dataset, load_split_dir, save_split_dir};
use pma_core::experiments::{
    ablate, ablate_csv, layer_probe, order_bench, order_bench_csv, probe_csv, ExperimentRow,
};
use pma_core::gradcheck::{GradCheckReport, ParamStatus};
use pma_core::model::toy_gradient_audit;
use pma_core::train::{evaluate_clouds, load_model, save_model, train};
use pma_core::{Error, Result};

#[derive(Parser)]
#[command(name = "pma", version, about = "Point cloud adapter harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON config; writes metrics.csv, summary.json and model.json.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a saved model on a dataset directory; prints JSON to stdout.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference audit of the toy model's trainable gradients.
    Gradcheck {
        /// Probe every element instead of a six-element sample per parameter.
        #[arg(long)]
        full: bool,
    },
    /// Accuracy of a head trained on each backbone stage; writes probe.csv.
    Probe {
        #[arg(long)]
        config: PathBuf,
    },
    /// Component ablation over adapter, prompt and reorder; writes ablate.csv.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Accuracy per token-ordering strategy; writes order_bench.csv.
    OrderBench {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate train/ and test/ splits of the synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Format { .. } | Error::Io(_) => 3,
        Error::NonFinite(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn write_rows(path: &str, csv: String, rows: &[ExperimentRow]) -> Result<()> {
    fs::write(path, csv)?;
    println!(
        "{}",
        serde_json::to_string_pretty(rows).expect("rows serialize")
    );
    Ok(())
}

fn report_gradcheck(report: &GradCheckReport) -> Result<()> {
    for p in &report.params {
        println!(
            "{:<24} {:?} max_rel_err={:.3e} checked={}",
            p.name, p.status, p.max_rel_err, p.checked
        );
    }
    let failed: Vec<&str> = report
        .params
        .iter()
        .filter(|p| p.status == ParamStatus::Fail)
        .map(|p| p.name.as_str())
        .collect();
    if failed.is_empty() {
        println!("gradient check passed (tol {:e})", report.tol);
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let outcome = train(&cfg)?;
            fs::write("metrics.csv", outcome.metrics.to_csv())?;
            save_model(Path::new("model.json"), &cfg, &outcome.model)?;
            let summary = serde_json::json!({
                "epochs": cfg.epochs,
                "trainable_params": outcome.metrics.trainable_params,
                "final_test_accuracy": outcome.metrics.final_test_accuracy(),
                "wall_seconds": outcome.metrics.wall_seconds,
            });
            let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
            fs::write("summary.json", &text)?;
            println!("{text}");
            Ok(())
        }
        Command::Eval { model, data } => {
            let (_, loaded) = load_model(&model)?;
            let split = load_split_dir(&data)?;
            let (loss, accuracy) = evaluate_clouds(&loaded, &split.clouds, &split.labels)?;
            println!(
                "{}",
                serde_json::json!({ "loss": loss, "accuracy": accuracy })
            );
            Ok(())
        }
        Command::Gradcheck { full } => {
            let limit = if full { None } else { Some(6) };
            let report = toy_gradient_audit(limit)?;
            report_gradcheck(&report)
        }
        Command::Probe { config } => {
            let rows = layer_probe(&RunConfig::load(&config)?)?;
            write_rows("probe.csv", probe_csv(&rows), &rows)
        }
        Command::Ablate { config } => {
            let rows = ablate(&RunConfig::load(&config)?)?;
            write_rows("ablate.csv", ablate_csv(&rows), &rows)
        }
        Command::OrderBench { config } => {
            let rows = order_bench(&RunConfig::load(&config)?)?;
            write_rows("order_bench.csv", order_bench_csv(&rows), &rows)
        }
        Command::GenData { out, seed } => {
            let mut cfg = RunConfig::default();
            cfg.dataset_seed = seed;
            let ds = generate_dataset(&cfg)?;
            save_split_dir(&out.join("train"), &ds.train)?;
            save_split_dir(&out.join("test"), &ds.test)?;
            println!(
                "{}",
                serde_json::json!({
                    "out": out.display().to_string(),
                    "train_clouds": ds.train.len(),
                    "test_clouds": ds.test.len(),
                    "points": cfg.points,
                })
            );
            Ok(())
        }
    }
}
