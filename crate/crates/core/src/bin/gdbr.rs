//! Command-line entry point: run experiments, sweep configuration axes,
//! verify the gradient identities, and generate synthetic datasets.

use clap::{Parser, Subcommand};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use gdbr_core::harness::{
    gen_synthetic_dataset, run_config, run_sweep, save_idx_dataset, ExperimentConfig,
    RunReport, SweepAxis, SweepReport, SyntheticSpec,
};
use gdbr_core::verify;

#[derive(Parser)]
#[command(
    name = "gdbr",
    about = "Label recovery from restricted gradient sharing: simulation lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment configuration for its R repetitions.
    Run {
        /// Path to the JSON experiment config.
        config: PathBuf,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of repetitions.
        #[arg(long)]
        reps: Option<usize>,
        /// Directory for report.json and trials.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one configuration axis, R trials per value.
    Sweep {
        config: PathBuf,
        /// Axis to sweep: batch_size, distribution, layer, prune_ratio,
        /// noise_sigma, estimator or init.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values, e.g. `0,0.5,0.9`.
        #[arg(long)]
        values: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the gradient-identity and recovery-exactness suite.
    Verify {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
    /// Generate a synthetic dataset and write it as an IDX image/label pair.
    GenData {
        /// Path to a JSON SyntheticSpec document.
        spec: PathBuf,
        /// Output directory for images.idx and labels.idx.
        out: PathBuf,
    },
}

fn load_config(
    path: &Path,
    seed: Option<u64>,
    reps: Option<usize>,
) -> gdbr_core::Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    let mut config = ExperimentConfig::from_json(&text)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(reps) = reps {
        config.repetitions = reps;
    }
    config.validate()?;
    Ok(config)
}

fn write_outputs(
    out: Option<&Path>,
    report_name: &str,
    report_json: &str,
    csv_rows: &[(String, Vec<gdbr_core::harness::TrialReport>)],
) -> gdbr_core::Result<()> {
    let Some(dir) = out else { return Ok(()) };
    fs::create_dir_all(dir)?;
    fs::write(dir.join(report_name), report_json)?;
    let csv_file = fs::File::create(dir.join("trials.csv"))?;
    gdbr_core::harness::report::write_trials_csv(csv_file, csv_rows)?;
    println!("wrote {} and trials.csv to {}", report_name, dir.display());
    Ok(())
}

fn print_run_summary(report: &RunReport) {
    let agg = &report.aggregate;
    println!(
        "{} trials: InsAcc {:.4} +- {:.4}, ClsAcc {:.4} +- {:.4}",
        agg.trials, agg.mean_ins_acc, agg.std_ins_acc, agg.mean_cls_acc, agg.std_cls_acc
    );
}

fn print_sweep_summary(report: &SweepReport) {
    println!("sweep over {}:", report.axis);
    for row in &report.rows {
        let agg = &row.aggregate;
        println!(
            "  {} = {}: InsAcc {:.4} +- {:.4}, ClsAcc {:.4} +- {:.4}",
            report.axis, row.axis_value, agg.mean_ins_acc, agg.std_ins_acc, agg.mean_cls_acc,
            agg.std_cls_acc
        );
    }
}

fn run(cli: Cli) -> gdbr_core::Result<bool> {
    match cli.command {
        Command::Run {
            config,
            seed,
            reps,
            out,
        } => {
            let config = load_config(&config, seed, reps)?;
            let report = run_config(config)?;
            print_run_summary(&report);
            let json = serde_json::to_string_pretty(&report)
                .map_err(gdbr_core::Error::from)?;
            write_outputs(out.as_deref(), "report.json", &json, &report.csv_rows())?;
            Ok(true)
        }
        Command::Sweep {
            config,
            axis,
            values,
            seed,
            reps,
            out,
        } => {
            let config = load_config(&config, seed, reps)?;
            let axis = SweepAxis::parse(&axis)?;
            let values: Vec<String> = values
                .split(',')
                .map(|v| v.trim().to_string())
                .filter(|v| !v.is_empty())
                .collect();
            let report = run_sweep(config, axis, &values)?;
            print_sweep_summary(&report);
            let json = serde_json::to_string_pretty(&report)
                .map_err(gdbr_core::Error::from)?;
            write_outputs(out.as_deref(), "sweep.json", &json, &report.csv_rows())?;
            Ok(true)
        }
        Command::Verify { seed } => {
            let outcomes = verify::run_all(seed);
            let mut all_passed = true;
            for outcome in &outcomes {
                let status = if outcome.passed { "PASS" } else { "FAIL" };
                println!("[{status}] {} ({})", outcome.name, outcome.detail);
                all_passed &= outcome.passed;
            }
            println!(
                "{}/{} checks passed",
                outcomes.iter().filter(|o| o.passed).count(),
                outcomes.len()
            );
            Ok(all_passed)
        }
        Command::GenData { spec, out } => {
            let text = fs::read_to_string(&spec)?;
            let spec: SyntheticSpec = serde_json::from_str(&text)?;
            let dataset = gen_synthetic_dataset(&spec)?;
            fs::create_dir_all(&out)?;
            let images = out.join("images.idx");
            let labels = out.join("labels.idx");
            save_idx_dataset(&dataset, &images, &labels)?;
            println!(
                "wrote {} samples ({} classes) to {} and {}",
                dataset.len(),
                dataset.class_count,
                images.display(),
                labels.display()
            );
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
