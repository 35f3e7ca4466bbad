use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use self_ensemble::harness::{
    ablation_csv, emit_report, read_report, run_ablation_suite, run_experiment, AblationRow,
    ExperimentConfig, Variant,
};
use self_ensemble::Error;

#[derive(Parser)]
#[command(version, about = "Train classifiers on noisy labels with self-ensemble label filtering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// `key=value` on a dotted config path; may repeat.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run several variants on the same seeds and write a comparison table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        variants: Vec<String>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Print the headline numbers of an emitted report.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

/// Prints to stdout, ignoring a closed pipe.
macro_rules! out {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

fn exit_code(e: &Error) -> ExitCode {
    match e {
        Error::Numerical(_) => ExitCode::from(3),
        Error::Config(_) | Error::InvalidSpec(_) | Error::Load { .. } | Error::Io { .. } => {
            ExitCode::from(2)
        }
        _ => ExitCode::from(1),
    }
}

fn print_row(row: &AblationRow) {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    out!(
        "{:<18} test_acc={} precision={} recall={} iterations={} epochs={}{}",
        row.variant.name(),
        fmt(row.final_test_acc),
        fmt(row.final_precision),
        fmt(row.final_recall),
        row.iterations,
        row.epochs_used,
        if row.aborted { " (aborted)" } else { "" }
    );
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Run {
            config,
            overrides,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config, &overrides)?;
            let report = run_experiment(&cfg)?;
            emit_report(&report, &out)?;
            print_row(&AblationRow::from(&report));
            if let Some(msg) = &report.abort {
                eprintln!("numerical abort: {msg}");
                return Ok(ExitCode::from(3));
            }
        }
        Command::Ablate {
            config,
            variants,
            overrides,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config, &overrides)?;
            let variants = variants
                .iter()
                .map(|v| v.parse::<Variant>())
                .collect::<Result<Vec<_>, _>>()?;
            let rows = run_ablation_suite(&cfg, &variants, Some(&out))?;
            rows.iter().for_each(print_row);
            if rows.iter().any(|r| r.aborted) {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Report { input } => {
            let report = read_report(&input)?;
            let row = AblationRow::from(&report);
            print_row(&row);
            for it in &report.iterations {
                out!(
                    "  iteration {}: val_acc={:.4} epochs={} active={} -> {} precision={:.4} recall={:.4}",
                    it.iteration,
                    it.best_val_acc,
                    it.epochs_run,
                    it.active_count_before,
                    it.active_count_after,
                    it.filter_precision,
                    it.filter_recall
                );
            }
            let table = ablation_csv(&[row])?;
            let _ = std::io::stdout().write_all(&table);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
