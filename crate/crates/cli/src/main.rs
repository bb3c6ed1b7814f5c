//! `bmlr`: train, compare methods, sweep reshaping hyperparameters, and
//! self-check gradients.
//!
//! Exit codes: 0 success, 1 invalid configuration, 2 runtime failure.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use bmlr_core::data::{self, SyntheticSpec};
use bmlr_core::experiment::{self, ExperimentConfig, Failure, Overrides, SUMMARY_PREFIX};
use bmlr_core::gradcheck;
use bmlr_core::model::FusionKind;
use bmlr_core::trainer::MethodKind;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bmlr", version, about = "Balanced multimodal learning with label reshaping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one method and write metrics, summary and checkpoint.
    Train(RunArgs),
    /// Train every (method, seed) pair from the config's `methods` and `seeds`.
    Compare(RunArgs),
    /// Train over the config's `sweep` grid of (alpha, beta).
    Sweep(RunArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scale the analytic gradient by 1.01 so the check must fail.
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Write a synthetic dataset CSV from a JSON generator spec.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<MethodKind>,
    #[arg(long)]
    fusion: Option<FusionKind>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<ExperimentConfig, Failure> {
        let mut cfg = ExperimentConfig::load(&self.config).map_err(Failure::Validation)?;
        cfg.apply(&Overrides {
            seed: self.seed,
            method: self.method,
            fusion: self.fusion,
            alpha: self.alpha,
            beta: self.beta,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            out: self.out.clone(),
        });
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut stdout = std::io::stdout().lock();
    let mut stderr = std::io::stderr();
    match cli.command {
        Command::Train(args) => experiment::run_train(&args.resolve()?, &mut stdout).map(drop),
        Command::Compare(args) => experiment::run_compare(&args.resolve()?, &mut stdout, &mut stderr).map(drop),
        Command::Sweep(args) => experiment::run_sweep(&args.resolve()?, &mut stdout, &mut stderr).map(drop),
        Command::Gradcheck { seed, corrupt_backward } => {
            let backward = if corrupt_backward {
                gradcheck::corrupted_backward
            } else {
                gradcheck::model_backward
            };
            let report = gradcheck::gradcheck_with(seed, backward).map_err(|e| Failure::Runtime(e.to_string()))?;
            let _ = stdout.write_all(report.render().as_bytes());
            let w = report.worst();
            let _ = writeln!(
                stdout,
                "{SUMMARY_PREFIX}gradcheck|seed={seed}|max_rel_err={:.3e}|tolerance={:e}|passed={}",
                w.max_rel_error,
                gradcheck::TOLERANCE,
                report.passed()
            );
            if report.passed() {
                Ok(())
            } else {
                Err(Failure::Runtime(format!(
                    "gradient check failed: worst {} {} {} {} relative error {:.3e}",
                    w.fusion, w.head, w.group, w.worst, w.max_rel_error
                )))
            }
        }
        Command::GenData { spec, out } => {
            let text = std::fs::read_to_string(&spec)
                .map_err(|e| Failure::Validation(bmlr_core::Error::Invalid(format!("{}: {e}", spec.display()))))?;
            let spec: SyntheticSpec = serde_json::from_str(&text)
                .map_err(|e| Failure::Validation(bmlr_core::Error::Invalid(format!("{}: {e}", spec.display()))))?;
            let ds = data::generate(&spec).map_err(Failure::Validation)?;
            data::save(&ds, &out).map_err(|e| Failure::Runtime(e.to_string()))?;
            let _ = writeln!(
                stdout,
                "{SUMMARY_PREFIX}gen-data|train={}|test={}|path={}",
                ds.train().len(),
                ds.test().len(),
                out.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
