//! Command-line driver for the stopping-rule pipeline. Each subcommand runs
//! one stage against a shared TOML config; artifacts land under the run root
//! and chain hashes so stages refuse stale inputs.
//!
//! Exit codes: 0 on success, 2 for anything wrong with the config, the
//! arguments, or the artifacts themselves, 3 when an upstream stage has not
//! run yet.

use clap::{Parser, Subcommand};
use milpstop_core::pipeline::{
    resolve_output_root, run_checks, Pipeline, PipelineConfig, PipelineError,
};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "milpstop",
    version,
    about = "Learned early stopping for branch-and-bound MILP solves"
)]
struct Cli {
    /// Pipeline configuration file.
    #[arg(short, long, global = true, default_value = "milpstop.toml")]
    config: PathBuf,
    /// Run root override; beats the MILPSTOP_OUTPUT_ROOT env var and the
    /// config's output_dir.
    #[arg(long, global = true)]
    output_root: Option<PathBuf>,
    /// Solver threads for the solve fan-out; overrides the config.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train, calibration, and test instance splits.
    Gen,
    /// Solve every instance to a proved optimum, writing bound traces.
    Solve,
    /// Train the remaining-gap predictor on the train traces.
    Train,
    /// Extract the stopping threshold from the calibration traces.
    Calibrate,
    /// Run every stopping rule on the test traces and write the report.
    Evaluate,
    /// Print the evaluation artifact as a per-method table.
    Report,
    /// Monte Carlo estimate of the coverage guarantee.
    Coverage,
    /// Fast self-checks of the math the pipeline relies on.
    Checks,
}

fn main() {
    let cli = Cli::parse();
    std::process::exit(run(cli));
}

fn run(cli: Cli) -> i32 {
    if let Command::Checks = cli.command {
        let results = run_checks(2024);
        let mut failed = 0usize;
        for r in &results {
            let verdict = if r.passed { "ok" } else { "FAILED" };
            println!("check {:<18} {} ({})", r.name, verdict, r.detail);
            failed += (!r.passed) as usize;
        }
        if failed > 0 {
            eprintln!("{failed} self-check(s) failed");
            return 2;
        }
        return 0;
    }

    match run_stage(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run_stage(cli: &Cli) -> Result<(), PipelineError> {
    let mut config = PipelineConfig::from_toml_path(&cli.config)?;
    if let Some(workers) = cli.workers {
        config.workers = workers;
    }
    let root = resolve_output_root(&config, cli.output_root.as_deref());
    let pipeline = Pipeline::new(config, root)?;
    match cli.command {
        Command::Gen => {
            let summary = pipeline.gen()?;
            let detail: Vec<String> = summary
                .per_split
                .iter()
                .map(|(split, count)| format!("{split} {count}"))
                .collect();
            println!(
                "generated {} instances ({}) under {}",
                summary.total,
                detail.join(", "),
                pipeline.root().display()
            );
        }
        Command::Solve => {
            let s = pipeline.solve()?;
            println!(
                "solved {}, reused {}, replaced {}, failed {} ({} hit the tick limit)",
                s.solved, s.reused, s.replaced, s.failures, s.tick_limited
            );
        }
        Command::Train => {
            let m = pipeline.train()?;
            let first = m.loss_history.first().copied().unwrap_or(f64::NAN);
            let best = m.loss_history.get(m.best_epoch).copied().unwrap_or(f64::NAN);
            println!(
                "trained on {} traces ({} skipped unsolved); loss {first:.4e} -> {best:.4e} \
                 at epoch {}; wrote {}",
                m.trained_on,
                m.skipped_unsolved,
                m.best_epoch,
                pipeline.model_path().display()
            );
        }
        Command::Calibrate => {
            let c = pipeline.calibrate()?;
            println!(
                "kappa {:.6e} at rank {} of {} scores ({} degenerate, {} dropped); wrote {}",
                c.kappa,
                c.n,
                c.c,
                c.degenerate_count,
                c.dropped_count,
                pipeline.calibration_path().display()
            );
        }
        Command::Evaluate => {
            let e = pipeline.evaluate()?;
            println!(
                "evaluated {} test traces: coverage {:.3}, mean tick reduction {:.1}%; wrote {}",
                e.report.num_traces,
                e.report.coverage,
                100.0 * e.report.mean_tick_reduction,
                pipeline.report_path().display()
            );
        }
        Command::Report => {
            let table = pipeline.report()?;
            print!("{table}");
        }
        Command::Coverage => {
            let c = pipeline.coverage()?;
            println!(
                "coverage {:.3} +/- {:.3} over {} trials (c {}, mean kappa {:.4e}, floor {:.3}); wrote {}",
                c.run.coverage,
                c.run.stderr,
                c.run.trials,
                c.run.calibration_size,
                c.run.mean_kappa,
                c.success_floor,
                pipeline.coverage_path().display()
            );
        }
        Command::Checks => unreachable!("handled before config loading"),
    }
    Ok(())
}
