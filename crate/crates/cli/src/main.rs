//! `bvlab` — command-line front end for the bias–variance laboratory.
//!
//! Subcommands:
//!
//! - `train` — train an ensemble and save each member as a `.bvml` file;
//! - `sweep` — evaluate the configured attacks over their epsilon grids and
//!   write one long-format CSV report;
//! - `compare` — compare attack kinds at matched *measured* perturbation
//!   levels (the first kind's grid fixes the levels);
//! - `decompose` — like `sweep` but always reports the loss decomposition;
//! - `verify` — run the built-in self-check battery.
//!
//! Exit codes: `0` success, `1` configuration or usage error, `2` runtime or
//! numeric error, `3` self-check failure (`verify` only).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use bvlab_cli::config::Config;
use bvlab_cli::harness::{
    build_experiment, run_compare, run_decompose, run_sweep, write_csv, Experiment,
};
use bvlab_cli::verify;

#[derive(Parser)]
#[command(
    name = "bvlab",
    version,
    about = "Bias-variance decompositions of adversarial loss, measured not assumed",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an ensemble and save one model file per seed.
    Train(RunArgs),
    /// Run the configured attack grid and write a CSV report.
    Sweep(RunArgs),
    /// Compare attack kinds at matched measured perturbation levels.
    Compare(RunArgs),
    /// Report loss decompositions under attack (sweep with a fixed report).
    Decompose(RunArgs),
    /// Run the self-check battery; exits 3 if any check fails.
    Verify,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration file (flat `key = value` lines).
    #[arg(long, value_name = "path")]
    config: PathBuf,

    /// Output path; overrides the `out` key from the config.
    /// A directory for `train`, a CSV file for the report commands.
    #[arg(long, value_name = "path")]
    out: Option<String>,

    /// Comma-separated training seeds; overrides the `seeds` config key.
    #[arg(long, value_name = "list")]
    seeds: Option<String>,

    /// Size of the worker thread pool (default: all cores).
    #[arg(long, value_name = "n")]
    threads: Option<usize>,
}

/// A failed run, tagged with which phase went wrong so `main` can pick the
/// right exit code: bad input is `1`, a failure while doing the work is `2`.
enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Runtime(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests are successes; anything else is a
            // usage error and lands in the same exit class as bad configs.
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };

    let outcome = match cli.command {
        Command::Train(args) => run(&args, cmd_train),
        Command::Sweep(args) => run(&args, |exp, out| cmd_report(exp, out, run_sweep)),
        Command::Compare(args) => run(&args, cmd_compare),
        Command::Decompose(args) => run(&args, |exp, out| cmd_report(exp, out, run_decompose)),
        Command::Verify => return cmd_verify(),
    };

    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            ExitCode::from(failure.code())
        }
    }
}

/// Shared scaffolding for every config-bearing subcommand: build the thread
/// pool, load and validate the config, resolve the output path, then hand
/// off to the command body.
fn run(
    args: &RunArgs,
    body: impl FnOnce(&Experiment, &str) -> Result<(), Failure>,
) -> Result<(), Failure> {
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(Failure::Config("--threads must be at least 1".to_string()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(format!("failed to build thread pool: {e}")))?;
    }

    let mut cfg = Config::load(&args.config).map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(seeds) = &args.seeds {
        cfg.set("seeds", seeds);
    }
    let exp = build_experiment(&cfg).map_err(|e| Failure::Config(e.to_string()))?;
    cfg.finish().map_err(|e| Failure::Config(e.to_string()))?;

    let out = args
        .out
        .clone()
        .or_else(|| exp.out.clone())
        .ok_or_else(|| {
            Failure::Config("no output path: pass --out or set `out` in the config".to_string())
        })?;

    exp.maybe_export_data()
        .map_err(|e| Failure::Runtime(e.to_string()))?;

    body(&exp, &out)
}

/// `train`: fit one member per seed and save each under `<out>/`.
fn cmd_train(exp: &Experiment, out: &str) -> Result<(), Failure> {
    let dir = PathBuf::from(out);
    std::fs::create_dir_all(&dir)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))?;

    let ensemble = exp
        .train_ensemble()
        .map_err(|e| Failure::Runtime(e.to_string()))?;

    for (model, seed) in ensemble.members().iter().zip(ensemble.seeds()) {
        let path = dir.join(format!("member_{seed}.bvml"));
        model
            .save(&path)
            .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))?;
    }

    println!(
        "trained {} member(s) on task {}; wrote model files under {}",
        ensemble.len(),
        exp.task.name(),
        dir.display()
    );
    Ok(())
}

/// `sweep` / `decompose`: train, evaluate the grid, write the CSV report.
fn cmd_report(
    exp: &Experiment,
    out: &str,
    runner: impl FnOnce(
        &Experiment,
        &bvlab::Ensemble64,
    ) -> bvlab::Result<Vec<bvlab_cli::harness::SweepRow>>,
) -> Result<(), Failure> {
    let ensemble = exp
        .train_ensemble()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let rows = runner(exp, &ensemble).map_err(|e| Failure::Runtime(e.to_string()))?;
    write_csv(out, &rows).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("wrote {out} ({} rows)", rows.len());
    Ok(())
}

/// `compare`: like the report commands, plus a scope note on stderr.
fn cmd_compare(exp: &Experiment, out: &str) -> Result<(), Failure> {
    eprintln!(
        "note: comparisons cover the attack kinds listed in the config; \
         no externally trained robust baseline is included"
    );
    cmd_report(exp, out, run_compare)
}

/// `verify`: run every self-check, print one line per check, exit 3 on any
/// failure.
fn cmd_verify() -> ExitCode {
    let results = verify::run_all();
    let mut failed = 0usize;
    for r in &results {
        if r.passed {
            println!("PASS {}", r.name);
        } else {
            failed += 1;
            println!("FAIL {}: {}", r.name, r.detail);
        }
    }
    println!(
        "self-check: {}/{} passed",
        results.len() - failed,
        results.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(3)
    }
}
