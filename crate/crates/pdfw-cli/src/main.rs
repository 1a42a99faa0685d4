//! Command-line front end: run or validate experiment configs, print the
//! modeled memory ledger, and sample schedule convergence conditions.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use pdfw_core::experiment::{assemble, run_experiment, ExperimentConfig, ReferencePolicy};
use pdfw_core::metrics::{memory_ledger, LedgerAlgorithm};
use pdfw_core::solver::{effective_norm, validate_schedule, SolverMode, StepSchedule};
use pdfw_core::Error;

#[derive(Parser)]
#[command(
    name = "pdfw",
    version,
    about = "Image reconstruction with primal-dual solvers on a parallel-beam CT testbed"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute every solver run in an experiment config and write artifacts
    Run {
        /// Path to a TOML experiment description
        config_path: PathBuf,
    },
    /// Parse a config, estimate the operator norm, and report schedule
    /// conditions without running any solver
    Validate {
        /// Path to a TOML experiment description
        config_path: PathBuf,
    },
    /// Print the modeled per-algorithm memory footprint for given dimensions
    Ledger {
        /// Algorithm label: lalm, pdcp, pdfw-theta1, or pdfw-theta0
        #[arg(long)]
        algo: String,
        /// Image-space length n
        #[arg(long)]
        n: usize,
        /// Transform-space length N
        #[arg(long = "N")]
        big_n: usize,
        /// Data-space length m
        #[arg(long)]
        m: usize,
        /// Bytes per stored element
        #[arg(long, default_value_t = 4)]
        bytes: usize,
    },
    /// Sample the convergence conditions of a preset schedule
    ScheduleCheck {
        /// Schedule name: S1 or S2
        #[arg(long)]
        schedule: String,
        /// Operator norm the schedule is evaluated against
        #[arg(long = "L")]
        l_norm: f64,
        /// Horizon: conditions are sampled at K/10, K/2, and K
        #[arg(long = "K")]
        k_max: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument { .. } | Error::InvalidFile { .. } => 1,
        Error::DimensionMismatch { .. } | Error::Diverged { .. } | Error::ObserverCheck { .. } => 2,
        Error::Io { .. } => 3,
    }
}

fn describe_mode(mode: SolverMode) -> &'static str {
    match mode {
        SolverMode::Pdfw => "pdfw",
        SolverMode::Pdcp => "pdcp",
    }
}

fn describe_schedule(schedule: &StepSchedule) -> String {
    match schedule {
        StepSchedule::S1 => "S1".to_owned(),
        StepSchedule::S2 => "S2".to_owned(),
        StepSchedule::Custom { theta, .. } => format!("custom (theta = {theta})"),
    }
}

fn cmd_run(config_path: &Path) -> Result<(), Error> {
    let config = ExperimentConfig::load(config_path)?;
    println!(
        "{}x{} grid, {} views x {} detectors, lambda = {}, {} run(s)",
        config.nx,
        config.ny,
        config.geometry.num_views(),
        config.geometry.num_detectors(),
        config.lambda,
        config.runs.len()
    );
    let summary = run_experiment(&config)?;
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "operator norm {:.6} (padded to {:.6}), reference cost {:.6e}",
        summary.op_norm,
        effective_norm(summary.op_norm),
        summary.reference_cost
    );
    println!("reference image: {}", summary.reference_path.display());
    for run in &summary.runs {
        for w in &run.warnings {
            eprintln!("warning [{}]: {w}", run.name);
        }
        println!(
            "{:<16} final normalized cost {:>12.6e}  rmsd {:>12.6e}  -> {}",
            run.name,
            run.final_normalized_cost,
            run.final_rmsd,
            run.csv_path.display()
        );
    }
    println!("artifacts in {}", summary.output_dir.display());
    Ok(())
}

fn cmd_validate(config_path: &Path) -> Result<(), Error> {
    let config = ExperimentConfig::load(config_path)?;
    println!(
        "config ok: {}x{} grid, {} views x {} detectors, lambda = {}",
        config.nx,
        config.ny,
        config.geometry.num_views(),
        config.geometry.num_detectors(),
        config.lambda
    );
    match &config.reference {
        ReferencePolicy::Load(path) => println!("reference: load {}", path.display()),
        ReferencePolicy::Compute {
            mode,
            schedule,
            k_max,
        } => println!(
            "reference: compute via {} / {} for {k_max} iterations",
            describe_mode(*mode),
            describe_schedule(schedule)
        ),
    }
    let assembled = assemble(&config)?;
    for w in &assembled.warnings {
        eprintln!("warning: {w}");
    }
    let l_eff = effective_norm(assembled.op_norm.value);
    println!(
        "operator norm {:.6} in {} iterations (padded to {:.6})",
        assembled.op_norm.value, assembled.op_norm.iterations, l_eff
    );
    for run in &config.runs {
        let horizon = run.k_max.max(10);
        println!(
            "\nrun {:?}: {} / {}, k_max = {}",
            run.name,
            describe_mode(run.mode),
            describe_schedule(&run.schedule),
            run.k_max
        );
        print!("{}", validate_schedule(&run.schedule, l_eff, horizon)?);
    }
    Ok(())
}

fn cmd_ledger(algo: &str, n: usize, big_n: usize, m: usize, bytes: usize) -> Result<(), Error> {
    let algorithm = LedgerAlgorithm::from_str(algo)?;
    let ledger = memory_ledger(algorithm, (n, big_n, m), bytes)?;
    println!("{ledger}");
    Ok(())
}

fn cmd_schedule_check(schedule: &str, l_norm: f64, k_max: usize) -> Result<(), Error> {
    let schedule = match schedule.to_ascii_lowercase().as_str() {
        "s1" => StepSchedule::S1,
        "s2" => StepSchedule::S2,
        other => {
            return Err(Error::InvalidArgument {
                field: "schedule".to_owned(),
                reason: format!("unknown schedule {other:?} (expected S1 or S2)"),
            });
        }
    };
    print!("{}", validate_schedule(&schedule, l_norm, k_max)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config_path } => cmd_run(config_path),
        Command::Validate { config_path } => cmd_validate(config_path),
        Command::Ledger {
            algo,
            n,
            big_n,
            m,
            bytes,
        } => cmd_ledger(algo, *n, *big_n, *m, *bytes),
        Command::ScheduleCheck {
            schedule,
            l_norm,
            k_max,
        } => cmd_schedule_check(schedule, *l_norm, *k_max),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
