use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use snstoch::config::RunConfig;
use snstoch::run::{config_dir, execute, physical_report, Command, RunOptions};
use snstoch::Error;

/// Stochastic Schrödinger–Newton trajectories, ensembles and the averaged
/// master equation, all driven by one TOML config.
#[derive(Parser, Debug)]
#[command(name = "snstoch", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for ensembles; overrides the config and SNSTOCH_WORKERS.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Print Λ₀ for the [physical] section in natural units before running.
    #[arg(long, global = true)]
    physical: bool,
    /// Write artifacts here instead of `[output] directory`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// One seeded trajectory with state dumps at the output times.
    Trajectory {
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Ensemble average over `[ensemble] trajectories` trajectories.
    Ensemble,
    /// Dense master-equation oracle.
    Master,
    /// Ensemble and oracle on the same config, with trace distances.
    Compare,
    /// Pure Schrödinger–Newton flow with an energy ledger.
    Deterministic,
    /// Kernel moments and grid-refinement diagnostics.
    KernelsValidate,
    /// Decomposition-invariance test on the `[nosignal]` mixtures.
    NosignalTest,
    /// Parse the config and print it with all defaults filled in.
    Check,
}

fn workers(flag: Option<usize>) -> Result<Option<usize>, String> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("SNSTOCH_WORKERS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|w| *w > 0)
            .map(Some)
            .ok_or_else(|| format!("SNSTOCH_WORKERS must be a positive integer (got `{v}`)")),
        Err(_) => Ok(None),
    }
}

fn report(e: &Error) {
    match e {
        Error::Config(violations) => {
            eprintln!("error: invalid configuration");
            for v in violations {
                eprintln!("  {v}");
            }
        }
        other => eprintln!("error: {other}"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let Some(path) = cli.config.clone() else {
        eprintln!("error: --config <FILE> is required");
        return ExitCode::from(2);
    };
    let config = match RunConfig::from_file(&path) {
        Ok(c) => c,
        Err(e) => {
            report(&e);
            return ExitCode::from(2);
        }
    };
    let workers = match workers(cli.workers) {
        Ok(w) => w,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    if cli.physical {
        match physical_report(&config) {
            Ok(Some(r)) => {
                println!("physical Λ₀ = {:e} (time unit {:e} s)", r.lambda0, r.time_unit_s);
                println!("Γ_tot·T with this Λ₀ = {:e}", r.gamma_t);
                if r.underflow {
                    log::warn!(
                        "collapse rates underflow double precision over t_final; the stochastic terms have no numerical effect"
                    );
                    eprintln!("warning: Γ_tot·T = {:e} is below machine epsilon; rates underflow", r.gamma_t);
                }
            }
            Ok(None) => eprintln!("warning: --physical given but the config has no [physical] section"),
            Err(e) => {
                report(&e);
                return ExitCode::from(1);
            }
        }
    }
    let command = match cli.command {
        Cmd::Check => {
            print!("{}", config.emit());
            return ExitCode::SUCCESS;
        }
        Cmd::Trajectory { .. } => Command::Trajectory,
        Cmd::Ensemble => Command::Ensemble,
        Cmd::Master => Command::Master,
        Cmd::Compare => Command::Compare,
        Cmd::Deterministic => Command::Deterministic,
        Cmd::KernelsValidate => Command::KernelsValidate,
        Cmd::NosignalTest => Command::NoSignalTest,
    };
    let opts = RunOptions {
        base_dir: config_dir(&path),
        output_dir: cli.out,
        workers,
        trajectory_index: match cli.command {
            Cmd::Trajectory { index } => index,
            _ => 0,
        },
    };
    match execute(command, &config, &opts) {
        Ok(outcome) => {
            for line in &outcome.summary {
                println!("{line}");
            }
            for f in &outcome.files {
                log::info!("wrote {}", f.display());
            }
            if outcome.gates_passed {
                ExitCode::SUCCESS
            } else {
                eprintln!("error: a validation gate failed");
                ExitCode::from(3)
            }
        }
        Err(e) => {
            report(&e);
            ExitCode::from(1)
        }
    }
}
