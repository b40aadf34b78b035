//! `coserve` experiment runner.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use coserve::config::Scenario;
use coserve::dispatcher::Policy;
use coserve::metrics::{compare, comparison_text, Summary};
use coserve::oracle::{enumerate_optimal, evaluate_schedule, replay_subflow, OracleInstance};
use coserve::{engine, Error};

#[derive(Parser)]
#[command(
    name = "coserve",
    version,
    about = "Co-located serving and fine-tuning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario under one policy and write reports to a directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// subflow, round_robin, greedy or ideal_ref.
        #[arg(long, default_value = "subflow")]
        policy: Policy,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Override every workload's scale factor.
        #[arg(long)]
        scale: Option<f64>,
    },
    /// Ratio table of several runs against the first.
    Compare {
        #[arg(required = true, num_args = 2..)]
        dirs: Vec<PathBuf>,
    },
    /// Solve a small dispatch instance exactly and report the subflow replay.
    Oracle {
        #[arg(long)]
        instance: PathBuf,
    },
    /// Print the default scenario with every field spelled out.
    Defaults,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Internal(_) | Error::ConstraintViolation { .. } => 3,
        Error::Io(_) => 1,
        _ => 2,
    }
}

fn run(cmd: Command) -> coserve::Result<()> {
    match cmd {
        Command::Run {
            config,
            policy,
            seed,
            out,
            scale,
        } => {
            let mut scenario = Scenario::load(&config)?;
            if let Some(f) = scale {
                scenario = scenario.with_scale(f);
                scenario.validate()?;
            }
            let ledger = engine::run_policy(&scenario, policy, seed)?;
            ledger.write_outputs(&out)?;
            print!("{}", ledger.summary().to_text());
        }
        Command::Compare { dirs } => {
            let summaries = dirs
                .iter()
                .map(|d| -> coserve::Result<Summary> {
                    let path = d.join("summary.json");
                    let bytes = std::fs::read(&path).map_err(|e| {
                        Error::Config(format!("cannot read {}: {e}", path.display()))
                    })?;
                    Ok(serde_json::from_slice(&bytes)?)
                })
                .collect::<coserve::Result<Vec<_>>>()?;
            print!("{}", comparison_text(&compare(&summaries)?));
        }
        Command::Oracle { instance } => {
            let inst = OracleInstance::load(&instance)?;
            let best = enumerate_optimal(&inst)?;
            let replay = replay_subflow(&inst)?;
            let replay_q = evaluate_schedule(&inst, &replay)?;
            let report = serde_json::json!({
                "optimum": best.q_goodput,
                "candidates": best.candidates,
                "leaves_visited": best.leaves_visited,
                "schedule": best.schedule,
                "subflow_q_goodput": replay_q,
                "subflow_schedule": replay,
            });
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Defaults => print!("{}", Scenario::default().to_toml()?),
    }
    Ok(())
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
