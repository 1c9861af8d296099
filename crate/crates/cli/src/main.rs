use std::process::ExitCode;

use clap::Parser;
use diomp::selftest::{run_selftest, SelfTestOptions};

mod launch;
mod plan;
mod worker;

use launch::Outcome;
use plan::{Cli, Command, Experiment, RunPlan};

const EXIT_USAGE: u8 = 2;
const EXIT_CHILD: u8 = 3;
const EXIT_TIMEOUT: u8 = 4;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match cli.command {
        Command::Worker { experiment } => match worker::run(&experiment) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("diomp worker: {e:#}");
                ExitCode::FAILURE
            }
        },
        Command::Run(args) => {
            let plan = match RunPlan::from_args(args) {
                Ok(p) => p,
                Err(e) => {
                    eprintln!("diomp: {e:#}");
                    return ExitCode::from(EXIT_USAGE);
                }
            };
            if let Experiment::Selftest = plan.experiment {
                let report = run_selftest(&SelfTestOptions::from_env());
                print!("{report}");
                return if report.all_passed() { ExitCode::SUCCESS } else { ExitCode::from(EXIT_CHILD) };
            }
            match launch::launch(&plan) {
                Ok(Outcome::Success) => ExitCode::SUCCESS,
                Ok(Outcome::ChildFailed) => ExitCode::from(EXIT_CHILD),
                Ok(Outcome::TimedOut) => ExitCode::from(EXIT_TIMEOUT),
                Err(e) => {
                    eprintln!("diomp: {e:#}");
                    ExitCode::from(EXIT_CHILD)
                }
            }
        }
    }
}
