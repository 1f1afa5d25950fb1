mod args;
mod denoiser_spec;
mod estimate;
mod failure;
mod report;
mod tools;

use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};

use args::{Cli, Command};
use failure::{CliResult, Failure};

fn run(cli: &Cli, matches: &clap::ArgMatches) -> CliResult {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs as usize)
            .build_global()
            .map_err(|e| Failure::config(format!("cannot start {jobs} worker threads: {e}")))?;
    }
    match &cli.command {
        Command::Estimate(a) => {
            let sub = matches
                .subcommand_matches("estimate")
                .expect("estimate matches present");
            estimate::cmd_estimate(a, sub)
        }
        Command::Replay(a) => estimate::cmd_replay(a),
        Command::Report(a) => report::cmd_report(a),
        Command::Evaluate(a) => tools::cmd_evaluate(a),
        Command::MergeHdr { args } => tools::cmd_merge(args),
        Command::Tonemap(a) => tools::cmd_tonemap(a),
        Command::Unwrap(a) => tools::cmd_unwrap(a),
        Command::RenderSpheres(a) => tools::cmd_render(a),
        Command::CropPano(a) => tools::cmd_crop(a),
    }
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(&cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}
