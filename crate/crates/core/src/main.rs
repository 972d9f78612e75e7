use std::process::ExitCode;

use clap::Parser;
use evgrid::cli_io::{run_cli, Cli, ExitStatus};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let report = run_cli(&cli);
    for line in &report.lines {
        if report.status == ExitStatus::Success {
            println!("{line}");
        } else {
            eprintln!("{line}");
        }
    }
    ExitCode::from(report.status.code())
}
