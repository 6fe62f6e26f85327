use std::process::ExitCode;

use clap::Parser;

use fdual_cli::{run, Cli, Format};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (report, code) = run(&cli, args);
    match cli.report {
        Format::Json => print!("{}", report.to_json()),
        Format::Text => print!("{}", report.to_text()),
    }
    ExitCode::from(code)
}
