//! Library side of the `fdual` binary: argument definitions, dispatch and
//! report assembly.

pub mod commands;
pub mod report;

use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use commands::{Failure, Output, Side, SolveArgs, EXIT_INVALID};
use fdual_core::build_model;
use report::{digest, CommandEcho, RunReport, SCHEMA_VERSION};

#[derive(Debug, Parser)]
#[command(name = "fdual", version, about = "Duality checks for markets with proportional transaction costs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Report format.
    #[arg(long, value_enum, default_value_t = Format::Json, global = true)]
    pub report: Format,
    /// Omit the wall time so reports are byte-identical across runs.
    #[arg(long, global = true)]
    pub no_timing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SideArg {
    Upper,
    Lower,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse and check an instance file.
    Validate { file: String },
    /// Find a consistent price system, optionally one pricing a claim at a given price.
    Cps {
        file: String,
        /// Spread level used instead of the instance λ.
        #[arg(long)]
        lambda_prime: Option<f64>,
        /// Claim index and price.
        #[arg(long, num_args = 2, value_names = ["INDEX", "PRICE"], allow_negative_numbers = true)]
        price_of: Option<Vec<String>>,
    },
    /// Superhedging (upper) or sub-hedging (lower) price of a claim.
    Superhedge {
        file: String,
        /// Claim index, or comma-separated terminal payoffs.
        #[arg(long, allow_hyphen_values = true)]
        claim: String,
        #[arg(long, value_enum, default_value_t = SideArg::Upper)]
        side: SideArg,
    },
    /// Utility maximization with the endowment held in quantity q.
    Solve(SolveCmd),
    /// Run the randomized invariant suite.
    Suite {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 3)]
        max_depth: usize,
        #[arg(long, default_value_t = 3)]
        max_branch: usize,
        /// Reverse the given inequality row of the CPS polytope (fault injection).
        #[arg(long, value_name = "ROW")]
        flip_cps_row: Option<usize>,
    },
}

#[derive(Debug, Args)]
pub struct SolveCmd {
    pub file: String,
    #[arg(long, allow_negative_numbers = true)]
    pub x: f64,
    /// Claim quantities, comma-separated (defaults to zero).
    #[arg(long, allow_hyphen_values = true)]
    pub q: Option<String>,
    /// Extract the dual optimizer and report the duality relations.
    #[arg(long)]
    pub dual: bool,
    /// Build the shadow-price candidate and classify it (implies --dual).
    #[arg(long)]
    pub shadow: bool,
    /// Tolerance for residuals and the shadow verdict.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Interior-point stopping tolerance.
    #[arg(long, default_value_t = 1e-10)]
    pub solver_tol: f64,
    #[arg(long, default_value_t = fdual_core::convex::DEFAULT_MAX_ITER)]
    pub max_iter: usize,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Validate { .. } => "validate",
            Command::Cps { .. } => "cps",
            Command::Superhedge { .. } => "superhedge",
            Command::Solve(_) => "solve",
            Command::Suite { .. } => "suite",
        }
    }

    fn file(&self) -> Option<&str> {
        match self {
            Command::Validate { file } | Command::Cps { file, .. } | Command::Superhedge { file, .. } => Some(file),
            Command::Solve(s) => Some(&s.file),
            Command::Suite { .. } => None,
        }
    }
}

fn run_command(cmd: &Command, text: Option<&str>) -> Result<Output, Failure> {
    let inst = text.map(build_model).transpose()?;
    let inst = || inst.as_ref().expect("commands with a file have an instance");
    match cmd {
        Command::Validate { .. } => Ok(commands::validate(inst())),
        Command::Cps {
            lambda_prime, price_of, ..
        } => {
            let price_of = match price_of.as_deref() {
                Some([idx, p]) => {
                    let idx = idx.parse::<usize>().map_err(|e| Failure::new(EXIT_INVALID, format!("claim index: {e}")))?;
                    let p = p.parse::<f64>().map_err(|e| Failure::new(EXIT_INVALID, format!("price: {e}")))?;
                    Some((idx, p))
                }
                _ => None,
            };
            commands::cps(inst(), *lambda_prime, price_of)
        }
        Command::Superhedge { claim, side, .. } => {
            let g = commands::resolve_claim(inst(), claim)?;
            let side = match side {
                SideArg::Upper => Side::Upper,
                SideArg::Lower => Side::Lower,
            };
            commands::superhedge(inst(), &g, side)
        }
        Command::Solve(s) => {
            let q = match &s.q {
                Some(text) => commands::parse_vector(text).map_err(|e| Failure::new(EXIT_INVALID, e))?,
                None => Vec::new(),
            };
            let args = SolveArgs {
                x: s.x,
                q,
                dual: s.dual,
                shadow: s.shadow,
                tol: s.tol,
                solver_tol: s.solver_tol,
                max_iter: s.max_iter,
            };
            commands::solve(inst(), &args)
        }
        Command::Suite {
            seed,
            count,
            max_depth,
            max_branch,
            flip_cps_row,
        } => Ok(commands::suite(*seed, *count, *max_depth, *max_branch, *flip_cps_row)),
    }
}

/// Runs one command and returns its report and exit code. `args` is echoed
/// into the report.
pub fn run(cli: &Cli, args: Vec<String>) -> (RunReport, u8) {
    let start = Instant::now();
    let cmd = &cli.command;
    let mut digest_hex = None;
    let outcome = match cmd.file() {
        Some(path) => match std::fs::read(path) {
            Ok(bytes) => {
                digest_hex = Some(digest(&bytes));
                match String::from_utf8(bytes) {
                    Ok(text) => run_command(cmd, Some(&text)),
                    Err(e) => Err(Failure::new(EXIT_INVALID, format!("instance is not UTF-8: {e}"))),
                }
            }
            Err(e) => Err(Failure::new(EXIT_INVALID, format!("cannot read {path}: {e}"))),
        },
        None => run_command(cmd, None),
    };
    let (results, residuals, code) = match outcome {
        Ok(o) => (o.results, o.residuals, o.code),
        Err(f) => {
            let mut results = f.results;
            results["error"] = json!(f.message);
            results["exit_code"] = json!(f.code);
            if cmd.name() == "validate" {
                results["valid"] = json!(false);
            }
            (results, json!({}), f.code)
        }
    };
    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        command: CommandEcho {
            name: cmd.name().to_string(),
            args,
        },
        instance_digest: digest_hex,
        results,
        residuals,
        wall_time_ms: (!cli.no_timing).then(|| start.elapsed().as_secs_f64() * 1e3),
    };
    (report, code)
}
