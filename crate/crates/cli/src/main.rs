//! Batch entry point: fixture creation, flip-search attacks, evaluation,
//! the clipping defense, and cosine interpretation traces.
//!
//! Every subcommand reads an optional JSON config file (strict schema,
//! unknown keys rejected); command-line flags override file values. Reports
//! embed the fully resolved configuration and seeds, and contain no
//! timestamps or absolute paths, so rerunning an invocation reproduces them
//! byte for byte.
//!
//! Exit codes: 0 success, 2 configuration/validation error, 3 fixture
//! calibration failure, 4 data error (unreadable/corrupt files), 1 anything
//! else.

mod commands;
mod config;
mod error;

use clap::{Parser, Subcommand};

use crate::commands::{AttackArgs, CosineArgs, DefendArgs, EvalArgs, FixtureArgs};

#[derive(Parser)]
#[command(
    name = "eosflip",
    version,
    about = "Bit-flip inference-cost attack simulator for a tiny decoder-only LM"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a calibrated synthetic model and write its probe report.
    Fixture(FixtureArgs),
    /// Search for EOS-row bit flips and write the attacked model + report.
    Attack(AttackArgs),
    /// Evaluate original vs attacked models on held-out prompts.
    Eval(EvalArgs),
    /// Clamp an attacked model's output embedding to reference bounds.
    Defend(DefendArgs),
    /// Per-step cosine between the EOS row and the hidden states.
    Cosine(CosineArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fixture(args) => commands::cmd_fixture(args),
        Command::Attack(args) => commands::cmd_attack(args),
        Command::Eval(args) => commands::cmd_eval(args),
        Command::Defend(args) => commands::cmd_defend(args),
        Command::Cosine(args) => commands::cmd_cosine(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
