//! Command-line front end for weaving-zone analysis: `match`, `eval`,
//! `synth` and `reid-eval`.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

use clap::{Parser, Subcommand};

use crate::commands::{EvalArgs, MatchArgs, ReidArgs, SynthArgs};
pub use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "weave", version, about = "Lane-level weaving flows from two-camera vehicle re-identification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Match entry and exit observations and write a flow report.
    Match(MatchArgs),
    /// Score a report's matches against ground truth.
    Eval(EvalArgs),
    /// Generate a synthetic scenario with ground truth.
    Synth(SynthArgs),
    /// CMC and mAP for a query/gallery split.
    ReidEval(ReidArgs),
}

/// Runs one subcommand and returns what it prints on stdout.
pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Match(a) => commands::cmd_match(a).map(|(_, text)| text),
        Command::Eval(a) => commands::cmd_eval(a).map(|(_, text)| text),
        Command::Synth(a) => commands::cmd_synth(a),
        Command::ReidEval(a) => commands::cmd_reid_eval(a).map(|(_, text)| text),
    }
}
