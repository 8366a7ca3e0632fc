//! The `lwm` command line: dataset generation, pre-training, embedding
//! export, downstream benchmarks, attention maps and a gradient self-check.
//!
//! Every command writes a JSON manifest next to its outputs and refuses to
//! overwrite existing files without `--force`.

pub mod cmd;
pub mod config;
pub mod error;
pub mod manifest;

use std::ffi::OsString;

use clap::{Parser, Subcommand};
use lwm_core::exec;

pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "lwm", version, about = "Large wireless model toolkit")]
pub struct Cli {
    /// Worker threads (1 forces the sequential path).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled channel dataset.
    GenData(cmd::gen_data::GenDataArgs),
    /// Pre-train the encoder with masked channel modeling.
    Pretrain(cmd::pretrain::PretrainArgs),
    /// Export CLS and/or channel embeddings as CSV.
    Embed(cmd::embed::EmbedArgs),
    /// Benchmark task heads on raw channels and embeddings.
    Downstream(cmd::downstream::DownstreamArgs),
    /// Dump every layer/head attention map of one channel.
    Attention(cmd::attention::AttentionArgs),
    /// Finite-difference check of the full model on the micro config.
    Gradcheck(cmd::gradcheck::GradcheckArgs),
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli, argv: &[String]) -> CliResult<()> {
    match cli.jobs {
        Some(0) => Err(CliError::Usage("--jobs must be at least 1".into())),
        Some(j) => exec::with_jobs(j, || dispatch(cli.command, argv)),
        None => dispatch(cli.command, argv),
    }
}

fn dispatch(command: Command, argv: &[String]) -> CliResult<()> {
    match command {
        Command::GenData(a) => cmd::gen_data::run(&a, argv),
        Command::Pretrain(a) => cmd::pretrain::run(&a, argv),
        Command::Embed(a) => cmd::embed::run(&a, argv),
        Command::Downstream(a) => cmd::downstream::run(&a, argv),
        Command::Attention(a) => cmd::attention::run(&a, argv),
        Command::Gradcheck(a) => cmd::gradcheck::run(&a, argv),
    }
}
