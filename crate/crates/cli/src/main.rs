//! `vdes`: the virtual-DES pipeline as one command-line tool.
//!
//! Exit codes: 0 on success, 1 on a domain or I/O error, 2 on a usage error.

mod data;
mod fsutil;
mod imaging;
mod learn;
mod report;

use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use vdes_core::translator::MODEL_FORMAT_VERSION;

#[derive(Debug, Parser)]
#[command(name = "vdes", about = "Virtual DES toolkit for contrast-enhanced mammography")]
pub struct Cli {
    /// Seed for every randomized step; overrides a config file seed when given.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[arg(long, global = true, value_enum, default_value_t = Verbosity::Normal)]
    pub verbosity: Verbosity,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Verbosity {
    Quiet,
    Normal,
    Debug,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan a directory of P<id>_<side>_<energy>_<view> images into a manifest.
    PairScan(data::PairScanArgs),
    /// Find the translation aligning a DES image to its LE image.
    Register(imaging::RegisterArgs),
    /// NL-means denoising of LE images.
    Denoise(imaging::DenoiseArgs),
    /// Cut LE/LED/DES crops around annotations and from normal tissue.
    Crop(data::CropArgs),
    /// Patient-disjoint stratified train/val/test split.
    Split(data::SplitArgs),
    /// Offline synchronized augmentation of crop triplets.
    Augment(data::AugmentArgs),
    /// Train the LE→DES translator.
    TrainTranslator(learn::TrainArgs),
    /// Run a trained translator on LE images.
    InferTranslator(learn::InferArgs),
    /// Accuracy/F1 report over repeated runs.
    Eval(report::EvalArgs),
    /// Finite-difference check of every differentiable op.
    Gradcheck(learn::GradcheckArgs),
}

fn version() -> &'static str {
    let s = format!("{} (model format {MODEL_FORMAT_VERSION})", env!("CARGO_PKG_VERSION"));
    Box::leak(s.into_boxed_str())
}

fn init_logging(v: Verbosity) {
    let level = match v {
        Verbosity::Quiet => log::LevelFilter::Error,
        Verbosity::Normal => log::LevelFilter::Info,
        Verbosity::Debug => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global()?;
    }
    let seed = cli.seed;
    match cli.command {
        Command::PairScan(a) => data::pair_scan(&a),
        Command::Register(a) => imaging::register(&a),
        Command::Denoise(a) => imaging::denoise(&a),
        Command::Crop(a) => data::crop(&a, seed.unwrap_or(0)),
        Command::Split(a) => data::split(&a, seed.unwrap_or(0)),
        Command::Augment(a) => data::augment(&a, seed.unwrap_or(0)),
        Command::TrainTranslator(a) => learn::train(&a, seed),
        Command::InferTranslator(a) => learn::infer(&a),
        Command::Eval(a) => report::eval(&a),
        Command::Gradcheck(a) => learn::gradcheck(&a, seed.unwrap_or(0)),
    }
}

fn main() -> ExitCode {
    let matches = Cli::command().version(version()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    init_logging(cli.verbosity);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
