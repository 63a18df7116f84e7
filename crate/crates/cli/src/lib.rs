//! Command-line front end for decoding, reranking, benchmarking and training.

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod bench;
pub mod decode;
pub mod files;
pub mod rerank;
pub mod train;

#[derive(Debug, Parser)]
#[command(name = "mbrdecode", version, about = "Beam search and minimum Bayes-risk decoding")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalOpts {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for sentence-level parallelism (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    /// Emit scores and progress details.
    #[arg(long, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decode source sentences with a toy model.
    Decode(decode::DecodeArgs),
    /// MBR-rerank a candidate file.
    Rerank(rerank::RerankArgs),
    /// Time rerankers on growing candidate lists.
    Bench(bench::BenchArgs),
    /// Train the discrepancy approximator.
    TrainApprox(train::TrainApproxArgs),
    /// Train the (alpha, beta) weight policy.
    TrainPolicy(train::TrainPolicyArgs),
    /// Estimate a toy model from a parallel corpus.
    EstimateModel(train::EstimateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DeltaKind {
    /// 1 - BLEU through the batch n-gram kernel.
    Exact,
    /// 1 - BLEU, pairwise with early stopping.
    ExactNaive,
    /// Trained approximator (needs --checkpoint).
    Approx,
}

/// Bad flag combination; exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        EXIT_USAGE
    } else {
        EXIT_DATA
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.jobs)
        .build()?;
    pool.install(|| match &cli.command {
        Command::Decode(a) => decode::run(a, &cli.global),
        Command::Rerank(a) => rerank::run(a, &cli.global),
        Command::Bench(a) => bench::run(a, &cli.global),
        Command::TrainApprox(a) => train::run_approx(a, &cli.global),
        Command::TrainPolicy(a) => train::run_policy(a, &cli.global),
        Command::EstimateModel(a) => train::run_estimate(a, &cli.global),
    })
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

/// Output destination: a file, or stdout when absent.
pub(crate) fn open_output(path: Option<&PathBuf>) -> anyhow::Result<Box<dyn std::io::Write>> {
    use anyhow::Context;
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(
            std::fs::File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(std::io::BufWriter::new(std::io::stdout())),
    })
}
