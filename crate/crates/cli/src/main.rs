//! `cardioprior` batch command line.
//!
//! Exit status: 0 on success, 1 on input or validation errors, 2 on internal
//! errors. Failures print one line to stderr naming the error kind.

mod cases;
mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::*;
use manifest::Recorder;

#[derive(Parser, Debug)]
#[command(name = "cardioprior", version, about = "Anatomical shape priors for whole-heart segmentation")]
struct Cli {
    /// Worker threads for per-case parallelism (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Reorient, resample and embed volumes into a fixed field of view.
    Prep(PrepArgs),
    /// Population shape statistics of a label set.
    Stats(StatsArgs),
    /// Procrustes-aligned heatmap atlas of a label set.
    Atlas(AtlasArgs),
    /// Synthetic heart phantoms.
    Phantom(PhantomArgs),
    /// Finite-difference check of a loss gradient.
    Gradcheck(GradcheckArgs),
    /// Train a per-voxel segmenter.
    Train(TrainArgs),
    /// Per-case overlap and surface-distance metrics.
    Eval(EvalArgs),
    /// Method comparison table over run directories.
    Report(ReportArgs),
}

#[derive(Debug)]
pub enum Failure {
    Core(cardioprior::Error),
    Usage(String),
    /// A check ran to completion and failed; its outputs are still written.
    Check { manifest: PathBuf, message: String },
}

impl From<cardioprior::Error> for Failure {
    fn from(e: cardioprior::Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn kind(&self) -> &'static str {
        match self {
            Failure::Core(e) => e.kind(),
            Failure::Usage(_) => "Usage",
            Failure::Check { .. } => "CheckFailed",
        }
    }

    fn code(&self) -> u8 {
        match self {
            Failure::Core(e) if e.is_internal() => 2,
            Failure::Core(_) | Failure::Usage(_) => 1,
            Failure::Check { .. } => 2,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Core(e) => e.to_string(),
            Failure::Usage(m) | Failure::Check { message: m, .. } => m.clone(),
        }
    }
}

fn diagnostic(kind: &str, message: &str) {
    let one_line = message.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("cardioprior: {kind}: {one_line}");
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    let mut rec = Recorder::default();
    macro_rules! run {
        ($name:literal, $f:ident, $args:expr) => {{
            let outcome = $f($args, &mut rec);
            let manifest = match &outcome {
                Ok(m) | Err(Failure::Check { manifest: m, .. }) => m.clone(),
                Err(_) => return outcome.map(|_| ()),
            };
            rec.write($name, $args, cli.jobs, &manifest)?;
            outcome.map(|_| ())
        }};
    }
    match &cli.command {
        Command::Prep(a) => run!("prep", prep, a),
        Command::Stats(a) => run!("stats", stats, a),
        Command::Atlas(a) => run!("atlas", atlas, a),
        Command::Phantom(a) => run!("phantom", phantom, a),
        Command::Gradcheck(a) => run!("gradcheck", gradcheck_cmd, a),
        Command::Train(a) => run!("train", train, a),
        Command::Eval(a) => run!("eval", eval, a),
        Command::Report(a) => run!("report", report, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            diagnostic("Usage", first.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };

    std::panic::set_hook(Box::new(|info| {
        let msg = info
            .payload()
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| info.payload().downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "panic".into());
        diagnostic("Internal", &msg);
    }));

    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.unwrap_or(0))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            diagnostic("Internal", &e.to_string());
            return ExitCode::from(2);
        }
    };
    if cli.jobs == Some(0) {
        diagnostic("Usage", "--jobs must be at least 1");
        return ExitCode::from(1);
    }

    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| pool.install(|| dispatch(&cli)))) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(f)) => {
            diagnostic(f.kind(), &f.message());
            ExitCode::from(f.code())
        }
        Err(_) => ExitCode::from(2),
    }
}
