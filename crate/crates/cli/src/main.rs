//! `mapfuse` command-line front end.
//!
//! Every failure prints exactly one `E_CODE: message` line on stderr and
//! exits with status 1 (2 for usage errors).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mapfuse_core::Error;

#[derive(Parser)]
#[command(name = "mapfuse", version, about = "Multi-session LiDAR map merging")]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Global {
    /// Pipeline config file (`key = value` lines).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    /// Output directory (a file for `synth-weights`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Weight bundle for the descriptor network.
    #[arg(long, global = true, value_name = "PATH")]
    pub weights: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Keypoints and descriptors for keyframe clouds (`.ply` files or directories of them).
    Extract { inputs: Vec<PathBuf> },

    /// Cross-session loop candidates from a directory of feature files.
    DetectLoops { features: PathBuf },

    /// SVD + GICP registration of loop candidates.
    Register {
        candidates: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        clouds: PathBuf,
    },

    /// Detect, register, verify and jointly optimize two or more sessions.
    Merge {
        #[arg(required = true)]
        graphs: Vec<PathBuf>,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        clouds: PathBuf,
        /// Registered closures to use instead of detecting and registering.
        #[arg(long)]
        closures: Option<PathBuf>,
        /// Skip scan-matching-cost factors.
        #[arg(long)]
        no_scan_factors: bool,
    },

    /// Synthetic multi-session scene with ground truth.
    Synth {
        /// two-loop, L-corridor or grid-town
        scenario: String,
        /// Zero odometry and point noise.
        #[arg(long)]
        noiseless: bool,
    },

    /// Score a merged graph (and optionally closures) against ground truth.
    Eval {
        merged: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        #[arg(long)]
        preliminary: Option<PathBuf>,
        #[arg(long)]
        closures: Option<PathBuf>,
    },

    /// Write a weight bundle for the configured architecture.
    SynthWeights {
        /// Hand-set geometric weights instead of seeded random ones.
        #[arg(long)]
        geometric: bool,
    },
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("{}: {}", e.code(), one_line(&e.to_string()));
    ExitCode::FAILURE
}

fn run(cli: Cli) -> mapfuse_core::Result<()> {
    commands::init_threads()?;
    let g = &cli.global;
    match cli.command {
        Command::Extract { inputs } => commands::extract(g, &inputs),
        Command::DetectLoops { features } => commands::detect_loops(g, &features),
        Command::Register { candidates, features, clouds } => commands::register(g, &candidates, &features, &clouds),
        Command::Merge { graphs, features, clouds, closures, no_scan_factors } => {
            commands::merge(g, &graphs, &features, &clouds, closures.as_deref(), !no_scan_factors)
        }
        Command::Synth { scenario, noiseless } => commands::synth(g, &scenario, noiseless),
        Command::Eval { merged, ground_truth, preliminary, closures } => {
            commands::eval(g, &merged, &ground_truth, preliminary.as_deref(), closures.as_deref())
        }
        Command::SynthWeights { geometric } => commands::synth_weights(g, geometric),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or_default();
            eprintln!("E_USAGE: {}", one_line(first.trim_start_matches("error:")));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
