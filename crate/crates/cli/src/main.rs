//! `seglrp` command-line interface.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 degenerate data
//! (empty or degenerate region, class not predicted, sign-degenerate map),
//! 4 conservation audit failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use seglrp::PropagationRule;

mod commands;

#[derive(Debug, Parser)]
#[command(
    name = "seglrp",
    version,
    about = "Relevance propagation for segmentation networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Voxel-wise classification; writes labels.tnsr and logits.tnsr.
    Segment(SegmentArgs),
    /// Aggregated relevance map for one class over a region.
    Explain(ExplainArgs),
    /// Per-input-channel importance from balanced background/tumor regions.
    ChannelImportance(ImportanceArgs),
    /// Writes a seeded toy U-Net and a synthetic six-channel volume.
    GenToy(GenToyArgs),
    /// Audits relevance conservation for random output seeds.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Worker threads for per-location explanations (0 = all cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SegmentArgs {
    /// Model manifest.
    #[arg(long)]
    model: PathBuf,
    /// Input volume (TNSR).
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "epsilon:1e-6", value_parser = parse_rule)]
    rule: PropagationRule,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = seglrp::explain::DEFAULT_MAX_LOCATIONS,
          value_parser = clap::builder::RangedU64ValueParser::<usize>::new().range(1..))]
    max_locations: usize,
    /// Label map (TNSR) used instead of the predicted segmentation.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Class whose region is explained.
    #[arg(long = "class", default_value_t = 1)]
    class: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct ImportanceArgs {
    #[arg(long)]
    model: PathBuf,
    /// Input volume(s); repeat for a distribution over several volumes.
    #[arg(long, required = true)]
    input: Vec<PathBuf>,
    #[arg(long, default_value = "epsilon:1e-6", value_parser = parse_rule)]
    rule: PropagationRule,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = seglrp::explain::DEFAULT_MAX_LOCATIONS,
          value_parser = clap::builder::RangedU64ValueParser::<usize>::new().range(1..))]
    max_locations: usize,
    /// Label map (TNSR) used instead of the predicted segmentation.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Tumor class index.
    #[arg(long = "class", default_value_t = 1)]
    class: usize,
    /// Comma-separated channel names.
    #[arg(long)]
    labels: Option<String>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct GenToyArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "epsilon:1e-6", value_parser = parse_rule)]
    rule: PropagationRule,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of random output neurons to audit.
    #[arg(long, default_value_t = 50,
          value_parser = clap::builder::RangedU64ValueParser::<usize>::new().range(1..))]
    n_seeds: usize,
    /// Maximum relative deviation; defaults to 1e-9 for epsilon:0 on
    /// bias-free models and 1e-3 otherwise.
    #[arg(long)]
    tol: Option<f64>,
    #[command(flatten)]
    common: Common,
}

fn parse_rule(s: &str) -> Result<PropagationRule, String> {
    s.parse().map_err(|e: seglrp::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
