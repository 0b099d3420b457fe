//! `slicewise`: analyze cases, rank candidate slices, run the agent loop,
//! generate question manifests and score answers.

mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "slicewise", version, about = "Volumetric evidence engine for 3D CT question answering")]
pub struct Cli {
    /// Flat key = value run configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for case-level and kernel parallelism.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Run every kernel sequentially.
    #[arg(long, global = true)]
    pub sequential: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Organ records and lesion analytics for one case, as JSON.
    Analyze(AnalyzeArgs),
    /// Rank candidate slices for a prompt embedding.
    Target(TargetArgs),
    /// Run the agent loop over a manifest.
    Agent(AgentArgs),
    /// Generate a balanced question manifest.
    Qagen(QagenArgs),
    /// Score answers against a manifest.
    Eval(EvalArgs),
    /// Write a synthetic chest cohort.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Case directory holding case.json.
    #[arg(long)]
    pub case: PathBuf,
    /// Comma-separated organ names; every labelled organ by default.
    #[arg(long, value_delimiter = ',')]
    pub organs: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TargetArgs {
    #[arg(long)]
    pub case: PathBuf,
    /// Prompt embedding tensor.
    #[arg(long)]
    pub embedding: Option<PathBuf>,
    /// Feature field tensor; the case's own when omitted.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long, default_value = "lung")]
    pub organ: String,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Memory JSON to append the candidates to (created from organ records if absent).
    #[arg(long)]
    pub memory: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AgentArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub cases_dir: Option<PathBuf>,
    /// Output directory for answers.jsonl and transcripts/.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// canned | oracle | random | http
    #[arg(long)]
    pub client: Option<String>,
    /// Reply fixture for the canned client.
    #[arg(long)]
    pub script: Option<PathBuf>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub t_max: Option<usize>,
    /// Only the first N manifest items.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Skip lesion targeting even when feature fields exist.
    #[arg(long)]
    pub no_targeting: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct QagenArgs {
    #[arg(long)]
    pub cases_dir: Option<PathBuf>,
    /// Manifest path (JSON lines).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Balance report path (JSON); defaults next to the manifest.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub rules: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub target: Option<usize>,
    #[arg(long)]
    pub cap: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// answers.jsonl from `agent`.
    #[arg(long)]
    pub answers: Option<PathBuf>,
    /// source | organ | type; repeatable or comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub group_by: Vec<String>,
    /// Machine-readable summary path.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Check that a seeded random client converges to the analytic baseline.
    #[arg(long)]
    pub assert_rand: bool,
    #[arg(long, default_value_t = 2000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0.03)]
    pub tolerance: f64,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 720)]
    pub cases: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Do not write feature fields.
    #[arg(long)]
    pub no_features: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
