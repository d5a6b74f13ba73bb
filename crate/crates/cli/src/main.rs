//! `triage`: run the budgeting pipeline, cross-check it against the oracles,
//! or generate synthetic scenarios.
//!
//! Exit codes: 0 success, 1 verification failure, 2 input error, 3 config
//! error, 4 internal inconsistency.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use triage_core::frame::ScoreWeights;
use triage_core::pipeline::{
    dump_intermediates, intermediates_dir, run_pipeline, CostProfile, KeyframeBudget, PipelineConfig, PipelineError,
};
use triage_core::scenario::Scenario;
use triage_core::synth::{generate, ScenarioSpec, SynthError};
use triage_core::token::{BudgetConfig, TokenBudget};
use triage_core::verify::{verify_random, verify_scenario};

const THREADS_ENV: &str = "TRIAGE_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "triage",
    version,
    about = "Hierarchical frame and token budgeting for video-language inputs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Select keyframes and tokens for a scenario and write a manifest.
    Run(RunArgs),
    /// Cross-check the engine against brute-force oracles.
    Verify(VerifyArgs),
    /// Generate a synthetic scenario directory from a spec file.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long, value_name = "DIR")]
    scenario: PathBuf,
    /// Manifest output path.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// JSON config file; flags take precedence over its values.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Token retention over the keyframes' tokens, in (0, 1].
    #[arg(long, conflicts_with = "tokens")]
    retention: Option<f64>,
    /// Absolute token budget.
    #[arg(long)]
    tokens: Option<usize>,
    /// Keyframe budget M.
    #[arg(long, conflicts_with = "frame_retention")]
    keyframes: Option<usize>,
    /// Keyframe budget as a fraction of candidate frames.
    #[arg(long)]
    frame_retention: Option<f64>,
    /// Temporal bucket count K.
    #[arg(long)]
    buckets: Option<usize>,
    /// Scene-change, motion and relevance weights.
    #[arg(long, value_name = "WC,WM,WR", value_parser = parse_weights)]
    weights: Option<[f32; 3]>,
    #[arg(long)]
    core_ratio: Option<f64>,
    /// Seed tokens per keyframe.
    #[arg(long)]
    seeds: Option<usize>,
    /// Diversity weight.
    #[arg(long)]
    lambda: Option<f32>,
    /// Also write intermediate tensors next to the manifest.
    #[arg(long)]
    dump_intermediates: bool,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, value_name = "DIR", conflicts_with_all = ["random", "seed"])]
    scenario: Option<PathBuf>,
    /// Number of random instances per check.
    #[arg(long, default_value_t = 1000)]
    random: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Seed tokens per frame in scenario mode.
    #[arg(long, default_value_t = BudgetConfig::DEFAULT_SEEDS)]
    seeds: usize,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_name = "FILE")]
    spec: PathBuf,
    /// Output directory; must not exist or be empty.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    retention: Option<f64>,
    tokens: Option<usize>,
    keyframes: Option<usize>,
    frame_retention: Option<f64>,
    buckets: Option<usize>,
    weights: Option<[f32; 3]>,
    core_ratio: Option<f64>,
    seeds: Option<usize>,
    lambda: Option<f32>,
    cost_profile: Option<CostProfile>,
}

fn parse_weights(s: &str) -> Result<[f32; 3], String> {
    let parts = s
        .split(',')
        .map(|p| p.trim().parse::<f32>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    <[f32; 3]>::try_from(parts).map_err(|p| format!("expected 3 comma-separated weights, got {}", p.len()))
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn config(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Self {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

fn load_config_file(path: &Path) -> Result<ConfigFile, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

/// Flags, then config file, then defaults.
fn resolve_config(args: &RunArgs, file: ConfigFile) -> Result<PipelineConfig, Failure> {
    let defaults = PipelineConfig::default();
    let tokens = match (args.tokens, args.retention, file.tokens, file.retention) {
        (Some(n), _, _, _) => TokenBudget::Tokens(n),
        (None, Some(r), _, _) => TokenBudget::Ratio(r),
        (None, None, Some(_), Some(_)) => {
            return Err(Failure::config("config file sets both tokens and retention"));
        }
        (None, None, Some(n), None) => TokenBudget::Tokens(n),
        (None, None, None, Some(r)) => TokenBudget::Ratio(r),
        (None, None, None, None) => defaults.tokens,
    };
    let keyframes = match (
        args.keyframes,
        args.frame_retention,
        file.keyframes,
        file.frame_retention,
    ) {
        (Some(m), _, _, _) => KeyframeBudget::Frames(m),
        (None, Some(r), _, _) => KeyframeBudget::Ratio(r),
        (None, None, Some(_), Some(_)) => {
            return Err(Failure::config("config file sets both keyframes and frame_retention"));
        }
        (None, None, Some(m), None) => KeyframeBudget::Frames(m),
        (None, None, None, Some(r)) => KeyframeBudget::Ratio(r),
        (None, None, None, None) => defaults.keyframes,
    };
    let weights = match args.weights.or(file.weights) {
        Some([c, m, r]) => ScoreWeights::new(c, m, r).map_err(|e| Failure::config(e.to_string()))?,
        None => defaults.weights,
    };
    let config = PipelineConfig {
        keyframes,
        buckets: args.buckets.or(file.buckets).unwrap_or(defaults.buckets),
        weights,
        tokens,
        core_ratio: args.core_ratio.or(file.core_ratio).unwrap_or(defaults.core_ratio),
        seeds_per_frame: args.seeds.or(file.seeds).unwrap_or(defaults.seeds_per_frame),
        lambda: args.lambda.or(file.lambda).unwrap_or(defaults.lambda),
        cost: file.cost_profile.unwrap_or(defaults.cost),
    };
    config.validate()?;
    Ok(config)
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let file = match &args.config {
        Some(path) => load_config_file(path)?,
        None => ConfigFile::default(),
    };
    let config = resolve_config(&args, file)?;
    let scenario = Scenario::load(&args.scenario).map_err(|e| Failure::input(e.to_string()))?;
    let outcome = run_pipeline(&scenario, &config)?;
    if args.dump_intermediates {
        dump_intermediates(&outcome, &intermediates_dir(&args.out))?;
    }
    outcome.manifest.write(&args.out)?;
    let cost = &outcome.manifest.cost;
    eprintln!(
        "kept {} of {} frames, {} of {} tokens (reduction {:.4})",
        outcome.keyframes.len(),
        scenario.candidate_frames(),
        cost.tokens_after,
        cost.tokens_before,
        cost.reduction_ratio
    );
    println!("{}", args.out.display());
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<bool, Failure> {
    let report = match &args.scenario {
        Some(dir) => {
            let scenario = Scenario::load(dir).map_err(|e| Failure::input(e.to_string()))?;
            verify_scenario(&scenario, args.seeds)
        }
        None => verify_random(args.random, args.seed),
    };
    print!("{}", report.render());
    Ok(report.all_passed())
}

fn cmd_synth(args: SynthArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&args.spec)
        .map_err(|e| Failure::input(format!("cannot read {}: {e}", args.spec.display())))?;
    let spec: ScenarioSpec =
        serde_json::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", args.spec.display())))?;
    if let Ok(mut entries) = fs::read_dir(&args.out) {
        if entries.next().is_some() {
            return Err(Failure::input(format!(
                "{} exists and is not empty",
                args.out.display()
            )));
        }
    }
    let scenario = generate(&spec).map_err(|e| match e {
        SynthError::Infeasible(_) => Failure::config(e.to_string()),
        SynthError::Scenario(_) => Failure::input(e.to_string()),
    })?;

    // Stage beside the target so a failed write never leaves a partial scenario.
    let io = |e: std::io::Error| Failure::input(format!("cannot write {}: {e}", args.out.display()));
    let parent = match args.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(io)?;
    let staging = tempfile::Builder::new()
        .prefix(".triage-synth")
        .tempdir_in(&parent)
        .map_err(io)?;
    scenario
        .save(staging.path())
        .map_err(|e| Failure::input(e.to_string()))?;
    if args.out.exists() {
        fs::remove_dir(&args.out).map_err(io)?;
    }
    fs::rename(staging.keep(), &args.out).map_err(io)?;
    println!("{}", args.out.display());
    Ok(())
}

fn configure_threads() -> Result<(), Failure> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Failure::config(format!("{THREADS_ENV}={v:?} is not a non-negative integer")))?,
        Err(_) => 0,
    };
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Failure::config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 3 } else { 0 });
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Run(args) => cmd_run(args).map(|()| true),
        Command::Verify(args) => cmd_verify(args),
        Command::Synth(args) => cmd_synth(args).map(|()| true),
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(f) => {
            eprintln!("triage: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
