//! `moe-oco`: run online mixture-of-experts experiments from the command line.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moe_oco::experiment::{compare_learners, run_experiment, ExperimentResult};
use moe_oco::simulation::{generate_scenario, Predictions, StepRecord};
use moe_oco::trace::{replay_trace, write_trace};
use moe_oco::Error;

use config::{LearnerArg, LossArg, RunConfig};

#[derive(Parser)]
#[command(name = "moe-oco", version, about = "Online aggregation of probabilistic trajectory predictors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one learner over a scenario or trace and write the result directory.
    Run(CommonArgs),
    /// Run SQUINT and EG on the same stream and report steps to the 0.9 threshold.
    Compare(CommonArgs),
    /// Check a JSONL trace and print its shape.
    ValidateTrace {
        /// Trace file.
        path: PathBuf,
    },
    /// Write a scenario's stream to a JSONL trace.
    Generate(CommonArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// Named preset (stationary-convex, stationary-nonconvex, nonstationary-convex,
    /// nonstationary-nonconvex, squint-vs-eg).
    #[arg(long)]
    preset: Option<String>,
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (a file path for `generate`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    learner: Option<LearnerArg>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    /// Discount factor in (0, 1].
    #[arg(long)]
    discount: Option<f64>,
    /// Softmin temperature.
    #[arg(long)]
    beta: Option<f64>,
    /// Softsort temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Top-k modes for the losses and metrics.
    #[arg(long)]
    topk: Option<usize>,
    /// Sliding window of the smoothed metrics.
    #[arg(long)]
    window: Option<usize>,
    /// Replay this JSONL trace instead of simulating.
    #[arg(long)]
    trace: Option<PathBuf>,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Trace(_) | Error::Io { .. } => 2,
        Error::Numerical { .. } | Error::NonFinite(_) => 3,
        _ => 1,
    }
}

type Stream = Box<dyn Iterator<Item = moe_oco::Result<StepRecord>>>;

fn open_stream(cfg: &RunConfig) -> moe_oco::Result<Stream> {
    match (&cfg.trace, &cfg.scenario) {
        (Some(path), _) => Ok(Box::new(replay_trace(path)?)),
        (None, Some(spec)) => Ok(Box::new(generate_scenario(spec)?)),
        (None, None) => unreachable!("resolved config has a stream"),
    }
}

fn write_result(result: &ExperimentResult, dir: &Path, cfg: &RunConfig) -> moe_oco::Result<()> {
    result.write_dir(dir, &cfg.to_json())?;
    log::info!("wrote {}", dir.display());
    Ok(())
}

fn cmd_run(args: &CommonArgs) -> moe_oco::Result<()> {
    let cfg = RunConfig::resolve(args)?;
    log::info!("running {:?} learner", cfg.experiment.learner.kind);
    let result = run_experiment(open_stream(&cfg)?, &cfg.experiment)?;
    let dir = cfg.out_dir();
    write_result(&result, &dir, &cfg)?;
    println!("steps: {}", result.steps());
    if let Some(best) = result.hindsight_best() {
        println!("hindsight best: {}", result.expert_ids[best]);
    }
    let last = result.alpha.last().expect("alpha has at least one row");
    println!("final alpha: {last:?}");
    println!("output: {}", dir.display());
    Ok(())
}

fn expert_count(cfg: &RunConfig) -> moe_oco::Result<Option<usize>> {
    if let Some(spec) = &cfg.scenario {
        return Ok(Some(spec.n_experts));
    }
    match open_stream(cfg)?.next() {
        Some(rec) => Ok(Some(rec?.predictions.len())),
        None => Ok(None),
    }
}

fn cmd_compare(args: &CommonArgs) -> moe_oco::Result<()> {
    let cfg = RunConfig::resolve(args)?;
    if let Some(n) = expert_count(&cfg)? {
        if n < 2 {
            return Err(Error::Config {
                field: "n_experts".into(),
                reason: "exponentiated gradient needs at least 2 experts".into(),
            });
        }
    }
    let (report, squint, eg) = compare_learners(|| open_stream(&cfg), &cfg.experiment)?;
    let dir = cfg.out_dir();
    write_result(&squint, &dir.join("squint"), &cfg)?;
    write_result(&eg, &dir.join("eg"), &cfg)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    let path = dir.join("compare.json");
    std::fs::write(&path, format!("{json}\n")).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let show = |s: Option<usize>| s.map_or("never".to_string(), |s| s.to_string());
    println!("best expert: {}", squint.expert_ids[report.best_expert]);
    println!("squint steps to {}: {}", report.threshold, show(report.squint_steps));
    println!("eg steps to {}: {}", report.threshold, show(report.eg_steps));
    match report.ratio {
        Some(r) => println!("ratio: {r:.3}"),
        None => println!("ratio: n/a"),
    }
    Ok(())
}

fn cmd_generate(args: &CommonArgs) -> moe_oco::Result<()> {
    let cfg = RunConfig::resolve(args)?;
    let Some(spec) = &cfg.scenario else {
        return Err(Error::Config {
            field: "trace".into(),
            reason: "generate needs a scenario, not a trace".into(),
        });
    };
    let path = cfg.out.clone().unwrap_or_else(|| PathBuf::from("trace.jsonl"));
    let n = write_trace(&path, generate_scenario(spec)?)?;
    println!("wrote {n} steps to {}", path.display());
    Ok(())
}

fn cmd_validate_trace(path: &Path) -> moe_oco::Result<()> {
    let mut reader = replay_trace(path)?;
    let mut steps = 0usize;
    let mut modes = 0usize;
    let mut samples = 0usize;
    for rec in reader.by_ref() {
        let rec = rec?;
        steps += 1;
        match &rec.predictions {
            Predictions::Gmm(p) => modes = p.iter().map(|e| e.mode_count()).fold(modes, usize::max),
            Predictions::Samples(s) => samples = s.iter().map(|e| e.len()).fold(samples, usize::max),
        }
    }
    let shape = reader.shape();
    let show = |v: usize| if v == 0 { "-".to_string() } else { v.to_string() };
    println!("steps: {steps}");
    println!("experts (N): {}", shape.map_or(0, |s| s.experts));
    println!("modes (L): {}", show(modes));
    println!("horizon (K): {}", shape.map_or(0, |s| s.horizon));
    println!("samples (M): {}", show(samples));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MOE_OCO_LOG", "error")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Generate(args) => cmd_generate(args),
        Command::ValidateTrace { path } => cmd_validate_trace(path),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
