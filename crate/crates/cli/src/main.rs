//! `mate` — train, evaluate, benchmark and self-check sum-memory agents.
//!
//! Subcommands:
//! - `train`: run the collect/update loop described by a TOML config and
//!   persist metrics, evaluations and checkpoints in a fresh run directory.
//! - `eval`: roll out a trained checkpoint greedily (or a scripted maze
//!   policy) and report the return statistics.
//! - `bench`: time rollout and update phases across sequence lengths and fit
//!   the log-log scaling exponents per architecture.
//! - `check`: run a deterministic property suite and write `report.txt`.
//!
//! Exit codes: 0 success, 1 configuration/usage error, 2 runtime failure,
//! 3 check-suite failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mate_core::bench::{run_grid, write_bench_csv, write_scaling_csv};
use mate_core::checkpoint::Container;
use mate_core::checks;
use mate_core::config::{self, Algo, RunConfig};
use mate_core::envs::tmaze::{run_script, TMaze, TMazeScript, TMazeSpec, TMazeVariant};
use mate_core::envs::EnvName;
use mate_core::error::{CoreError, Result};
use mate_core::metrics::{fmt_f64, summarize, CsvWriter, Summary};
use mate_core::nn::Workers;
use mate_core::rl::dqn::DqnAgent;
use mate_core::rl::sac::SacAgent;
use mate_core::rl::trainer;
use mate_core::rundir::{self, RunDir};
use mate_core::seeding::{sub_seed_indexed, SeedStream};

/// Schema stamp for the one-row summary written by `eval`.
const SUMMARY_SCHEMA: &str = "mate-eval-summary v1";
const SUMMARY_COLUMNS: &[&str] = &["episodes", "mean_return", "std_return", "min_return", "max_return"];

#[derive(Parser)]
#[command(name = "mate", version, about = "Sum-memory agents: training, evaluation, scaling benchmarks and self-checks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train an agent and persist metrics and checkpoints in a run directory
    Train(TrainArgs),
    /// Evaluate a checkpoint (or a scripted maze policy) with a greedy policy
    Eval(EvalArgs),
    /// Time rollout/update phases across sequence lengths and fit exponents
    Bench(BenchArgs),
    /// Run a property suite and write report.txt (exit 3 on failures)
    Check(CheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration
    #[arg(long)]
    config: PathBuf,
    /// Override one config key, e.g. --set train.episodes=500 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads for batched linear algebra (1 = bit-deterministic)
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file; its run directory must hold config.resolved
    #[arg(long, required_unless_present = "script", conflicts_with = "script")]
    checkpoint: Option<PathBuf>,
    /// Scripted maze policy instead of a checkpoint: oracle | false-cue | stay
    #[arg(long)]
    script: Option<String>,
    /// Maze flavor for --script: tmaze_passive | tmaze_active
    #[arg(long, default_value = "tmaze_passive")]
    env: String,
    /// Corridor length for --script
    #[arg(long, default_value_t = 10)]
    corridor: usize,
    /// Number of evaluation episodes
    #[arg(long)]
    episodes: usize,
    /// Master seed for the evaluation episode streams
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads for batched linear algebra
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Summary CSV path (default: `<checkpoint>.eval.csv`, or
    /// `mate-eval.csv` in the current directory for --script)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// TOML run configuration (the [bench] section drives the grid)
    #[arg(long)]
    config: PathBuf,
    /// Override one config key, e.g. --set bench.repeats=9 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker count for the parallel-update comparison rows (1 disables)
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct CheckArgs {
    /// Suite: invariance | oracle | recovery | injectivity | gradients | all
    #[arg(long, default_value = "all")]
    suite: String,
    /// Run-directory label (default: check-<suite>-<unix time>)
    #[arg(long)]
    label: Option<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0u8,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Bench(args) => cmd_bench(args),
        Cmd::Check(args) => cmd_check(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Load, override, and resolve a config file.
fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    config::load_file(path, overrides)?.resolve()
}

/// Stage a fresh run directory, persist the resolved config, and commit.
fn open_run(cfg: &RunConfig) -> Result<RunDir> {
    let root = rundir::run_root();
    let staged = rundir::stage(&root, cfg.label()?)?;
    std::fs::write(staged.file(rundir::CONFIG_FILE), cfg.to_toml()?)?;
    staged.commit()
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let workers = Workers::new(args.workers)?;
    let cfg = load_config(&args.config, &args.set)?;
    let run = open_run(&cfg)?;
    println!("run directory: {}", run.path().display());
    let outcome = trainer::train(&cfg, &run, &workers)?;
    println!("episodes: {}", outcome.episodes);
    if let Some(best) = outcome.best_eval {
        println!("best eval mean return: {}", fmt_f64(best.mean));
    }
    if outcome.stopped_early {
        println!("stopped early: evaluation target reached");
    }
    println!("final checkpoint: {}", outcome.final_checkpoint.display());
    Ok(())
}

fn print_and_write_summary(s: &Summary, episodes: usize, out: &Path) -> Result<()> {
    println!("episodes: {episodes}");
    println!("mean_return: {}", fmt_f64(s.mean));
    println!("std_return: {}", fmt_f64(s.std));
    println!("min_return: {}", fmt_f64(s.min));
    println!("max_return: {}", fmt_f64(s.max));
    let mut w = CsvWriter::create(out, SUMMARY_SCHEMA, SUMMARY_COLUMNS)?;
    w.row(&[
        episodes.to_string(),
        fmt_f64(s.mean),
        fmt_f64(s.std),
        fmt_f64(s.min),
        fmt_f64(s.max),
    ])?;
    println!("summary: {}", out.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    if let Some(script) = &args.script {
        return eval_script(args, script);
    }
    let ckpt = args.checkpoint.as_ref().expect("clap enforces --checkpoint");
    eval_checkpoint(args, ckpt)
}

/// `config.resolved` lives either next to the checkpoint or one level up
/// (checkpoints are normally under `<run>/checkpoints/`).
fn config_beside(ckpt: &Path) -> Result<PathBuf> {
    let mut candidates = Vec::new();
    if let Some(dir) = ckpt.parent() {
        candidates.push(dir.join(rundir::CONFIG_FILE));
        if let Some(up) = dir.parent() {
            candidates.push(up.join(rundir::CONFIG_FILE));
        }
    }
    candidates
        .iter()
        .find(|p| p.is_file())
        .cloned()
        .ok_or_else(|| {
            CoreError::Config(format!(
                "no {} found near checkpoint {}",
                rundir::CONFIG_FILE,
                ckpt.display()
            ))
        })
}

fn eval_checkpoint(args: &EvalArgs, ckpt: &Path) -> Result<()> {
    let workers = Workers::new(args.workers)?;
    let cfg = load_config(&config_beside(ckpt)?, &[])?;
    let mut env = cfg.build_env()?;
    let container = Container::load(ckpt)?;
    let summary = match cfg.algo()? {
        Algo::Ddqn => {
            let n = match env.action_spec() {
                mate_core::envs::ActionSpec::Discrete { n } => n,
                _ => {
                    return Err(CoreError::Config(format!(
                        "env `{}` is not discrete but the config algorithm is ddqn",
                        env.name()
                    )))
                }
            };
            let mut agent = DqnAgent::new(env.obs_dim(), n, &cfg.dqn_agent_config()?, cfg.seed)?;
            container.apply_to_params(&mut agent.params)?;
            trainer::evaluate_greedy(env.as_mut(), args.seed, args.episodes, |env, s| {
                agent.collect_greedy(env, s, &workers)
            })?
        }
        Algo::Sac => {
            let spec = env.action_spec();
            let mut agent = SacAgent::new(env.obs_dim(), &spec, &cfg.sac_agent_config()?, cfg.seed)?;
            container.apply_to_params(&mut agent.params)?;
            trainer::evaluate_greedy(env.as_mut(), args.seed, args.episodes, |env, s| {
                agent.collect_greedy(env, s, &workers)
            })?
        }
    };
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| ckpt.with_extension("ckpt.eval.csv"));
    print_and_write_summary(&summary, args.episodes, &out)
}

fn eval_script(args: &EvalArgs, script: &str) -> Result<()> {
    let script = match script {
        "oracle" => TMazeScript::Oracle,
        "false-cue" => TMazeScript::FalseCue,
        "stay" => TMazeScript::Stay,
        other => {
            return Err(CoreError::Usage(format!(
                "--script must be oracle, false-cue or stay, got `{other}`"
            )))
        }
    };
    let variant = match EnvName::parse(&args.env)? {
        EnvName::TMazePassive => TMazeVariant::Passive,
        EnvName::TMazeActive => TMazeVariant::Active,
        _ => {
            return Err(CoreError::Usage(format!(
                "--script drives the maze environments only, got --env {}",
                args.env
            )))
        }
    };
    if args.episodes == 0 {
        return Err(CoreError::Usage("evaluation needs at least one episode".into()));
    }
    let mut maze = TMaze::new(TMazeSpec::from_corridor(variant, args.corridor)?);
    let returns: Vec<f64> = (0..args.episodes)
        .map(|k| {
            let seed = sub_seed_indexed(args.seed, SeedStream::Eval, k as u64);
            Ok(run_script(&mut maze, script, seed)?.total_return())
        })
        .collect::<Result<_>>()?;
    let summary = summarize(&returns)?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("mate-eval.csv"));
    print_and_write_summary(&summary, args.episodes, &out)
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let cfg = load_config(&args.config, &args.set)?;
    let grid = cfg.bench_grid(args.workers)?;
    let (samples, reports) = run_grid(&grid)?;
    let run = open_run(&cfg)?;
    write_bench_csv(&samples, &run.file(rundir::BENCH_FILE))?;
    write_scaling_csv(&reports, &run.file(rundir::SCALING_FILE))?;
    let mut text = String::from("== scaling verdicts ==\n");
    for r in &reports {
        text.push_str(&format!(
            "{}/{}: slope {:.3}, r2 {:.4} -> {}\n",
            r.arch, r.phase, r.slope, r.r2, r.verdict
        ));
    }
    let skipped = samples.iter().filter(|s| s.repeats == 0).count();
    if skipped > 0 {
        text.push_str(&format!("warning rows (points skipped for memory budget): {skipped}\n"));
    }
    std::fs::write(run.file(rundir::REPORT_FILE), &text)?;
    print!("{text}");
    println!("run directory: {}", run.path().display());
    Ok(())
}

fn cmd_check(args: &CheckArgs) -> Result<()> {
    let reports = checks::run_suites(&args.suite)?;
    let text = checks::render(&reports);
    print!("{text}");
    let label = args.label.clone().unwrap_or_else(|| {
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        format!("check-{}-{now}", args.suite)
    });
    let staged = rundir::stage(&rundir::run_root(), &label)?;
    std::fs::write(staged.file(rundir::REPORT_FILE), &text)?;
    let run = staged.commit()?;
    println!("report: {}", run.file(rundir::REPORT_FILE).display());
    let failed = reports
        .iter()
        .flat_map(|r| &r.lines)
        .filter(|l| !l.passed)
        .count();
    if failed > 0 {
        return Err(CoreError::CheckFailed(format!("{failed} properties failed")));
    }
    Ok(())
}
