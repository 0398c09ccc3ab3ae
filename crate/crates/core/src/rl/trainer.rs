//! Episode-loop drivers that tie agents, replay and metrics together.
//!
//! One driver handles both algorithms: collect an episode with the
//! behavioural policy, push it into replay, run the configured number of
//! gradient updates on sampled whole-episode batches, emit one flushed
//! metrics row, and honour the evaluation / checkpoint / early-stop cadences.
//! Wall-clock timings go to `timing.csv` so `metrics.csv` stays byte-identical
//! across repeated runs of the same config and seed.

use std::path::PathBuf;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use crate::config::{Algo, RunConfig};
use crate::envs::{Environment, EpisodeRecord};
use crate::error::{CoreError, Result};
use crate::metrics::{
    fmt_f64, summarize, CsvWriter, Summary, DDQN_COLUMNS, EVAL_COLUMNS, METRICS_SCHEMA,
    SAC_COLUMNS, TIMING_COLUMNS, TIMING_SCHEMA,
};
use crate::metrics::EVAL_SCHEMA;
use crate::nn::{AdamState, ParamSet, Workers};
use crate::rl::dqn::{ddqn_update, DqnAgent};
use crate::rl::sac::{sac_update, SacAgent};
use crate::rl::{epsilon_schedule, ReplayBuffer, Rollout, TrainConfig};
use crate::rundir::{RunDir, EVAL_FILE, FINAL_CHECKPOINT, METRICS_FILE, TIMING_FILE};
use crate::seeding::{rng_for, sub_seed_indexed, SeedStream};
use crate::{checkpoint, envs::ActionSpec};

/// What a finished (or early-stopped) training run reports back.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Episodes actually collected.
    pub episodes: usize,
    /// Best periodic-evaluation summary seen, if any evaluation ran.
    pub best_eval: Option<Summary>,
    /// True when `stop_at_return` ended the run before `total_episodes`.
    pub stopped_early: bool,
    /// Path of the final checkpoint.
    pub final_checkpoint: PathBuf,
}

/// Behaviour that differs between the two trainers.
trait Driver {
    fn collect(&mut self, env: &mut dyn Environment, idx: usize, workers: &Workers)
        -> Result<Rollout>;
    /// One gradient update; returns the loss fields for the metrics row.
    fn update(&mut self, episodes: &[EpisodeRecord], workers: &Workers) -> Result<Vec<f64>>;
    fn greedy(&self, env: &mut dyn Environment, seed: u64, workers: &Workers) -> Result<Rollout>;
    fn params(&self) -> &ParamSet;
    fn columns(&self) -> &'static [&'static str];
    /// Full metrics row for one episode; `losses` is empty when no update ran.
    fn metric_fields(&self, idx: usize, ret: f64, losses: &[f64]) -> Vec<String>;
}

struct DdqnDriver {
    agent: DqnAgent,
    adam: AdamState,
    spec: ActionSpec,
    train: TrainConfig,
    master_seed: u64,
    horizon: usize,
}

impl Driver for DdqnDriver {
    fn collect(
        &mut self,
        env: &mut dyn Environment,
        idx: usize,
        workers: &Workers,
    ) -> Result<Rollout> {
        self.agent
            .collect_episode(env, self.master_seed, idx, self.train.total_episodes, workers)
    }

    fn update(&mut self, episodes: &[EpisodeRecord], workers: &Workers) -> Result<Vec<f64>> {
        let loss = ddqn_update(
            &mut self.agent,
            episodes,
            &self.spec,
            &self.train,
            &mut self.adam,
            workers,
        )?;
        Ok(vec![loss])
    }

    fn greedy(&self, env: &mut dyn Environment, seed: u64, workers: &Workers) -> Result<Rollout> {
        self.agent.collect_greedy(env, seed, workers)
    }

    fn params(&self) -> &ParamSet {
        &self.agent.params
    }

    fn columns(&self) -> &'static [&'static str] {
        DDQN_COLUMNS
    }

    fn metric_fields(&self, idx: usize, ret: f64, losses: &[f64]) -> Vec<String> {
        let eps = epsilon_schedule(idx, self.train.total_episodes, self.horizon);
        vec![
            idx.to_string(),
            fmt_f64(ret),
            losses.first().map(|&l| fmt_f64(l)).unwrap_or_default(),
            fmt_f64(eps),
        ]
    }
}

struct SacDriver {
    agent: SacAgent,
    adam_critic: AdamState,
    adam_actor: AdamState,
    update_rng: ChaCha8Rng,
    spec: ActionSpec,
    train: TrainConfig,
    master_seed: u64,
}

impl Driver for SacDriver {
    fn collect(
        &mut self,
        env: &mut dyn Environment,
        idx: usize,
        workers: &Workers,
    ) -> Result<Rollout> {
        self.agent.collect_episode(env, self.master_seed, idx, workers)
    }

    fn update(&mut self, episodes: &[EpisodeRecord], workers: &Workers) -> Result<Vec<f64>> {
        let (critic, actor) = sac_update(
            &mut self.agent,
            episodes,
            &self.spec,
            &self.train,
            &mut self.adam_critic,
            &mut self.adam_actor,
            &mut self.update_rng,
            workers,
        )?;
        Ok(vec![critic, actor])
    }

    fn greedy(&self, env: &mut dyn Environment, seed: u64, workers: &Workers) -> Result<Rollout> {
        self.agent.collect_greedy(env, seed, workers)
    }

    fn params(&self) -> &ParamSet {
        &self.agent.params
    }

    fn columns(&self) -> &'static [&'static str] {
        SAC_COLUMNS
    }

    fn metric_fields(&self, idx: usize, ret: f64, losses: &[f64]) -> Vec<String> {
        vec![
            idx.to_string(),
            fmt_f64(ret),
            losses.first().map(|&l| fmt_f64(l)).unwrap_or_default(),
            losses.get(1).map(|&l| fmt_f64(l)).unwrap_or_default(),
        ]
    }
}

/// Run a full training loop for a resolved config inside a committed run
/// directory. Writes `metrics.csv`, `timing.csv`, `eval.csv` and checkpoints.
pub fn train(cfg: &RunConfig, run: &RunDir, workers: &Workers) -> Result<TrainOutcome> {
    let train_cfg = cfg.train_config()?;
    train_cfg.validate()?;
    let mut env = cfg.build_env()?;
    let spec = env.action_spec();
    let master = cfg.seed;

    let mut driver: Box<dyn Driver> = match cfg.algo()? {
        Algo::Ddqn => {
            let n = match spec {
                ActionSpec::Discrete { n } => n,
                ActionSpec::Continuous { .. } => {
                    return Err(CoreError::Config(format!(
                        "ddqn cannot drive continuous-action env `{}`",
                        env.name()
                    )))
                }
            };
            let agent = DqnAgent::new(env.obs_dim(), n, &cfg.dqn_agent_config()?, master)?;
            let adam = AdamState::new(&agent.params);
            Box::new(DdqnDriver {
                agent,
                adam,
                spec,
                train: train_cfg.clone(),
                master_seed: master,
                horizon: env.horizon(),
            })
        }
        Algo::Sac => {
            let agent = SacAgent::new(env.obs_dim(), &spec, &cfg.sac_agent_config()?, master)?;
            let adam_critic = AdamState::new(&agent.params);
            let adam_actor = AdamState::new(&agent.params);
            Box::new(SacDriver {
                agent,
                adam_critic,
                adam_actor,
                update_rng: rng_for(master, SeedStream::Sampling),
                spec,
                train: train_cfg.clone(),
                master_seed: master,
            })
        }
    };

    let mut metrics = CsvWriter::create(run.file(METRICS_FILE), METRICS_SCHEMA, driver.columns())?;
    let mut timing = CsvWriter::create(run.file(TIMING_FILE), TIMING_SCHEMA, TIMING_COLUMNS)?;
    let mut evals = CsvWriter::create(run.file(EVAL_FILE), EVAL_SCHEMA, EVAL_COLUMNS)?;

    let mut replay = ReplayBuffer::new(train_cfg.buffer_transitions)?;
    let mut sample_rng = rng_for(master, SeedStream::Sampling);
    let mut best_eval: Option<Summary> = None;
    let mut stopped_early = false;
    let mut episodes_run = 0usize;

    for idx in 0..train_cfg.total_episodes {
        let started = Instant::now();
        let rollout = driver.collect(env.as_mut(), idx, workers)?;
        let ret = rollout.episode.total_return();
        replay.push(rollout.episode)?;

        let mut loss_acc: Vec<f64> = Vec::new();
        let mut updates = 0usize;
        for _ in 0..train_cfg.updates_per_episode {
            let batch = replay.sample(
                train_cfg.batch_episodes,
                train_cfg.max_batch_transitions,
                &mut sample_rng,
            )?;
            let losses = driver.update(&batch, workers).map_err(|e| {
                let _ = write_diagnostic(run, idx, &e);
                e
            })?;
            if loss_acc.is_empty() {
                loss_acc = losses;
            } else {
                for (a, l) in loss_acc.iter_mut().zip(&losses) {
                    *a += l;
                }
            }
            updates += 1;
        }
        if updates > 1 {
            for a in &mut loss_acc {
                *a /= updates as f64;
            }
        }

        metrics.row(&driver.metric_fields(idx, ret, &loss_acc))?;
        episodes_run = idx + 1;

        let due = |every: usize| every > 0 && (idx + 1) % every == 0;
        if due(train_cfg.eval_every) {
            let summary = evaluate(
                driver.as_ref(),
                env.as_mut(),
                master,
                idx,
                train_cfg.eval_episodes,
                workers,
            )?;
            evals.row(&[
                idx.to_string(),
                fmt_f64(summary.mean),
                fmt_f64(summary.std),
                fmt_f64(summary.min),
                fmt_f64(summary.max),
            ])?;
            if best_eval.map_or(true, |b| summary.mean > b.mean) {
                best_eval = Some(summary);
            }
            if let Some(target) = train_cfg.stop_at_return {
                if summary.mean >= target {
                    stopped_early = true;
                }
            }
        }
        if due(train_cfg.ckpt_every) {
            checkpoint::Container::from_params(driver.params())
                .save(run.checkpoint(&format!("ep{}.ckpt", idx + 1)))?;
        }

        timing.row(&[
            idx.to_string(),
            fmt_f64(started.elapsed().as_secs_f64() * 1e3),
        ])?;

        if stopped_early {
            break;
        }
    }

    let final_checkpoint = run.checkpoint(FINAL_CHECKPOINT);
    checkpoint::Container::from_params(driver.params()).save(&final_checkpoint)?;

    Ok(TrainOutcome {
        episodes: episodes_run,
        best_eval,
        stopped_early,
        final_checkpoint,
    })
}

fn evaluate(
    driver: &dyn Driver,
    env: &mut dyn Environment,
    master: u64,
    idx: usize,
    episodes: usize,
    workers: &Workers,
) -> Result<Summary> {
    let mut returns = Vec::with_capacity(episodes);
    for k in 0..episodes {
        let seed = sub_seed_indexed(
            master,
            SeedStream::Eval,
            (idx as u64) * (episodes as u64) + k as u64,
        );
        let rollout = driver.greedy(env, seed, workers)?;
        returns.push(rollout.episode.total_return());
    }
    summarize(&returns)
}

/// Evaluate a standalone agent checkpoint-style: greedy episodes with the
/// evaluation seed stream. Shared by the CLI `eval` subcommand.
pub fn evaluate_greedy<F>(
    env: &mut dyn Environment,
    master_seed: u64,
    episodes: usize,
    mut greedy: F,
) -> Result<Summary>
where
    F: FnMut(&mut dyn Environment, u64) -> Result<Rollout>,
{
    if episodes == 0 {
        return Err(CoreError::Usage(
            "evaluation needs at least 1 episode".into(),
        ));
    }
    let mut returns = Vec::with_capacity(episodes);
    for k in 0..episodes {
        let seed = sub_seed_indexed(master_seed, SeedStream::Eval, k as u64);
        let rollout = greedy(env, seed)?;
        returns.push(rollout.episode.total_return());
    }
    summarize(&returns)
}

fn write_diagnostic(run: &RunDir, episode: usize, err: &CoreError) -> Result<()> {
    let path = run.file("diagnostic.txt");
    std::fs::write(
        &path,
        format!(
            "training aborted at episode {episode}\nerror: {err}\n\
             The parameters were non-finite or produced a non-finite loss; \
             inspect the latest checkpoint and metrics.csv tail.\n"
        ),
    )?;
    Ok(())
}
