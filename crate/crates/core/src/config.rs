//! Run configuration: TOML with sections, strict schema, explicit defaults.
//!
//! A configuration is parsed, optionally patched by `--set section.key=value`
//! overrides, then **resolved**: every optional key is filled with its
//! default, cross-field rules are validated, and the derived per-stream
//! sub-seeds are recorded. The resolved form is what gets persisted as
//! `config.resolved`, and resolving is idempotent — parsing a resolved file
//! and resolving again yields the identical configuration.
//!
//! Unknown keys anywhere are rejected, and every validation error names the
//! offending key.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::envs::tmaze::{TMazeSpec, TMazeVariant};
use crate::envs::{make_env, ActionSpec, EnvName, Environment};
use crate::error::{CoreError, Result};
use crate::memory::Arch;
use crate::rl::dqn::DqnAgentConfig;
use crate::rl::sac::SacAgentConfig;
use crate::rl::TrainConfig;
use crate::seeding::{sub_seed, SeedStream};

/// Which trainer drives the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algo {
    Ddqn,
    Sac,
}

impl Algo {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ddqn" => Ok(Algo::Ddqn),
            "sac" => Ok(Algo::Sac),
            other => Err(CoreError::Config(format!(
                "train.algo: unknown algorithm `{other}` (expected ddqn or sac)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Algo::Ddqn => "ddqn",
            Algo::Sac => "sac",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub env: EnvSection,
    #[serde(default)]
    pub memory: MemorySection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub bench: BenchSection,
    /// Derived sub-seeds, recorded for reproducibility; recomputed from
    /// `seed` on every resolve.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<SeedsSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    /// `tmaze_passive`, `tmaze_active`, `gauss_bandit`, or `point_dir`.
    pub name: String,
    /// Episode length `T`. Defaults: derived from `corridor_len` for mazes,
    /// 100 elsewhere.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    /// Maze corridor length `L`; only valid for `tmaze_*` (default 10).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corridor_len: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemorySection {
    /// `mate`, `rnn`, `attn`, or `none` (memoryless). Default `mate`.
    pub arch: Option<String>,
    /// Memory readout width `m`. Default 128.
    pub dim: Option<usize>,
    /// Observation-embedding width fed to the heads. Default = `dim`.
    pub state_dim: Option<usize>,
    /// Maximum transitions the encoder must absorb. Default = env horizon.
    pub horizon: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// `ddqn` or `sac`. Default: `ddqn` for discrete-action envs, `sac` for
    /// continuous ones.
    pub algo: Option<String>,
    pub gamma: Option<f64>,
    pub tau: Option<f64>,
    pub lr: Option<f64>,
    /// Episodes per sampled update batch.
    pub batch_size: Option<usize>,
    /// Replay capacity in transitions.
    pub buffer_size: Option<usize>,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: Option<f64>,
    pub freeze_critic: Option<bool>,
    pub alpha: Option<f64>,
    /// Two hidden-layer widths for every head network.
    pub hidden: Option<Vec<usize>>,
    pub total_episodes: Option<usize>,
    pub updates_per_episode: Option<usize>,
    /// Hard cap on transitions per sampled batch; caps the effective batch
    /// for long horizons.
    pub max_batch_transitions: Option<usize>,
    /// Greedy-evaluation cadence in episodes; 0 disables periodic evals.
    pub eval_every: Option<usize>,
    pub eval_episodes: Option<usize>,
    /// Checkpoint cadence in episodes; 0 keeps only the final checkpoint.
    pub ckpt_every: Option<usize>,
    /// Stop once an evaluation's mean return reaches this value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_at_return: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    /// Sequence lengths for the scaling grid.
    pub lengths: Option<Vec<usize>>,
    /// Timed repeats per point (after 2 warmup runs); at least 5.
    pub repeats: Option<usize>,
    /// Episodes per update-phase batch.
    pub batch: Option<usize>,
    /// Memory width used for benchmarking.
    pub dim: Option<usize>,
}

/// Hex-formatted sub-seeds derived from the master seed, one per stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsSection {
    pub env: String,
    pub init: String,
    pub exploration: String,
    pub sampling: String,
    pub bench: String,
    pub eval: String,
}

fn hex(v: u64) -> String {
    format!("{v:#018x}")
}

pub const DEFAULT_BENCH_LENGTHS: &[usize] = &[512, 1024, 2048, 4096, 8192];

/// Parse a TOML document and apply `--set` overrides, without resolving.
pub fn parse_str(text: &str, source: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut value: toml::Value = toml::from_str(text)
        .map_err(|e| CoreError::Config(format!("{source}: {e}")))?;
    for spec in overrides {
        apply_override(&mut value, spec)?;
    }
    value
        .try_into()
        .map_err(|e| CoreError::Config(format!("{source}: {e}")))
}

/// Load a config file and apply overrides.
pub fn load_file(path: impl AsRef<Path>, overrides: &[String]) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| {
        CoreError::Config(format!("cannot read config {}: {e}", path.display()))
    })?;
    parse_str(&text, &path.display().to_string(), overrides)
}

/// Apply one `section.key=value` override to a parsed TOML tree.
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| {
        CoreError::Usage(format!(
            "--set expects section.key=value, got `{spec}`"
        ))
    })?;
    let segments: Vec<&str> = path.trim().split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(CoreError::Usage(format!(
            "--set key path `{}` has an empty segment",
            path.trim()
        )));
    }
    let leaf = parse_override_value(raw.trim());
    let mut cur = root;
    for seg in &segments[..segments.len() - 1] {
        let table = cur.as_table_mut().ok_or_else(|| {
            CoreError::Config(format!("--set `{}`: `{seg}` is not a section", path.trim()))
        })?;
        cur = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = cur.as_table_mut().ok_or_else(|| {
        CoreError::Config(format!(
            "--set `{}`: parent of `{}` is not a section",
            path.trim(),
            segments[segments.len() - 1]
        ))
    })?;
    table.insert(segments[segments.len() - 1].to_string(), leaf);
    Ok(())
}

/// Interpret an override RHS as a TOML value; bare words become strings.
fn parse_override_value(raw: &str) -> toml::Value {
    if let Ok(toml::Value::Table(mut t)) = toml::from_str::<toml::Value>(&format!("v = {raw}")) {
        if let Some(v) = t.remove("v") {
            return v;
        }
    }
    toml::Value::String(raw.to_string())
}

impl RunConfig {
    /// Fill every default, validate every key, and record derived seeds.
    /// Idempotent: resolving a resolved config returns it unchanged.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = self.clone();

        if cfg.seed > i64::MAX as u64 {
            return Err(CoreError::Config(format!(
                "seed: {} exceeds the maximum representable value {}",
                cfg.seed,
                i64::MAX
            )));
        }

        // --- env ---
        let env_name = EnvName::parse(&cfg.env.name)
            .map_err(|e| CoreError::Config(format!("env.name: {e}")))?;
        let is_maze = matches!(env_name, EnvName::TMazePassive | EnvName::TMazeActive);
        if !is_maze && cfg.env.corridor_len.is_some() {
            return Err(CoreError::Config(format!(
                "env.corridor_len only applies to tmaze_* environments, not `{}`",
                cfg.env.name
            )));
        }
        let horizon = if is_maze {
            let variant = match env_name {
                EnvName::TMazePassive => TMazeVariant::Passive,
                _ => TMazeVariant::Active,
            };
            let spec = match (cfg.env.corridor_len, cfg.env.horizon) {
                (Some(l), maybe_h) => {
                    let spec = TMazeSpec::from_corridor(variant, l)
                        .map_err(|e| CoreError::Config(format!("env.corridor_len: {e}")))?;
                    if let Some(h) = maybe_h {
                        if h != spec.horizon {
                            return Err(CoreError::Config(format!(
                                "env.horizon = {h} inconsistent with env.corridor_len = {l} \
                                 (implies horizon {})",
                                spec.horizon
                            )));
                        }
                    }
                    spec
                }
                (None, Some(h)) => TMazeSpec::from_horizon(variant, h)
                    .map_err(|e| CoreError::Config(format!("env.horizon: {e}")))?,
                (None, None) => TMazeSpec::from_corridor(variant, 10)
                    .expect("default corridor is valid"),
            };
            cfg.env.corridor_len = Some(spec.corridor);
            spec.horizon
        } else {
            let h = cfg.env.horizon.unwrap_or(100);
            if h == 0 {
                return Err(CoreError::Config("env.horizon: must be at least 1".into()));
            }
            h
        };
        cfg.env.horizon = Some(horizon);

        // --- algorithm choice before train defaults ---
        let action_spec = make_env(env_name, horizon)?.action_spec();
        let algo = match cfg.train.algo.as_deref() {
            Some(s) => {
                let algo = Algo::parse(s)?;
                match (algo, &action_spec) {
                    (Algo::Ddqn, ActionSpec::Continuous { .. }) => {
                        return Err(CoreError::Config(format!(
                            "train.algo = `ddqn` incompatible with continuous-action env \
                             `{}` (use sac)",
                            cfg.env.name
                        )))
                    }
                    (Algo::Sac, ActionSpec::Discrete { .. }) => {
                        return Err(CoreError::Config(format!(
                            "train.algo = `sac` incompatible with discrete-action env \
                             `{}` (use ddqn)",
                            cfg.env.name
                        )))
                    }
                    _ => algo,
                }
            }
            None => match action_spec {
                ActionSpec::Discrete { .. } => Algo::Ddqn,
                ActionSpec::Continuous { .. } => Algo::Sac,
            },
        };
        cfg.train.algo = Some(algo.name().to_string());

        // --- memory ---
        let arch_str = cfg.memory.arch.clone().unwrap_or_else(|| "mate".into());
        let _arch = parse_arch(&arch_str)?;
        cfg.memory.arch = Some(arch_str);
        let dim = cfg.memory.dim.unwrap_or(128);
        if dim == 0 {
            return Err(CoreError::Config("memory.dim: must be at least 1".into()));
        }
        cfg.memory.dim = Some(dim);
        let state_dim = cfg.memory.state_dim.unwrap_or(dim);
        if state_dim == 0 {
            return Err(CoreError::Config("memory.state_dim: must be at least 1".into()));
        }
        cfg.memory.state_dim = Some(state_dim);
        let mem_horizon = cfg.memory.horizon.unwrap_or(horizon);
        if mem_horizon < horizon {
            return Err(CoreError::Config(format!(
                "memory.horizon = {mem_horizon} is shorter than the episode horizon {horizon}"
            )));
        }
        cfg.memory.horizon = Some(mem_horizon);

        // --- train ---
        let defaults = match algo {
            Algo::Ddqn => TrainConfig::ddqn_defaults(),
            Algo::Sac => TrainConfig::sac_defaults(),
        };
        let t = &mut cfg.train;
        let gamma = *t.gamma.get_or_insert(defaults.gamma);
        require(
            "train.gamma",
            gamma,
            gamma.is_finite() && gamma > 0.0 && gamma <= 1.0,
            "must be in (0, 1]",
        )?;
        let tau = *t.tau.get_or_insert(defaults.tau);
        require(
            "train.tau",
            tau,
            tau.is_finite() && tau > 0.0 && tau <= 1.0,
            "must be in (0, 1]",
        )?;
        let lr = *t.lr.get_or_insert(defaults.lr);
        require("train.lr", lr, lr.is_finite() && lr > 0.0, "must be positive")?;
        let clip = *t
            .grad_clip
            .get_or_insert(defaults.grad_clip.unwrap_or(0.0));
        require(
            "train.grad_clip",
            clip,
            clip.is_finite() && clip >= 0.0,
            "must be zero (off) or positive",
        )?;
        let alpha = *t.alpha.get_or_insert(defaults.alpha);
        require(
            "train.alpha",
            alpha,
            alpha.is_finite() && alpha >= 0.0,
            "must be non-negative",
        )?;
        if let Some(target) = t.stop_at_return {
            require(
                "train.stop_at_return",
                target,
                target.is_finite(),
                "must be finite",
            )?;
        }
        t.freeze_critic.get_or_insert(defaults.freeze_critic);
        let batch = *t.batch_size.get_or_insert(defaults.batch_episodes);
        require_usize("train.batch_size", batch, 1)?;
        let buffer = *t.buffer_size.get_or_insert(defaults.buffer_transitions);
        require_usize("train.buffer_size", buffer, 1)?;
        if buffer < horizon {
            return Err(CoreError::Config(format!(
                "train.buffer_size = {buffer} cannot hold one full episode (horizon {horizon})"
            )));
        }
        let hidden = t
            .hidden
            .get_or_insert_with(|| match algo {
                Algo::Ddqn => vec![256, 256],
                Algo::Sac => vec![512, 512],
            })
            .clone();
        if hidden.len() != 2 || hidden.iter().any(|&h| h == 0) {
            return Err(CoreError::Config(format!(
                "train.hidden: expected two positive layer widths, got {hidden:?}"
            )));
        }
        let total = *t.total_episodes.get_or_insert(defaults.total_episodes);
        require_usize("train.total_episodes", total, 1)?;
        t.updates_per_episode
            .get_or_insert(defaults.updates_per_episode);
        let cap = *t
            .max_batch_transitions
            .get_or_insert(defaults.max_batch_transitions);
        if cap < horizon {
            return Err(CoreError::Config(format!(
                "train.max_batch_transitions = {cap} is below the episode horizon {horizon}"
            )));
        }
        t.eval_every.get_or_insert(defaults.eval_every);
        let eval_eps = *t.eval_episodes.get_or_insert(defaults.eval_episodes);
        require_usize("train.eval_episodes", eval_eps, 1)?;
        t.ckpt_every.get_or_insert(defaults.ckpt_every);

        // --- bench ---
        let lengths = cfg
            .bench
            .lengths
            .get_or_insert_with(|| DEFAULT_BENCH_LENGTHS.to_vec());
        if lengths.is_empty() || lengths.iter().any(|&l| l < 2) {
            return Err(CoreError::Config(format!(
                "bench.lengths: every length must be at least 2, got {lengths:?}"
            )));
        }
        let repeats = *cfg.bench.repeats.get_or_insert(5);
        if repeats < 5 {
            return Err(CoreError::Config(format!(
                "bench.repeats = {repeats}: at least 5 timed repeats are required"
            )));
        }
        let bbatch = *cfg.bench.batch.get_or_insert(8);
        require_usize("bench.batch", bbatch, 1)?;
        let bdim = *cfg.bench.dim.get_or_insert(128);
        require_usize("bench.dim", bdim, 1)?;

        // --- label & seeds ---
        let label = cfg.label.get_or_insert_with(|| {
            format!(
                "{}-{}-{}-s{}",
                cfg.env.name,
                cfg.memory.arch.as_deref().expect("filled above"),
                algo.name(),
                cfg.seed
            )
        });
        if label.is_empty() {
            return Err(CoreError::Config("label: must not be empty".into()));
        }
        cfg.seeds = Some(SeedsSection {
            env: hex(sub_seed(cfg.seed, SeedStream::Env)),
            init: hex(sub_seed(cfg.seed, SeedStream::Init)),
            exploration: hex(sub_seed(cfg.seed, SeedStream::Exploration)),
            sampling: hex(sub_seed(cfg.seed, SeedStream::Sampling)),
            bench: hex(sub_seed(cfg.seed, SeedStream::Bench)),
            eval: hex(sub_seed(cfg.seed, SeedStream::Eval)),
        });
        Ok(cfg)
    }

    /// Serialize (typically the resolved form) to TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self)
            .map_err(|e| CoreError::Config(format!("serializing config: {e}")))
    }

    // --- typed accessors; all expect a resolved config ---

    pub fn env_name(&self) -> Result<EnvName> {
        EnvName::parse(&self.env.name)
    }

    pub fn horizon(&self) -> Result<usize> {
        self.env.horizon.ok_or_else(|| unresolved("env.horizon"))
    }

    pub fn algo(&self) -> Result<Algo> {
        Algo::parse(self.train.algo.as_deref().ok_or_else(|| unresolved("train.algo"))?)
    }

    /// `None` means memoryless.
    pub fn arch(&self) -> Result<Option<Arch>> {
        parse_arch(self.memory.arch.as_deref().ok_or_else(|| unresolved("memory.arch"))?)
    }

    pub fn label(&self) -> Result<&str> {
        self.label.as_deref().ok_or_else(|| unresolved("label"))
    }

    pub fn memory_dim(&self) -> Result<usize> {
        self.memory.dim.ok_or_else(|| unresolved("memory.dim"))
    }

    pub fn state_dim(&self) -> Result<usize> {
        self.memory.state_dim.ok_or_else(|| unresolved("memory.state_dim"))
    }

    pub fn memory_horizon(&self) -> Result<usize> {
        self.memory.horizon.ok_or_else(|| unresolved("memory.horizon"))
    }

    pub fn hidden(&self) -> Result<(usize, usize)> {
        let h = self.train.hidden.as_ref().ok_or_else(|| unresolved("train.hidden"))?;
        Ok((h[0], h[1]))
    }

    pub fn build_env(&self) -> Result<Box<dyn Environment>> {
        make_env(self.env_name()?, self.horizon()?)
    }

    /// Benchmark grid from the resolved `[bench]` section; `workers` is the
    /// CLI-level thread count for the parallel-update rows.
    pub fn bench_grid(&self, workers: usize) -> Result<crate::bench::BenchGrid> {
        Ok(crate::bench::BenchGrid {
            lengths: self.bench.lengths.clone().ok_or_else(|| unresolved("bench.lengths"))?,
            repeats: self.bench.repeats.ok_or_else(|| unresolved("bench.repeats"))?,
            batch: self.bench.batch.ok_or_else(|| unresolved("bench.batch"))?,
            dim: self.bench.dim.ok_or_else(|| unresolved("bench.dim"))?,
            workers,
            seed: self.seed,
        })
    }

    /// The trainer-facing hyperparameter bundle.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let need = |name: &str, v: Option<f64>| v.ok_or_else(|| unresolved(name));
        let need_u = |name: &str, v: Option<usize>| v.ok_or_else(|| unresolved(name));
        let clip = need("train.grad_clip", t.grad_clip)?;
        Ok(TrainConfig {
            gamma: need("train.gamma", t.gamma)?,
            tau: need("train.tau", t.tau)?,
            lr: need("train.lr", t.lr)?,
            batch_episodes: need_u("train.batch_size", t.batch_size)?,
            buffer_transitions: need_u("train.buffer_size", t.buffer_size)?,
            grad_clip: if clip > 0.0 { Some(clip) } else { None },
            freeze_critic: t
                .freeze_critic
                .ok_or_else(|| unresolved("train.freeze_critic"))?,
            alpha: need("train.alpha", t.alpha)?,
            total_episodes: need_u("train.total_episodes", t.total_episodes)?,
            updates_per_episode: need_u(
                "train.updates_per_episode",
                t.updates_per_episode,
            )?,
            max_batch_transitions: need_u(
                "train.max_batch_transitions",
                t.max_batch_transitions,
            )?,
            eval_every: need_u("train.eval_every", t.eval_every)?,
            eval_episodes: need_u("train.eval_episodes", t.eval_episodes)?,
            ckpt_every: need_u("train.ckpt_every", t.ckpt_every)?,
            stop_at_return: t.stop_at_return,
        })
    }

    pub fn dqn_agent_config(&self) -> Result<DqnAgentConfig> {
        let mut c = DqnAgentConfig::new(self.arch()?, self.memory_dim()?, self.memory_horizon()?);
        c.state_dim = self.state_dim()?;
        c.hidden = self.hidden()?;
        Ok(c)
    }

    pub fn sac_agent_config(&self) -> Result<SacAgentConfig> {
        let mut c = SacAgentConfig::new(self.arch()?, self.memory_dim()?, self.memory_horizon()?);
        c.state_dim = self.state_dim()?;
        c.hidden = self.hidden()?;
        Ok(c)
    }
}

fn unresolved(key: &str) -> CoreError {
    CoreError::Config(format!("internal: `{key}` read before resolve()"))
}

fn parse_arch(s: &str) -> Result<Option<Arch>> {
    match s {
        "mate" => Ok(Some(Arch::Mate)),
        "rnn" => Ok(Some(Arch::Rnn)),
        "attn" => Ok(Some(Arch::Attn)),
        "none" => Ok(None),
        other => Err(CoreError::Config(format!(
            "memory.arch: unknown architecture `{other}` (expected mate, rnn, attn, or none)"
        ))),
    }
}

fn require(key: &str, value: f64, ok: bool, rule: &str) -> Result<f64> {
    if ok {
        Ok(value)
    } else {
        Err(CoreError::Config(format!("{key} = {value}: {rule}")))
    }
}

fn require_usize(key: &str, value: usize, min: usize) -> Result<usize> {
    if value >= min {
        Ok(value)
    } else {
        Err(CoreError::Config(format!(
            "{key} = {value}: must be at least {min}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(text: &str, overrides: &[&str]) -> Result<RunConfig> {
        let ov: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        parse_str(text, "test", &ov)?.resolve()
    }

    #[test]
    fn minimal_maze_config_gets_full_defaults() {
        let cfg = resolve("[env]\nname = \"tmaze_passive\"\n", &[]).unwrap();
        assert_eq!(cfg.env.horizon, Some(11));
        assert_eq!(cfg.env.corridor_len, Some(10));
        assert_eq!(cfg.train.algo.as_deref(), Some("ddqn"));
        assert_eq!(cfg.train.lr, Some(3e-5));
        assert_eq!(cfg.train.batch_size, Some(64));
        assert_eq!(cfg.train.buffer_size, Some(10_000));
        assert_eq!(cfg.train.grad_clip, Some(0.03));
        assert_eq!(cfg.train.hidden.as_deref(), Some(&[256, 256][..]));
        assert_eq!(cfg.memory.arch.as_deref(), Some("mate"));
        assert_eq!(cfg.memory.dim, Some(128));
        assert_eq!(cfg.memory.state_dim, Some(128));
        assert_eq!(cfg.label.as_deref(), Some("tmaze_passive-mate-ddqn-s0"));
        assert!(cfg.seeds.is_some());
        let tc = cfg.train_config().unwrap();
        assert_eq!(tc.grad_clip, Some(0.03));
        assert_eq!(tc.batch_episodes, 64);
    }

    #[test]
    fn continuous_env_defaults_to_sac() {
        let cfg = resolve("[env]\nname = \"point_dir\"\n", &[]).unwrap();
        assert_eq!(cfg.train.algo.as_deref(), Some("sac"));
        assert_eq!(cfg.env.horizon, Some(100));
        assert_eq!(cfg.train.lr, Some(1e-4));
        assert_eq!(cfg.train.grad_clip, Some(0.0));
        assert_eq!(cfg.train.hidden.as_deref(), Some(&[512, 512][..]));
        assert_eq!(cfg.train.freeze_critic, Some(true));
        assert_eq!(cfg.train.alpha, Some(0.1));
        // grad_clip 0 means "off" for the trainer.
        assert_eq!(cfg.train_config().unwrap().grad_clip, None);
    }

    #[test]
    fn resolve_round_trips_identically() {
        for (env, extra) in [
            ("tmaze_active", vec!["seed=9", "train.stop_at_return=0.7"]),
            ("gauss_bandit", vec!["memory.arch=rnn", "env.horizon=50"]),
            ("point_dir", vec!["memory.arch=none", "train.freeze_critic=false"]),
        ] {
            let text = format!("[env]\nname = \"{env}\"\n");
            let resolved = resolve(&text, &extra).unwrap();
            let serialized = resolved.to_toml().unwrap();
            let reparsed = parse_str(&serialized, "round-trip", &[]).unwrap();
            let re_resolved = reparsed.resolve().unwrap();
            assert_eq!(re_resolved, resolved, "env {env}");
            assert_eq!(reparsed, resolved, "resolve() changed a resolved config ({env})");
        }
    }

    #[test]
    fn incompatible_algo_env_pairs_are_rejected() {
        let err = resolve(
            "[env]\nname = \"tmaze_passive\"\n[train]\nalgo = \"sac\"\n",
            &[],
        )
        .unwrap_err();
        assert!(err.to_string().contains("train.algo"), "err was: {err}");
        assert!(err.to_string().contains("tmaze_passive"), "err was: {err}");

        let err = resolve("[env]\nname = \"point_dir\"\n[train]\nalgo = \"ddqn\"\n", &[])
            .unwrap_err();
        assert!(err.to_string().contains("ddqn"), "err was: {err}");
    }

    #[test]
    fn unknown_keys_are_rejected_with_names() {
        let err = resolve("[env]\nname = \"point_dir\"\nwhatever = 3\n", &[]).unwrap_err();
        assert!(err.to_string().contains("whatever"), "err was: {err}");
        let err = resolve("[env]\nname = \"point_dir\"\n[extra]\nx = 1\n", &[]).unwrap_err();
        assert!(err.to_string().contains("extra"), "err was: {err}");
        let err = resolve("[env]\nname = \"point_dir\"\n", &["train.nope=1"]).unwrap_err();
        assert!(err.to_string().contains("nope"), "err was: {err}");
    }

    #[test]
    fn overrides_patch_values_and_types() {
        let cfg = resolve(
            "[env]\nname = \"tmaze_passive\"\n",
            &[
                "seed=7",
                "env.corridor_len=30",
                "train.lr=0.001",
                "train.freeze_critic=false",
                "memory.arch=attn",
                "label=my-run",
                "bench.lengths=[512, 1024, 2048, 4096]",
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.env.horizon, Some(31));
        assert_eq!(cfg.train.lr, Some(0.001));
        assert_eq!(cfg.train.freeze_critic, Some(false));
        assert_eq!(cfg.arch().unwrap(), Some(Arch::Attn));
        assert_eq!(cfg.label.as_deref(), Some("my-run"));
        assert_eq!(cfg.bench.lengths.as_deref(), Some(&[512, 1024, 2048, 4096][..]));
        assert!(matches!(
            parse_str("[env]\nname = \"x\"", "t", &["no_equals_sign".into()]),
            Err(CoreError::Usage(_))
        ));
    }

    #[test]
    fn cross_field_rules_are_enforced() {
        // corridor on a non-maze env
        let err = resolve("[env]\nname = \"gauss_bandit\"\ncorridor_len = 5\n", &[]).unwrap_err();
        assert!(err.to_string().contains("corridor_len"), "err was: {err}");
        // inconsistent horizon/corridor pair
        let err = resolve(
            "[env]\nname = \"tmaze_passive\"\nhorizon = 12\ncorridor_len = 10\n",
            &[],
        )
        .unwrap_err();
        assert!(err.to_string().contains("implies horizon 11"), "err was: {err}");
        // consistent pair is fine
        let cfg = resolve(
            "[env]\nname = \"tmaze_active\"\nhorizon = 12\ncorridor_len = 10\n",
            &[],
        )
        .unwrap();
        assert_eq!(cfg.horizon().unwrap(), 12);
        // memory horizon shorter than episodes
        let err = resolve("[env]\nname = \"point_dir\"\n[memory]\nhorizon = 50\n", &[])
            .unwrap_err();
        assert!(err.to_string().contains("memory.horizon"), "err was: {err}");
        // buffer too small for one episode
        let err = resolve("[env]\nname = \"point_dir\"\n[train]\nbuffer_size = 50\n", &[])
            .unwrap_err();
        assert!(err.to_string().contains("buffer_size"), "err was: {err}");
    }

    #[test]
    fn numeric_ranges_are_validated_by_key() {
        for (setting, key) in [
            ("train.gamma=1.5", "train.gamma"),
            ("train.tau=0.0", "train.tau"),
            ("train.lr=-1e-3", "train.lr"),
            ("train.grad_clip=-0.5", "train.grad_clip"),
            ("train.alpha=-0.1", "train.alpha"),
            ("train.batch_size=0", "train.batch_size"),
            ("train.total_episodes=0", "train.total_episodes"),
            ("train.eval_episodes=0", "train.eval_episodes"),
            ("train.hidden=[64]", "train.hidden"),
            ("memory.dim=0", "memory.dim"),
            ("memory.arch=lstm", "memory.arch"),
            ("bench.repeats=3", "bench.repeats"),
            ("bench.lengths=[1]", "bench.lengths"),
        ] {
            let err = resolve("[env]\nname = \"point_dir\"\n", &[setting]).unwrap_err();
            assert!(
                err.to_string().contains(key),
                "`{setting}` error should name `{key}`, got: {err}"
            );
        }
    }

    #[test]
    fn memoryless_arch_resolves() {
        let cfg = resolve("[env]\nname = \"point_dir\"\n", &["memory.arch=none"]).unwrap();
        assert_eq!(cfg.arch().unwrap(), None);
        assert_eq!(cfg.label.as_deref(), Some("point_dir-none-sac-s0"));
        let agent_cfg = cfg.sac_agent_config().unwrap();
        assert_eq!(agent_cfg.arch, None);
        assert_eq!(agent_cfg.memory_dim, 128);
    }
}
