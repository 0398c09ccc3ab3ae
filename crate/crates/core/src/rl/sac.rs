//! Soft actor-critic on memory readouts, with twin critics, Polyak-tracked
//! target critics, a squashed-Gaussian policy and a fixed entropy
//! temperature.
//!
//! The actor step comes in two flavours: the default treats the critics, the
//! memory encoder and the observation embedding as frozen constants (their
//! parameters are bound as plain tape leaves, so they receive no gradient and
//! the optimizer leaves them bit-identical); the alternative differentiates
//! the full objective, letting the actor loss pull on critics and encoder as
//! well.

use std::sync::Arc;

use rand::Rng;

use crate::envs::{Action, ActionSpec, Environment, EpisodeRecord};
use crate::error::{CoreError, Result};
use crate::memory::{Arch, Encoder, EncoderConfig, TransitionVector};
use crate::nn::{
    clip_gradients, soft_update, std_normal, Activation, AdamState, Bound, GradSet, Mlp, ParamId,
    ParamSet, Tape, Tensor, VarId, Workers,
};
use crate::seeding::{rng_for, rng_indexed, sub_seed_indexed, SeedStream};

use super::{
    batch_readouts_plain, batch_readouts_tape, build_batch, copy_values, gather_rows, hstack,
    rollout_episode, Batch, Rollout, StateEmbed, TrainConfig,
};

/// Clamp bounds for the policy's log standard deviation.
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Keeps the tanh change-of-variables log finite at saturation.
pub const SQUASH_EPS: f64 = 1e-6;

const LN_2PI: f64 = 1.8378770664093453;

/// Architecture knobs for a SAC agent.
#[derive(Debug, Clone)]
pub struct SacAgentConfig {
    /// Memory architecture; `None` is the memoryless ablation.
    pub arch: Option<Arch>,
    pub memory_dim: usize,
    /// Width of the observation embedding; defaults to `memory_dim`.
    pub state_dim: usize,
    /// Hidden widths of actor and critic heads.
    pub hidden: (usize, usize),
    /// Longest episode the memory must hold.
    pub horizon: usize,
}

impl SacAgentConfig {
    pub fn new(arch: Option<Arch>, memory_dim: usize, horizon: usize) -> Self {
        SacAgentConfig {
            arch,
            memory_dim,
            state_dim: memory_dim,
            hidden: (512, 512),
            horizon,
        }
    }
}

/// SAC agent: optional memory encoder, observation embedding, actor, twin
/// critics and their targets, all in one parameter set.
#[derive(Debug, Clone)]
pub struct SacAgent {
    pub params: ParamSet,
    pub encoder: Option<Encoder>,
    pub state_embed: StateEmbed,
    pub actor: Mlp,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    obs_dim: usize,
    act_dim: usize,
    /// Action box `center + half * tanh(u)` per component.
    center: f64,
    half: f64,
    memory_dim: usize,
}

impl SacAgent {
    pub fn new(
        obs_dim: usize,
        spec: &ActionSpec,
        cfg: &SacAgentConfig,
        master_seed: u64,
    ) -> Result<Self> {
        let (act_dim, low, high) = match spec {
            ActionSpec::Continuous { dim, low, high } => (*dim, *low, *high),
            ActionSpec::Discrete { .. } => {
                return Err(CoreError::Usage(
                    "SAC needs a continuous action space".into(),
                ))
            }
        };
        if obs_dim == 0 || act_dim == 0 {
            return Err(CoreError::Config(format!(
                "agent needs positive dims: obs {obs_dim}, action {act_dim}"
            )));
        }
        if cfg.memory_dim == 0 || cfg.state_dim == 0 || cfg.horizon == 0 {
            return Err(CoreError::Config(format!(
                "agent dims must be positive: memory {}, state {}, horizon {}",
                cfg.memory_dim, cfg.state_dim, cfg.horizon
            )));
        }
        if !(high > low && low.is_finite() && high.is_finite()) {
            return Err(CoreError::Config(format!(
                "action bounds must be finite with high > low, got [{low}, {high}]"
            )));
        }
        let mut params = ParamSet::new();
        let mut rng = rng_for(master_seed, SeedStream::Init);
        let width = TransitionVector::width(obs_dim, act_dim);
        let encoder = match cfg.arch {
            Some(arch) => Some(Encoder::new(
                &mut params,
                EncoderConfig::new(arch, width, cfg.memory_dim, cfg.horizon),
                &mut rng,
            )?),
            None => None,
        };
        let state_embed = StateEmbed::new(&mut params, "state", obs_dim, cfg.state_dim, &mut rng)?;
        let in_dim = cfg.memory_dim + cfg.state_dim;
        let (h1, h2) = cfg.hidden;
        let pi_dims = [in_dim, h1, h2, 2 * act_dim];
        let q_dims = [in_dim + act_dim, h1, h2, 1];
        let acts = [Activation::Relu, Activation::Relu, Activation::Identity];
        let actor = Mlp::new(&mut params, "pi", &pi_dims, &acts, &mut rng);
        let q1 = Mlp::new(&mut params, "q1", &q_dims, &acts, &mut rng);
        let q2 = Mlp::new(&mut params, "q2", &q_dims, &acts, &mut rng);
        let q1_target = Mlp::new(&mut params, "q1t", &q_dims, &acts, &mut rng);
        let q2_target = Mlp::new(&mut params, "q2t", &q_dims, &acts, &mut rng);
        let mut agent = SacAgent {
            params,
            encoder,
            state_embed,
            actor,
            q1,
            q2,
            q1_target,
            q2_target,
            obs_dim,
            act_dim,
            center: 0.5 * (high + low),
            half: 0.5 * (high - low),
            memory_dim: cfg.memory_dim,
        };
        let pairs: Vec<(ParamId, ParamId)> = agent
            .q1
            .param_ids()
            .into_iter()
            .zip(agent.q1_target.param_ids())
            .chain(agent.q2.param_ids().into_iter().zip(agent.q2_target.param_ids()))
            .collect();
        copy_values(&mut agent.params, &pairs);
        Ok(agent)
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn memory_dim(&self) -> usize {
        self.memory_dim
    }

    /// `(target, online)` pairs for both critics, as `soft_update` expects.
    pub fn polyak_pairs(&self) -> Vec<(ParamId, ParamId)> {
        self.q1_target
            .param_ids()
            .into_iter()
            .zip(self.q1.param_ids())
            .chain(
                self.q2_target
                    .param_ids()
                    .into_iter()
                    .zip(self.q2.param_ids()),
            )
            .collect()
    }

    /// Split a raw actor output row into (mu, clamped log-std).
    fn split_policy_row<'r>(&self, row: &'r [f64]) -> (&'r [f64], Vec<f64>) {
        let mu = &row[..self.act_dim];
        let log_std = row[self.act_dim..]
            .iter()
            .map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX))
            .collect();
        (mu, log_std)
    }

    /// Sample (or take the mean of) the squashed policy for a batch of head
    /// inputs, returning env-space actions and their log-probabilities.
    /// Noise is drawn row-major, one standard normal per action component.
    pub fn policy_sample<R: Rng>(
        &self,
        head_in: &Tensor,
        deterministic: bool,
        rng: &mut R,
        workers: &Workers,
    ) -> Result<(Tensor, Vec<f64>)> {
        let out = self.actor.forward(&self.params, head_in, workers)?;
        let rows = out.rows();
        let mut actions = Tensor::zeros(&[rows, self.act_dim]);
        let mut logps = Vec::with_capacity(rows);
        let d = self.act_dim;
        for i in 0..rows {
            let (mu, log_std) = self.split_policy_row(out.row(i));
            let mut logp = -(d as f64) * self.half.ln();
            let arow = actions.row_mut(i);
            for k in 0..d {
                let xi = if deterministic { 0.0 } else { std_normal(rng) };
                let std = log_std[k].exp();
                let u = mu[k] + std * xi;
                let a = u.tanh();
                logp += -0.5 * xi * xi - log_std[k] - 0.5 * LN_2PI;
                logp -= (1.0 + SQUASH_EPS - a * a).ln();
                arow[k] = self.center + self.half * a;
            }
            logps.push(logp);
        }
        Ok((actions, logps))
    }

    /// Act for one (readout, observation) pair.
    pub fn act<R: Rng>(
        &self,
        readout: &[f64],
        obs: &[f64],
        deterministic: bool,
        rng: &mut R,
        workers: &Workers,
    ) -> Result<Vec<f64>> {
        if readout.len() != self.memory_dim {
            return Err(CoreError::Config(format!(
                "readout width {} does not match memory_dim {}",
                readout.len(),
                self.memory_dim
            )));
        }
        let se = self.state_embed.embed_row(&self.params, obs, workers)?;
        let mut input = Vec::with_capacity(readout.len() + se.len());
        input.extend_from_slice(readout);
        input.extend_from_slice(&se);
        let head_in = Tensor::matrix(1, input.len(), input);
        let (a, _) = self.policy_sample(&head_in, deterministic, rng, workers)?;
        Ok(a.as_slice().to_vec())
    }

    /// Collect one exploration episode; noise draws derive from
    /// `(master_seed, episode_idx)` so runs replay exactly.
    pub fn collect_episode(
        &self,
        env: &mut dyn Environment,
        master_seed: u64,
        episode_idx: usize,
        workers: &Workers,
    ) -> Result<Rollout> {
        let env_seed = sub_seed_indexed(master_seed, SeedStream::Env, episode_idx as u64);
        let mut expl = rng_indexed(master_seed, SeedStream::Exploration, episode_idx as u64);
        rollout_episode(
            env,
            env_seed,
            self.encoder.as_ref(),
            &self.params,
            self.memory_dim,
            workers,
            |_, readout, obs| {
                Ok(Action::Continuous(self.act(
                    readout, obs, false, &mut expl, workers,
                )?))
            },
        )
    }

    /// Collect one mean-action (evaluation) episode.
    pub fn collect_greedy(
        &self,
        env: &mut dyn Environment,
        env_seed: u64,
        workers: &Workers,
    ) -> Result<Rollout> {
        let mut dummy = rng_for(0, SeedStream::Eval);
        rollout_episode(
            env,
            env_seed,
            self.encoder.as_ref(),
            &self.params,
            self.memory_dim,
            workers,
            |_, readout, obs| {
                Ok(Action::Continuous(self.act(
                    readout, obs, true, &mut dummy, workers,
                )?))
            },
        )
    }
}

/// Bootstrapped critic targets `y = r + gamma (1 - done) (min_i Q_target_i -
/// alpha log pi)`, with the next action freshly sampled from the current
/// policy. Pure value computation, no gradients.
pub fn sac_targets<R: Rng>(
    agent: &SacAgent,
    batch: &Batch,
    cfg: &TrainConfig,
    rng: &mut R,
    workers: &Workers,
) -> Result<Vec<f64>> {
    let readouts = batch_readouts_plain(
        &agent.params,
        agent.encoder.as_ref(),
        agent.memory_dim,
        batch,
        workers,
    )?;
    let next_read = gather_rows(&readouts, &batch.next_rows);
    let se_next = agent
        .state_embed
        .forward(&agent.params, &batch.obs_next, workers)?;
    let next_in = hstack(&[&next_read, &se_next]);
    let (a_next, logp_next) = agent.policy_sample(&next_in, false, rng, workers)?;
    let q_in = hstack(&[&next_read, &se_next, &a_next]);
    let q1t = agent.q1_target.forward(&agent.params, &q_in, workers)?;
    let q2t = agent.q2_target.forward(&agent.params, &q_in, workers)?;
    let mut y = Vec::with_capacity(batch.steps);
    for i in 0..batch.steps {
        let qmin = q1t.row(i)[0].min(q2t.row(i)[0]);
        let soft = qmin - cfg.alpha * logp_next[i];
        y.push(batch.rewards[i] + cfg.gamma * batch.not_done[i] * soft);
    }
    Ok(y)
}

/// Critic loss and gradients against fixed targets: the sum of the two
/// critics' mean squared errors. Gradients flow into both critics, the
/// observation embedding and the memory encoder.
pub fn sac_critic_loss_grads(
    agent: &SacAgent,
    batch: &Batch,
    targets: &[f64],
    workers: &Workers,
) -> Result<(f64, GradSet)> {
    if targets.len() != batch.steps {
        return Err(CoreError::Usage(format!(
            "{} targets for {} steps",
            targets.len(),
            batch.steps
        )));
    }
    let tape = Tape::new(workers.clone());
    let mut bound = Bound::new(&agent.params);
    let readouts = batch_readouts_tape(
        &tape,
        &mut bound,
        &agent.params,
        agent.encoder.as_ref(),
        agent.memory_dim,
        batch,
    )?;
    let cur = tape.select_rows(readouts, Arc::new(batch.cur_rows.clone()));
    let obs_cur = tape.leaf(batch.obs_cur.clone());
    let se_cur = agent
        .state_embed
        .forward_tape(&tape, &mut bound, &agent.params, obs_cur)?;
    let act = tape.leaf(batch.act_rows.clone());
    let q_in = tape.concat_cols(&[cur, se_cur, act]);
    let q1 = agent.q1.forward_tape(&tape, &mut bound, &agent.params, q_in);
    let q2 = agent.q2.forward_tape(&tape, &mut bound, &agent.params, q_in);
    let y = tape.leaf(Tensor::matrix(batch.steps, 1, targets.to_vec()));
    let l1 = tape.mean_all(tape.square(tape.sub(q1, y)));
    let l2 = tape.mean_all(tape.square(tape.sub(q2, y)));
    let loss = tape.add(l1, l2);
    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() {
        return Err(CoreError::Numeric(format!(
            "sac: non-finite critic loss {loss_value} over {} steps",
            batch.steps
        )));
    }
    let grads = tape.backward(loss)?;
    Ok((loss_value, bound.grads(&agent.params, &grads)))
}

/// Forward an MLP on the tape with its weights bound as constant leaves, so
/// gradients flow to the input but never to the parameters.
fn mlp_forward_tape_frozen(mlp: &Mlp, tape: &Tape, params: &ParamSet, input: VarId) -> VarId {
    let mut x = input;
    for (w, b, act) in mlp.layer_views(params) {
        let wv = tape.leaf(w.clone());
        let bv = tape.leaf(b.clone());
        let z = tape.add_row_vec(tape.matmul(x, wv), bv);
        x = match act {
            Activation::Identity => z,
            a => tape.activation(z, a),
        };
    }
    x
}

/// Actor loss and gradients with fixed exploration noise `xi` (one standard
/// normal per action component, `steps x act_dim`):
/// `mean(alpha * log pi - min_i Q_i)` under the reparameterized policy.
///
/// With `freeze` the critics, encoder and observation embedding enter as
/// constants and only the actor can receive gradients; otherwise the whole
/// objective is differentiated.
pub fn sac_actor_loss_grads(
    agent: &SacAgent,
    batch: &Batch,
    xi: &Tensor,
    freeze: bool,
    alpha: f64,
    workers: &Workers,
) -> Result<(f64, GradSet)> {
    if xi.rank() != 2 || xi.rows() != batch.steps || xi.cols() != agent.act_dim {
        return Err(CoreError::Usage(format!(
            "noise must be {} x {}, got {:?}",
            batch.steps,
            agent.act_dim,
            xi.shape()
        )));
    }
    let tape = Tape::new(workers.clone());
    let mut bound = Bound::new(&agent.params);

    let (cur, se_cur) = if freeze {
        let readouts = batch_readouts_plain(
            &agent.params,
            agent.encoder.as_ref(),
            agent.memory_dim,
            batch,
            workers,
        )?;
        let cur_rows = gather_rows(&readouts, &batch.cur_rows);
        let se = agent
            .state_embed
            .forward(&agent.params, &batch.obs_cur, workers)?;
        (tape.leaf(cur_rows), tape.leaf(se))
    } else {
        let readouts = batch_readouts_tape(
            &tape,
            &mut bound,
            &agent.params,
            agent.encoder.as_ref(),
            agent.memory_dim,
            batch,
        )?;
        let cur = tape.select_rows(readouts, Arc::new(batch.cur_rows.clone()));
        let obs_cur = tape.leaf(batch.obs_cur.clone());
        let se = agent
            .state_embed
            .forward_tape(&tape, &mut bound, &agent.params, obs_cur)?;
        (cur, se)
    };

    let head_in = tape.concat_cols(&[cur, se_cur]);
    let pi_out = agent
        .actor
        .forward_tape(&tape, &mut bound, &agent.params, head_in);
    let d = agent.act_dim;
    let mu = tape.slice_cols(pi_out, 0, d);
    let log_std = tape.clamp(tape.slice_cols(pi_out, d, d), LOG_STD_MIN, LOG_STD_MAX);
    let std = tape.exp(log_std);
    let xi_leaf = tape.leaf(xi.clone());
    let u = tape.add(mu, tape.mul(std, xi_leaf));
    let a_tanh = tape.tanh(u);
    let a_env = tape.add_scalar(tape.scale(a_tanh, agent.half), agent.center);

    // log pi = sum_k [ -xi^2/2 - log_std - ln(2 pi)/2 - ln(1 + eps - a^2) ]
    //          - d * ln(half)   (change of variables for the box rescale)
    let gauss = tape.sub(tape.scale(tape.square(xi_leaf), -0.5), log_std);
    let squash = tape.ln(tape.add_scalar(tape.neg(tape.square(a_tanh)), 1.0 + SQUASH_EPS));
    let per_dim = tape.sub(gauss, squash);
    let logp = tape.add_scalar(
        tape.row_sums(per_dim),
        -(d as f64) * (0.5 * LN_2PI + agent.half.ln()),
    );

    let q_in = tape.concat_cols(&[head_in, a_env]);
    let (q1v, q2v) = if freeze {
        (
            mlp_forward_tape_frozen(&agent.q1, &tape, &agent.params, q_in),
            mlp_forward_tape_frozen(&agent.q2, &tape, &agent.params, q_in),
        )
    } else {
        (
            agent.q1.forward_tape(&tape, &mut bound, &agent.params, q_in),
            agent.q2.forward_tape(&tape, &mut bound, &agent.params, q_in),
        )
    };
    // The critic emits `steps x 1`; flatten it to match the rank-1 log-probs
    // (summing a single column is the identity, gradients included).
    let qmin = tape.row_sums(tape.minimum(q1v, q2v));
    let loss = tape.mean_all(tape.sub(tape.scale(logp, alpha), qmin));
    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() {
        return Err(CoreError::Numeric(format!(
            "sac: non-finite actor loss {loss_value} over {} steps",
            batch.steps
        )));
    }
    let grads = tape.backward(loss)?;
    Ok((loss_value, bound.grads(&agent.params, &grads)))
}

/// One full SAC step over a batch of whole episodes: critic update (both
/// critics, embedding, encoder), then actor update, then Polyak tracking of
/// the target critics. Returns `(critic loss, actor loss)`, each computed
/// before its parameter step.
pub fn sac_update<R: Rng>(
    agent: &mut SacAgent,
    episodes: &[EpisodeRecord],
    spec: &ActionSpec,
    cfg: &TrainConfig,
    adam_critic: &mut AdamState,
    adam_actor: &mut AdamState,
    rng: &mut R,
    workers: &Workers,
) -> Result<(f64, f64)> {
    match spec {
        ActionSpec::Continuous { dim, .. } if *dim == agent.act_dim => {}
        ActionSpec::Continuous { dim, .. } => {
            return Err(CoreError::Config(format!(
                "agent emits {}-dimensional actions, environment wants {dim}",
                agent.act_dim
            )))
        }
        ActionSpec::Discrete { .. } => {
            return Err(CoreError::Usage(
                "SAC needs a continuous action space".into(),
            ))
        }
    }
    let batch = build_batch(episodes, spec)?;

    let targets = sac_targets(agent, &batch, cfg, rng, workers)?;
    let (critic_loss, mut cgrads) = sac_critic_loss_grads(agent, &batch, &targets, workers)?;
    if let Some(clip) = cfg.grad_clip {
        clip_gradients(&mut cgrads, clip)?;
    }
    adam_critic.step(&mut agent.params, &cgrads, cfg.lr)?;

    let mut xi = Tensor::zeros(&[batch.steps, agent.act_dim]);
    for v in xi.as_mut_slice() {
        *v = std_normal(rng);
    }
    let (actor_loss, mut agrads) =
        sac_actor_loss_grads(agent, &batch, &xi, cfg.freeze_critic, cfg.alpha, workers)?;
    if let Some(clip) = cfg.grad_clip {
        clip_gradients(&mut agrads, clip)?;
    }
    adam_actor.step(&mut agent.params, &agrads, cfg.lr)?;

    let pairs = agent.polyak_pairs();
    soft_update(&mut agent.params, &pairs, cfg.tau)?;
    Ok((critic_loss, actor_loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{make_env, ContextSample, EnvName};
    use crate::nn::finite_difference_check;

    const SPEC: ActionSpec = ActionSpec::Continuous {
        dim: 2,
        low: -1.0,
        high: 1.0,
    };

    fn agent(arch: Option<Arch>, seed: u64) -> SacAgent {
        let mut cfg = SacAgentConfig::new(arch, 8, 6);
        cfg.hidden = (16, 16);
        SacAgent::new(2, &SPEC, &cfg, seed).unwrap()
    }

    fn episode(len: usize) -> EpisodeRecord {
        let observations = (0..=len).map(|i| vec![0.1 * i as f64, -0.2]).collect();
        EpisodeRecord {
            observations,
            actions: (0..len)
                .map(|i| Action::Continuous(vec![0.3, -0.4 * ((i % 2) as f64)]))
                .collect(),
            rewards: (0..len).map(|i| 0.25 * i as f64).collect(),
            context: ContextSample::Direction([1.0, 0.0]),
        }
    }

    fn zero_params(agent: &mut SacAgent, ids: &[ParamId]) {
        for &id in ids {
            let z = Tensor::zeros(agent.params.get(id).shape());
            agent.params.set(id, z);
        }
    }

    fn all_critic_ids(agent: &SacAgent) -> Vec<ParamId> {
        agent
            .q1
            .param_ids()
            .into_iter()
            .chain(agent.q2.param_ids())
            .chain(agent.q1_target.param_ids())
            .chain(agent.q2_target.param_ids())
            .collect()
    }

    fn set_final_bias(agent: &mut SacAgent, head_ids: &[ParamId], value: f64) {
        let b = head_ids[head_ids.len() - 1];
        let mut t = agent.params.get(b).clone();
        for v in t.as_mut_slice() {
            *v = value;
        }
        agent.params.set(b, t);
    }

    #[test]
    fn terminal_step_target_is_raw_reward() {
        // One-step done episode with zeroed critics: y = r exactly, so the
        // critic loss is r^2 + r^2.
        let mut a = agent(Some(Arch::Mate), 1);
        let ids = all_critic_ids(&a);
        zero_params(&mut a, &ids);
        let ep = episode(1);
        let batch = build_batch(&[ep], &SPEC).unwrap();
        let cfg = TrainConfig::sac_defaults();
        let w = Workers::serial();
        let mut rng = rng_for(1, SeedStream::Sampling);
        let y = sac_targets(&a, &batch, &cfg, &mut rng, &w).unwrap();
        assert_eq!(y, vec![0.0]); // reward of the 1-step episode is 0.0
        let ep2 = EpisodeRecord {
            rewards: vec![1.5],
            ..episode(1)
        };
        let batch2 = build_batch(&[ep2], &SPEC).unwrap();
        let y2 = sac_targets(&a, &batch2, &cfg, &mut rng, &w).unwrap();
        assert_eq!(y2, vec![1.5]);
        let (loss, _) = sac_critic_loss_grads(&a, &batch2, &y2, &w).unwrap();
        assert!((loss - 2.0 * 1.5 * 1.5).abs() < 1e-12);
    }

    #[test]
    fn targets_use_twin_minimum() {
        // Constant critics via final biases: q1t = 2, q2t = 1. A two-step
        // episode's first target must bootstrap from min = 1.
        let mut a = agent(Some(Arch::Mate), 2);
        let ids = all_critic_ids(&a);
        let q1t_ids = a.q1_target.param_ids();
        let q2t_ids = a.q2_target.param_ids();
        zero_params(&mut a, &ids);
        set_final_bias(&mut a, &q1t_ids, 2.0);
        set_final_bias(&mut a, &q2t_ids, 1.0);
        let ep = episode(2);
        let batch = build_batch(&[ep.clone()], &SPEC).unwrap();
        let mut cfg = TrainConfig::sac_defaults();
        cfg.alpha = 0.0;
        let w = Workers::serial();
        let mut rng = rng_for(2, SeedStream::Sampling);
        let y = sac_targets(&a, &batch, &cfg, &mut rng, &w).unwrap();
        assert!((y[0] - (ep.rewards[0] + cfg.gamma * 1.0)).abs() < 1e-12);
        assert!((y[1] - ep.rewards[1]).abs() < 1e-12);
        // Swapped biases give the same targets.
        set_final_bias(&mut a, &q1t_ids, 1.0);
        set_final_bias(&mut a, &q2t_ids, 2.0);
        let mut rng2 = rng_for(2, SeedStream::Sampling);
        let y_swap = sac_targets(&a, &batch, &cfg, &mut rng2, &w).unwrap();
        assert_eq!(y, y_swap);
    }

    #[test]
    fn actor_loss_uses_twin_minimum() {
        let mk = |b1: f64, b2: f64| {
            let mut a = agent(Some(Arch::Mate), 3);
            let ids: Vec<ParamId> = a
                .q1
                .param_ids()
                .into_iter()
                .chain(a.q2.param_ids())
                .collect();
            let q1_ids = a.q1.param_ids();
            let q2_ids = a.q2.param_ids();
            zero_params(&mut a, &ids);
            set_final_bias(&mut a, &q1_ids, b1);
            set_final_bias(&mut a, &q2_ids, b2);
            a
        };
        let ep = episode(3);
        let batch = build_batch(&[ep], &SPEC).unwrap();
        let w = Workers::serial();
        let xi = Tensor::matrix(3, 2, vec![0.3, -0.7, 1.1, 0.0, -0.2, 0.5]);
        let loss = |a: &SacAgent| {
            sac_actor_loss_grads(a, &batch, &xi, true, 0.1, &w).unwrap().0
        };
        let l12 = loss(&mk(1.0, 2.0));
        let l21 = loss(&mk(2.0, 1.0));
        let l11 = loss(&mk(1.0, 1.0));
        let l22 = loss(&mk(2.0, 2.0));
        assert_eq!(l12, l21, "min is symmetric");
        assert_eq!(l12, l11, "min(1,2) equals min(1,1)");
        assert!(
            ((l11 - l22) - 1.0).abs() < 1e-12,
            "raising the minimum by 1 lowers the loss by exactly 1"
        );
    }

    #[test]
    fn frozen_actor_step_leaves_critics_and_encoder_bit_identical() {
        let mut a = agent(Some(Arch::Mate), 4);
        let ep = episode(4);
        let batch = build_batch(&[ep], &SPEC).unwrap();
        let w = Workers::serial();
        let xi = {
            let mut t = Tensor::zeros(&[4, 2]);
            let mut rng = rng_for(9, SeedStream::Sampling);
            for v in t.as_mut_slice() {
                *v = std_normal(&mut rng);
            }
            t
        };
        let before = a.params.clone();
        let (_, grads) = sac_actor_loss_grads(&a, &batch, &xi, true, 0.1, &w).unwrap();
        let mut adam = AdamState::new(&a.params);
        adam.step(&mut a.params, &grads, 1e-4).unwrap();
        let actor_ids: std::collections::HashSet<usize> =
            a.actor.param_ids().iter().map(|id| id.index()).collect();
        let mut actor_moved = false;
        for id in before.ids() {
            let same = before.get(id).as_slice() == a.params.get(id).as_slice();
            if actor_ids.contains(&id.index()) {
                actor_moved |= !same;
            } else {
                assert!(
                    same,
                    "frozen actor step moved non-actor parameter {}",
                    before.name(id)
                );
            }
        }
        assert!(actor_moved, "actor should move under its own loss");
    }

    #[test]
    fn unfrozen_actor_step_moves_at_least_one_critic_parameter() {
        let mut a = agent(Some(Arch::Mate), 5);
        let ep = episode(4);
        let batch = build_batch(&[ep], &SPEC).unwrap();
        let w = Workers::serial();
        let mut xi = Tensor::zeros(&[4, 2]);
        let mut rng = rng_for(10, SeedStream::Sampling);
        for v in xi.as_mut_slice() {
            *v = std_normal(&mut rng);
        }
        let before = a.params.clone();
        let (_, grads) = sac_actor_loss_grads(&a, &batch, &xi, false, 0.1, &w).unwrap();
        let mut adam = AdamState::new(&a.params);
        adam.step(&mut a.params, &grads, 1e-4).unwrap();
        let critic_ids: Vec<ParamId> = a.q1.param_ids().into_iter().chain(a.q2.param_ids()).collect();
        let critic_moved = critic_ids
            .iter()
            .any(|&id| before.get(id).as_slice() != a.params.get(id).as_slice());
        assert!(critic_moved, "unfrozen actor loss must pull on the critics");
        let enc_id = a.params.id("embed/w").unwrap();
        assert_ne!(
            before.get(enc_id).as_slice(),
            a.params.get(enc_id).as_slice(),
            "unfrozen actor loss must pull on the encoder"
        );
    }

    #[test]
    fn actor_gradients_match_finite_differences() {
        // Freeze mode: gradients w.r.t. actor parameters only.
        let a = agent(Some(Arch::Mate), 6);
        let ep = episode(3);
        let batch = build_batch(&[ep], &SPEC).unwrap();
        let w = Workers::serial();
        let xi = Tensor::matrix(3, 2, vec![0.4, -0.9, 0.2, 1.3, -0.6, 0.05]);
        let actor = a.actor.clone();
        let mut params = a.params.clone();
        let which = actor.param_ids();
        let agent_view = a.clone();
        let max_rel = finite_difference_check(&mut params, &which, 1e-5, |p| {
            let mut probe = agent_view.clone();
            probe.params = p.clone();
            sac_actor_loss_grads(&probe, &batch, &xi, true, 0.1, &w)
        })
        .unwrap();
        assert!(max_rel < 1e-4, "actor fd mismatch {max_rel:.3e}");
        // Full mode: encoder and critic parameters join the objective.
        let mut ids = vec![
            a.params.id("embed/w").unwrap(),
            a.params.id("state/w").unwrap(),
        ];
        ids.extend_from_slice(&a.q1.param_ids()[..2]);
        ids.extend_from_slice(&actor.param_ids()[..2]);
        let mut params2 = a.params.clone();
        let max_rel = finite_difference_check(&mut params2, &ids, 1e-5, |p| {
            let mut probe = agent_view.clone();
            probe.params = p.clone();
            sac_actor_loss_grads(&probe, &batch, &xi, false, 0.1, &w)
        })
        .unwrap();
        assert!(max_rel < 1e-4, "full-objective fd mismatch {max_rel:.3e}");
    }

    #[test]
    fn critic_gradients_match_finite_differences() {
        let a = agent(Some(Arch::Mate), 7);
        let ep = episode(3);
        let batch = build_batch(&[ep], &SPEC).unwrap();
        let w = Workers::serial();
        let cfg = TrainConfig::sac_defaults();
        let mut rng = rng_for(3, SeedStream::Sampling);
        let targets = sac_targets(&a, &batch, &cfg, &mut rng, &w).unwrap();
        let mut ids = vec![
            a.params.id("embed/w").unwrap(),
            a.params.id("state/w").unwrap(),
            a.params.id("state/psi").unwrap(),
        ];
        ids.extend_from_slice(&a.q1.param_ids()[..2]);
        ids.extend_from_slice(&a.q2.param_ids()[4..]);
        let agent_view = a.clone();
        let mut params = a.params.clone();
        let max_rel = finite_difference_check(&mut params, &ids, 1e-5, |p| {
            let mut probe = agent_view.clone();
            probe.params = p.clone();
            sac_critic_loss_grads(&probe, &batch, &targets, &w)
        })
        .unwrap();
        assert!(max_rel < 1e-4, "critic fd mismatch {max_rel:.3e}");
    }

    #[test]
    fn full_update_is_deterministic_bitwise() {
        let run = || {
            let mut a = agent(Some(Arch::Mate), 8);
            let cfg = TrainConfig::sac_defaults();
            let mut ac = AdamState::new(&a.params);
            let mut aa = AdamState::new(&a.params);
            let mut rng = rng_for(4, SeedStream::Sampling);
            let w = Workers::serial();
            let mut losses = Vec::new();
            for len in [3usize, 4, 2] {
                losses.push(
                    sac_update(
                        &mut a,
                        &[episode(len)],
                        &SPEC,
                        &cfg,
                        &mut ac,
                        &mut aa,
                        &mut rng,
                        &w,
                    )
                    .unwrap(),
                );
            }
            (losses, a.params)
        };
        let (l1, p1) = run();
        let (l2, p2) = run();
        assert_eq!(l1, l2);
        for id in p1.ids() {
            assert_eq!(p1.get(id).as_slice(), p2.get(id).as_slice());
        }
    }

    #[test]
    fn rollout_respects_action_bounds() {
        let mut env = make_env(EnvName::PointDir, 20).unwrap();
        let mut cfg = SacAgentConfig::new(Some(Arch::Mate), 8, 20);
        cfg.hidden = (16, 16);
        let a = SacAgent::new(env.obs_dim(), &env.action_spec(), &cfg, 11).unwrap();
        let roll = a
            .collect_episode(env.as_mut(), 11, 0, &Workers::serial())
            .unwrap();
        assert_eq!(roll.episode.len(), 20);
        for act in &roll.episode.actions {
            for &v in act.continuous().unwrap() {
                assert!((-1.0..=1.0).contains(&v), "action {v} escaped the box");
            }
        }
    }

    #[test]
    fn rejects_discrete_spaces() {
        let cfg = SacAgentConfig::new(Some(Arch::Mate), 8, 6);
        assert!(matches!(
            SacAgent::new(2, &ActionSpec::Discrete { n: 3 }, &cfg, 1),
            Err(CoreError::Usage(_))
        ));
    }
}
