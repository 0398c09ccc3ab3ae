//! Double-DQN on memory readouts.
//!
//! The online Q head consumes `[memory readout, observation embedding]`; the
//! bootstrap target picks the argmax action with the online head and scores
//! it with a slowly tracking target copy of the head. Gradients flow through
//! the online head, the observation embedding and the memory encoder; the
//! target head is updated only by Polyak averaging.

use std::sync::Arc;

use rand::Rng;

use crate::envs::{Action, ActionSpec, Environment, EpisodeRecord};
use crate::error::{CoreError, Result};
use crate::memory::{Arch, Encoder, EncoderConfig, TransitionVector};
use crate::nn::{
    clip_gradients, soft_update, Activation, AdamState, Bound, Mlp, ParamId, ParamSet, Tape,
    Tensor, Workers,
};
use crate::seeding::{rng_for, rng_indexed, sub_seed_indexed, SeedStream};

use super::{
    argmax_tie_low, batch_readouts_tape, build_batch, copy_values, epsilon_schedule, gather_rows,
    hstack, rollout_episode, Rollout, StateEmbed, TrainConfig,
};

/// Architecture knobs for a DQN agent.
#[derive(Debug, Clone)]
pub struct DqnAgentConfig {
    /// Memory architecture; `None` is the memoryless ablation (the readout
    /// half of the head input is pinned to zero).
    pub arch: Option<Arch>,
    pub memory_dim: usize,
    /// Width of the observation embedding fed to the head next to the
    /// readout; defaults to `memory_dim`.
    pub state_dim: usize,
    /// Hidden widths of the Q head.
    pub hidden: (usize, usize),
    /// Longest episode the memory must hold.
    pub horizon: usize,
}

impl DqnAgentConfig {
    pub fn new(arch: Option<Arch>, memory_dim: usize, horizon: usize) -> Self {
        DqnAgentConfig {
            arch,
            memory_dim,
            state_dim: memory_dim,
            hidden: (256, 256),
            horizon,
        }
    }
}

/// Double-DQN agent: optional memory encoder, observation embedding, online
/// and target Q heads, all in one parameter set.
#[derive(Debug, Clone)]
pub struct DqnAgent {
    pub params: ParamSet,
    pub encoder: Option<Encoder>,
    pub state_embed: StateEmbed,
    pub q_online: Mlp,
    pub q_target: Mlp,
    obs_dim: usize,
    n_actions: usize,
    memory_dim: usize,
}

impl DqnAgent {
    pub fn new(
        obs_dim: usize,
        n_actions: usize,
        cfg: &DqnAgentConfig,
        master_seed: u64,
    ) -> Result<Self> {
        if n_actions == 0 || obs_dim == 0 {
            return Err(CoreError::Config(format!(
                "agent needs positive dims: obs {obs_dim}, actions {n_actions}"
            )));
        }
        if cfg.memory_dim == 0 || cfg.state_dim == 0 || cfg.horizon == 0 {
            return Err(CoreError::Config(format!(
                "agent dims must be positive: memory {}, state {}, horizon {}",
                cfg.memory_dim, cfg.state_dim, cfg.horizon
            )));
        }
        let mut params = ParamSet::new();
        let mut rng = rng_for(master_seed, SeedStream::Init);
        let width = TransitionVector::width(obs_dim, n_actions);
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
        let dims = [in_dim, cfg.hidden.0, cfg.hidden.1, n_actions];
        let acts = [Activation::Relu, Activation::Relu, Activation::Identity];
        let q_online = Mlp::new(&mut params, "q", &dims, &acts, &mut rng);
        let q_target = Mlp::new(&mut params, "qt", &dims, &acts, &mut rng);
        let mut agent = DqnAgent {
            params,
            encoder,
            state_embed,
            q_online,
            q_target,
            obs_dim,
            n_actions,
            memory_dim: cfg.memory_dim,
        };
        let pairs = agent.target_pairs();
        copy_values(&mut agent.params, &pairs);
        Ok(agent)
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn memory_dim(&self) -> usize {
        self.memory_dim
    }

    /// `(online, target)` pairs for initial copy.
    fn target_pairs(&self) -> Vec<(ParamId, ParamId)> {
        self.q_online
            .param_ids()
            .into_iter()
            .zip(self.q_target.param_ids())
            .collect()
    }

    /// `(target, online)` pairs as `soft_update` expects them.
    pub fn polyak_pairs(&self) -> Vec<(ParamId, ParamId)> {
        self.q_target
            .param_ids()
            .into_iter()
            .zip(self.q_online.param_ids())
            .collect()
    }

    /// Q values for one (readout, observation) pair.
    pub fn q_values(&self, readout: &[f64], obs: &[f64], workers: &Workers) -> Result<Vec<f64>> {
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
        let x = Tensor::matrix(1, input.len(), input);
        let q = self.q_online.forward(&self.params, &x, workers)?;
        Ok(q.as_slice().to_vec())
    }

    pub fn act_greedy(&self, readout: &[f64], obs: &[f64], workers: &Workers) -> Result<usize> {
        Ok(argmax_tie_low(&self.q_values(readout, obs, workers)?))
    }

    pub fn act_epsilon<R: Rng>(
        &self,
        readout: &[f64],
        obs: &[f64],
        eps: f64,
        rng: &mut R,
        workers: &Workers,
    ) -> Result<usize> {
        if rng.random::<f64>() < eps {
            Ok(rng.random_range(0..self.n_actions))
        } else {
            self.act_greedy(readout, obs, workers)
        }
    }

    /// Collect one epsilon-greedy episode. The environment seed and the
    /// exploration draws both derive from `(master_seed, episode_idx)`, so a
    /// run is reproducible episode by episode.
    pub fn collect_episode(
        &self,
        env: &mut dyn Environment,
        master_seed: u64,
        episode_idx: usize,
        total_episodes: usize,
        workers: &Workers,
    ) -> Result<Rollout> {
        let eps = epsilon_schedule(episode_idx, total_episodes, env.horizon());
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
                Ok(Action::Discrete(self.act_epsilon(
                    readout, obs, eps, &mut expl, workers,
                )?))
            },
        )
    }

    /// Collect one greedy (evaluation) episode.
    pub fn collect_greedy(
        &self,
        env: &mut dyn Environment,
        env_seed: u64,
        workers: &Workers,
    ) -> Result<Rollout> {
        rollout_episode(
            env,
            env_seed,
            self.encoder.as_ref(),
            &self.params,
            self.memory_dim,
            workers,
            |_, readout, obs| Ok(Action::Discrete(self.act_greedy(readout, obs, workers)?)),
        )
    }
}

/// One double-DQN gradient step over a batch of whole episodes. Returns the
/// batch TD loss (mean squared TD error over all steps, computed before the
/// parameter update).
pub fn ddqn_update(
    agent: &mut DqnAgent,
    episodes: &[EpisodeRecord],
    spec: &ActionSpec,
    cfg: &TrainConfig,
    adam: &mut AdamState,
    workers: &Workers,
) -> Result<f64> {
    let n = match spec {
        ActionSpec::Discrete { n } => *n,
        ActionSpec::Continuous { .. } => {
            return Err(CoreError::Usage(
                "double-DQN needs a discrete action space".into(),
            ))
        }
    };
    if n != agent.n_actions {
        return Err(CoreError::Config(format!(
            "agent has {} actions, environment has {n}",
            agent.n_actions
        )));
    }
    let batch = build_batch(episodes, spec)?;
    if batch.act_idx.len() != batch.steps {
        return Err(CoreError::Data(
            "batch contains non-discrete actions".into(),
        ));
    }

    let tape = Tape::new(workers.clone());
    let mut bound = Bound::new(&agent.params);

    // Readouts with gradients (encoder on the tape), one leading
    // empty-memory row per episode.
    let readouts = batch_readouts_tape(
        &tape,
        &mut bound,
        &agent.params,
        agent.encoder.as_ref(),
        agent.memory_dim,
        &batch,
    )?;
    let cur = tape.select_rows(readouts, Arc::new(batch.cur_rows.clone()));
    let obs_cur = tape.leaf(batch.obs_cur.clone());
    let se_cur = agent
        .state_embed
        .forward_tape(&tape, &mut bound, &agent.params, obs_cur)?;
    let head_in = tape.concat_cols(&[cur, se_cur]);
    let q_all = agent
        .q_online
        .forward_tape(&tape, &mut bound, &agent.params, head_in);
    let q_taken = tape.gather_per_row(q_all, Arc::new(batch.act_idx.clone()));

    // Bootstrap targets, no gradients: online head picks the next action,
    // target head scores it. Post-transition readouts come straight off the
    // tape values so they match the gradient path bit for bit.
    let readout_vals = tape.value(readouts);
    let next_read = gather_rows(&readout_vals, &batch.next_rows);
    let se_next = agent
        .state_embed
        .forward(&agent.params, &batch.obs_next, workers)?;
    let next_in = hstack(&[&next_read, &se_next]);
    let q_next_online = agent.q_online.forward(&agent.params, &next_in, workers)?;
    let q_next_target = agent.q_target.forward(&agent.params, &next_in, workers)?;
    let mut targets = Vec::with_capacity(batch.steps);
    for i in 0..batch.steps {
        let a_star = argmax_tie_low(q_next_online.row(i));
        let boot = q_next_target.row(i)[a_star];
        targets.push(batch.rewards[i] + cfg.gamma * batch.not_done[i] * boot);
    }
    let y = tape.leaf(Tensor::vector(targets));

    let err = tape.sub(q_taken, y);
    let loss = tape.mean_all(tape.square(err));
    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() {
        return Err(CoreError::Numeric(format!(
            "ddqn: non-finite TD loss {loss_value} over {} steps",
            batch.steps
        )));
    }

    let grads = tape.backward(loss)?;
    let mut gset = bound.grads(&agent.params, &grads);
    if let Some(clip) = cfg.grad_clip {
        clip_gradients(&mut gset, clip)?;
    }
    adam.step(&mut agent.params, &gset, cfg.lr)?;
    let pairs = agent.polyak_pairs();
    soft_update(&mut agent.params, &pairs, cfg.tau)?;
    Ok(loss_value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::ContextSample;

    fn zero_q_heads(agent: &mut DqnAgent) {
        for id in agent
            .q_online
            .param_ids()
            .into_iter()
            .chain(agent.q_target.param_ids())
        {
            let z = Tensor::zeros(agent.params.get(id).shape());
            agent.params.set(id, z);
        }
    }

    fn one_step_episode(reward: f64) -> EpisodeRecord {
        EpisodeRecord {
            observations: vec![vec![0.5, -0.5], vec![1.0, 0.0]],
            actions: vec![Action::Discrete(1)],
            rewards: vec![reward],
            context: ContextSample::Goal(1),
        }
    }

    fn agent_2obs_3act(arch: Option<Arch>, seed: u64) -> DqnAgent {
        let mut cfg = DqnAgentConfig::new(arch, 8, 6);
        cfg.hidden = (16, 16);
        DqnAgent::new(2, 3, &cfg, seed).unwrap()
    }

    #[test]
    fn zero_rewards_and_zero_heads_give_zero_loss_and_no_drift() {
        let mut agent = agent_2obs_3act(Some(Arch::Mate), 1);
        zero_q_heads(&mut agent);
        let mut ep = one_step_episode(0.0);
        ep.rewards = vec![0.0];
        let snapshot = agent.params.clone();
        let cfg = TrainConfig::ddqn_defaults();
        let mut adam = AdamState::new(&agent.params);
        let spec = ActionSpec::Discrete { n: 3 };
        let loss = ddqn_update(
            &mut agent,
            &[ep],
            &spec,
            &cfg,
            &mut adam,
            &Workers::serial(),
        )
        .unwrap();
        assert_eq!(loss, 0.0);
        // Zero targets, zero predictions: every gradient is exactly zero and
        // Adam moves nothing.
        for id in snapshot.ids() {
            assert_eq!(
                snapshot.get(id).as_slice(),
                agent.params.get(id).as_slice(),
                "parameter {} drifted on a zero-loss batch",
                snapshot.name(id)
            );
        }
    }

    #[test]
    fn single_rewarded_step_has_unit_loss_before_update() {
        // One transition, reward 1, episode done, Q identically zero:
        // target is 1, prediction 0, squared error 1.
        let mut agent = agent_2obs_3act(Some(Arch::Mate), 2);
        zero_q_heads(&mut agent);
        let cfg = TrainConfig::ddqn_defaults();
        let mut adam = AdamState::new(&agent.params);
        let spec = ActionSpec::Discrete { n: 3 };
        let loss = ddqn_update(
            &mut agent,
            &[one_step_episode(1.0)],
            &spec,
            &cfg,
            &mut adam,
            &Workers::serial(),
        )
        .unwrap();
        assert!((loss - 1.0).abs() < 1e-15, "loss {loss} should be exactly 1");
    }

    #[test]
    fn bootstrap_uses_target_head_at_online_argmax() {
        // Two-step episode, zero rewards. Zero the online head but give the
        // target head a constant output via its final bias: the step-0 target
        // must be gamma * qt[argmax_online] with argmax resolved to action 0.
        let mut agent = agent_2obs_3act(Some(Arch::Mate), 3);
        zero_q_heads(&mut agent);
        let bt = agent.q_target.param_ids()[5]; // final layer bias
        agent
            .params
            .set(bt, Tensor::vector(vec![0.7, 0.2, 0.4]));
        let ep = EpisodeRecord {
            observations: vec![vec![0.1, 0.2], vec![0.3, 0.4], vec![0.5, 0.6]],
            actions: vec![Action::Discrete(0), Action::Discrete(2)],
            rewards: vec![0.0, 0.0],
            context: ContextSample::Goal(1),
        };
        let cfg = TrainConfig::ddqn_defaults();
        let mut adam = AdamState::new(&agent.params);
        let spec = ActionSpec::Discrete { n: 3 };
        let loss = ddqn_update(
            &mut agent,
            &[ep],
            &spec,
            &cfg,
            &mut adam,
            &Workers::serial(),
        )
        .unwrap();
        // Online ties at zero -> argmax index 0 -> target head gives 0.7.
        // Step 0: y = 0.99 * 0.7, prediction 0; step 1 is done: y = 0.
        let expect = (0.99f64 * 0.7).powi(2) / 2.0;
        assert!(
            (loss - expect).abs() < 1e-12,
            "loss {loss}, expected {expect}"
        );
    }

    #[test]
    fn batch_loss_is_step_weighted_mean_of_singles() {
        let mk = || {
            let e1 = EpisodeRecord {
                observations: vec![vec![0.2, 0.1], vec![0.4, 0.3], vec![0.6, 0.5]],
                actions: vec![Action::Discrete(1), Action::Discrete(0)],
                rewards: vec![0.5, -0.25],
                context: ContextSample::Goal(1),
            };
            let e2 = one_step_episode(2.0);
            (e1, e2)
        };
        let spec = ActionSpec::Discrete { n: 3 };
        let cfg = TrainConfig::ddqn_defaults();
        let loss_of = |eps: &[EpisodeRecord]| {
            let mut agent = agent_2obs_3act(Some(Arch::Mate), 5);
            let mut adam = AdamState::new(&agent.params);
            ddqn_update(&mut agent, eps, &spec, &cfg, &mut adam, &Workers::serial()).unwrap()
        };
        let (e1, e2) = mk();
        let l1 = loss_of(&[e1.clone()]);
        let l2 = loss_of(&[e2.clone()]);
        let l12 = loss_of(&[e1, e2]);
        let expect = (2.0 * l1 + 1.0 * l2) / 3.0;
        assert!(
            (l12 - expect).abs() < 1e-12,
            "batch {l12} vs weighted {expect}"
        );
    }

    #[test]
    fn update_moves_head_and_encoder_and_polyak_tracks() {
        let mut agent = agent_2obs_3act(Some(Arch::Mate), 6);
        let before = agent.params.clone();
        let cfg = TrainConfig::ddqn_defaults();
        let mut adam = AdamState::new(&agent.params);
        let spec = ActionSpec::Discrete { n: 3 };
        // Two steps so that at least one head input contains a non-empty
        // memory (the encoder only gets gradients through those rows).
        let ep = EpisodeRecord {
            observations: vec![vec![0.1, 0.2], vec![0.3, 0.4], vec![0.5, 0.6]],
            actions: vec![Action::Discrete(0), Action::Discrete(2)],
            rewards: vec![0.5, 1.0],
            context: ContextSample::Goal(1),
        };
        ddqn_update(
            &mut agent,
            &[ep],
            &spec,
            &cfg,
            &mut adam,
            &Workers::serial(),
        )
        .unwrap();
        let moved = |name: &str| {
            let id = before.id(name).unwrap();
            before.get(id).as_slice() != agent.params.get(id).as_slice()
        };
        assert!(moved("q/w0"), "online head should move");
        assert!(moved("embed/w"), "memory encoder should move");
        assert!(moved("state/w"), "observation embedding should move");
        // Target head moved only by the Polyak step: qt = (1-tau) qt + tau q.
        let qt0 = before.id("qt/b2").unwrap();
        let q0 = agent.params.id("q/b2").unwrap();
        let expect: Vec<f64> = before
            .get(qt0)
            .as_slice()
            .iter()
            .zip(agent.params.get(q0).as_slice())
            .map(|(&t, &o)| (1.0 - cfg.tau) * t + cfg.tau * o)
            .collect();
        assert_eq!(agent.params.get(qt0).as_slice(), expect.as_slice());
    }

    #[test]
    fn memoryless_agent_ignores_history() {
        let agent = agent_2obs_3act(None, 7);
        assert!(agent.encoder.is_none());
        let w = Workers::serial();
        let q1 = agent.q_values(&vec![0.0; 8], &[0.3, 0.4], &w).unwrap();
        let q2 = agent.q_values(&vec![0.0; 8], &[0.3, 0.4], &w).unwrap();
        assert_eq!(q1, q2);
        assert_eq!(q1.len(), 3);
    }

    #[test]
    fn soft_update_worked_examples() {
        let mut agent = agent_2obs_3act(Some(Arch::Mate), 8);
        let pairs = agent.polyak_pairs();
        let (qt, q) = (
            agent.params.id("qt/w0").unwrap(),
            agent.params.id("q/w0").unwrap(),
        );
        // Targets start as exact copies.
        assert_eq!(
            agent.params.get(qt).as_slice(),
            agent.params.get(q).as_slice()
        );
        // Perturb the online head, then check tau = 0, tau = 1, tau = 0.001.
        let online = agent.params.get(q).clone();
        let mut moved = online.clone();
        for v in moved.as_mut_slice() {
            *v += 1.0;
        }
        agent.params.set(q, moved.clone());
        let frozen = agent.params.get(qt).clone();
        soft_update(&mut agent.params, &pairs, 0.0).unwrap();
        assert_eq!(agent.params.get(qt).as_slice(), frozen.as_slice());
        soft_update(&mut agent.params, &pairs, 0.001).unwrap();
        let expect: Vec<f64> = frozen
            .as_slice()
            .iter()
            .zip(moved.as_slice())
            .map(|(&t, &o)| 0.999 * t + 0.001 * o)
            .collect();
        assert_eq!(agent.params.get(qt).as_slice(), expect.as_slice());
        soft_update(&mut agent.params, &pairs, 1.0).unwrap();
        assert_eq!(agent.params.get(qt).as_slice(), moved.as_slice());
    }

    #[test]
    fn target_lag_shrinks_like_one_minus_tau_to_the_k() {
        // With a frozen online head, the target gap after k Polyak steps is
        // exactly (1 - tau)^k times the initial gap.
        let mut agent = agent_2obs_3act(Some(Arch::Mate), 9);
        let pairs = agent.polyak_pairs();
        let q = agent.params.id("q/b2").unwrap();
        let qt = agent.params.id("qt/b2").unwrap();
        agent.params.set(q, Tensor::vector(vec![1.0, 1.0, 1.0]));
        agent.params.set(qt, Tensor::vector(vec![0.0, 0.0, 0.0]));
        let tau = 0.05;
        let k = 40;
        for _ in 0..k {
            soft_update(&mut agent.params, &pairs, tau).unwrap();
        }
        let gap = 1.0 - agent.params.get(qt).as_slice()[0];
        let expect = (1.0f64 - tau).powi(k);
        assert!(
            (gap - expect).abs() < 1e-9,
            "gap {gap:.12} vs (1-tau)^k {expect:.12}"
        );
    }

    #[test]
    fn rejects_mismatched_action_space() {
        let mut agent = agent_2obs_3act(Some(Arch::Mate), 10);
        let cfg = TrainConfig::ddqn_defaults();
        let mut adam = AdamState::new(&agent.params);
        let bad = ActionSpec::Discrete { n: 4 };
        assert!(matches!(
            ddqn_update(
                &mut agent,
                &[one_step_episode(1.0)],
                &bad,
                &cfg,
                &mut adam,
                &Workers::serial()
            ),
            Err(CoreError::Config(_))
        ));
        let cont = ActionSpec::Continuous {
            dim: 2,
            low: -1.0,
            high: 1.0,
        };
        assert!(matches!(
            ddqn_update(
                &mut agent,
                &[one_step_episode(1.0)],
                &cont,
                &cfg,
                &mut adam,
                &Workers::serial()
            ),
            Err(CoreError::Usage(_))
        ));
    }

    #[test]
    fn gradients_only_touch_trainable_parameters() {
        // The target head must never receive a gradient from the TD loss.
        let mut agent = agent_2obs_3act(Some(Arch::Mate), 11);
        let cfg = TrainConfig::ddqn_defaults();
        let before_qt: Vec<Tensor> = agent
            .q_target
            .param_ids()
            .iter()
            .map(|&id| agent.params.get(id).clone())
            .collect();
        let mut adam = AdamState::new(&agent.params);
        let spec = ActionSpec::Discrete { n: 3 };
        // tau = smallest positive step so the Polyak change is visible but
        // tiny; run with tau = 0 equivalent by checking Adam itself skipped
        // the target head (moments stay empty is internal, so instead verify
        // the post-update target equals exactly the Polyak blend).
        let mut cfg2 = cfg.clone();
        cfg2.tau = 0.25;
        ddqn_update(
            &mut agent,
            &[one_step_episode(1.0)],
            &spec,
            &cfg2,
            &mut adam,
            &Workers::serial(),
        )
        .unwrap();
        for (i, &id) in agent.q_target.param_ids().iter().enumerate() {
            let online = agent.params.get(agent.q_online.param_ids()[i]).clone();
            let expect: Vec<f64> = before_qt[i]
                .as_slice()
                .iter()
                .zip(online.as_slice())
                .map(|(&t, &o)| 0.75 * t + 0.25 * o)
                .collect();
            let got = agent.params.get(id).as_slice();
            for (g, e) in got.iter().zip(&expect) {
                assert!(
                    (g - e).abs() < 1e-15,
                    "target head drifted beyond the Polyak blend"
                );
            }
        }
        // And the Adam step itself never saw the target ids: a second agent
        // updated with tau = 0 keeps its target bit-identical.
        let mut agent2 = agent_2obs_3act(Some(Arch::Mate), 11);
        let before: Vec<Tensor> = agent2
            .q_target
            .param_ids()
            .iter()
            .map(|&id| agent2.params.get(id).clone())
            .collect();
        let mut adam2 = AdamState::new(&agent2.params);
        let mut cfg3 = cfg;
        cfg3.tau = 1e-300; // effectively zero but valid
        ddqn_update(
            &mut agent2,
            &[one_step_episode(1.0)],
            &spec,
            &cfg3,
            &mut adam2,
            &Workers::serial(),
        )
        .unwrap();
        for (i, &id) in agent2.q_target.param_ids().iter().enumerate() {
            let got = agent2.params.get(id).as_slice();
            let prev = before[i].as_slice();
            for (g, p) in got.iter().zip(prev) {
                assert!((g - p).abs() < 1e-12, "target moved without a Polyak step");
            }
        }
    }

    #[test]
    fn q_values_converge_on_a_one_state_bandit() {
        // Tabular-equivalent check: one observation, two actions with fixed
        // rewards 0.3 / 0.7, one-step episodes. The memoryless agent's Q
        // values must converge to the analytic expected rewards.
        let mut cfg_a = DqnAgentConfig::new(None, 4, 2);
        cfg_a.hidden = (32, 32);
        cfg_a.state_dim = 8;
        let mut agent = DqnAgent::new(1, 2, &cfg_a, 13).unwrap();
        let mut cfg = TrainConfig::ddqn_defaults();
        cfg.lr = 1e-3;
        cfg.grad_clip = None;
        let spec = ActionSpec::Discrete { n: 2 };
        let mut adam = AdamState::new(&agent.params);
        let w = Workers::serial();
        let ep = |a: usize, r: f64| EpisodeRecord {
            observations: vec![vec![1.0], vec![1.0]],
            actions: vec![Action::Discrete(a)],
            rewards: vec![r],
            context: ContextSample::Scalar(0.0),
        };
        let mut last = f64::INFINITY;
        for k in 0..3000 {
            last = ddqn_update(
                &mut agent,
                &[ep(0, 0.3), ep(1, 0.7)],
                &spec,
                &cfg,
                &mut adam,
                &w,
            )
            .unwrap();
            if k % 500 == 0 && last < 1e-6 {
                break;
            }
        }
        let q = agent.q_values(&vec![0.0; 4], &[1.0], &w).unwrap();
        assert!(
            (q[0] - 0.3).abs() <= 0.05 && (q[1] - 0.7).abs() <= 0.05,
            "Q values {q:?} did not reach the expected rewards (final loss {last:.2e})"
        );
        // Greedy action is the higher-reward arm.
        assert_eq!(agent.act_greedy(&vec![0.0; 4], &[1.0], &w).unwrap(), 1);
    }

    #[test]
    fn update_is_deterministic_bitwise() {
        let run = || {
            let mut agent = agent_2obs_3act(Some(Arch::Mate), 12);
            let cfg = TrainConfig::ddqn_defaults();
            let mut adam = AdamState::new(&agent.params);
            let spec = ActionSpec::Discrete { n: 3 };
            let mut losses = Vec::new();
            for _ in 0..3 {
                losses.push(
                    ddqn_update(
                        &mut agent,
                        &[one_step_episode(1.0), one_step_episode(-0.5)],
                        &spec,
                        &cfg,
                        &mut adam,
                        &Workers::serial(),
                    )
                    .unwrap(),
                );
            }
            (losses, agent.params)
        };
        let (l1, p1) = run();
        let (l2, p2) = run();
        assert_eq!(l1, l2);
        for id in p1.ids() {
            assert_eq!(p1.get(id).as_slice(), p2.get(id).as_slice());
        }
    }
}
