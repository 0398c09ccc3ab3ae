//! Scalar Gaussian-evidence bandit.
//!
//! The context is a scalar `c ~ N(0,1)`; every step pays `r ~ N(c, 0.25)`
//! regardless of the action. Nothing about the context reaches the agent
//! except through those noisy rewards, so the exact belief after `t` steps is
//! the conjugate Gaussian posterior — which makes this the environment where
//! the analytic sufficient-statistics encoder can be checked end to end.

use super::{Action, ActionSpec, ContextSample, Environment, StepOutcome};
use crate::error::{CoreError, Result};
use crate::nn::std_normal;
use crate::seeding;
use rand_chacha::ChaCha8Rng;

/// Observation-noise variance (std 0.5), fixed and known to the oracle.
pub const OBS_NOISE_VAR: f64 = 0.25;

pub struct GaussBandit {
    horizon: usize,
    context: f64,
    last_reward: f64,
    t: usize,
    done: bool,
    started: bool,
    rng: Option<ChaCha8Rng>,
}

impl GaussBandit {
    pub fn new(horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(CoreError::Config("bandit horizon must be positive".into()));
        }
        Ok(Self {
            horizon,
            context: 0.0,
            last_reward: 0.0,
            t: 0,
            done: true,
            started: false,
            rng: None,
        })
    }

    fn observation(&self) -> Vec<f64> {
        // Previous reward plus a constant channel so the observation is
        // never the all-zero vector.
        vec![self.last_reward, 1.0]
    }
}

impl Environment for GaussBandit {
    fn name(&self) -> &'static str {
        "gauss_bandit"
    }

    fn obs_dim(&self) -> usize {
        2
    }

    fn action_spec(&self) -> ActionSpec {
        ActionSpec::Continuous { dim: 1, low: -1.0, high: 1.0 }
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&mut self, seed: u64) -> Result<(Vec<f64>, ContextSample)> {
        let mut rng = seeding::rng_for(seed, seeding::SeedStream::Env);
        self.context = std_normal(&mut rng);
        self.rng = Some(rng);
        self.last_reward = 0.0;
        self.t = 0;
        self.done = false;
        self.started = true;
        Ok((self.observation(), ContextSample::Scalar(self.context)))
    }

    fn step(&mut self, action: &Action) -> Result<StepOutcome> {
        if !self.started {
            return Err(CoreError::Usage("step called before reset".into()));
        }
        if self.done {
            return Err(CoreError::Usage("step called on a finished episode".into()));
        }
        action.continuous()?;
        let rng = self.rng.as_mut().expect("rng present after reset");
        let reward = self.context + std_normal(rng) * OBS_NOISE_VAR.sqrt();
        self.last_reward = reward;
        self.t += 1;
        self.done = self.t >= self.horizon;
        Ok(StepOutcome { observation: self.observation(), reward, done: self.done })
    }
}
