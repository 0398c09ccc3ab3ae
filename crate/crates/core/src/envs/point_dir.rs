//! Continuous point-mass direction task.
//!
//! The hidden context is a unit vector `d*`; the agent emits a velocity
//! `v ∈ [-1,1]²` each step and is paid the cosine of the angle between `v`
//! and `d*` minus a small effort term, `⟨v, d*⟩/‖v‖ - 0.01‖v‖²`. The position
//! lives in the unit box (moved by `0.1·v`, clipped) and is what the agent
//! observes; the direction only shows up through rewards, so acting well
//! requires remembering reward-action pairs.

use super::{Action, ActionSpec, ContextSample, Environment, StepOutcome};
use crate::error::{CoreError, Result};
use crate::seeding;
use rand::Rng;

const STEP_SCALE: f64 = 0.1;
const EFFORT_COST: f64 = 0.01;
/// Per-step reward of the constant optimal action `v = d*`.
pub const OPTIMAL_STEP_REWARD: f64 = 1.0 - EFFORT_COST;

pub struct PointDir {
    horizon: usize,
    direction: [f64; 2],
    pos: [f64; 2],
    t: usize,
    done: bool,
    started: bool,
}

impl PointDir {
    pub fn new(horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(CoreError::Config("point_dir horizon must be positive".into()));
        }
        Ok(Self {
            horizon,
            direction: [1.0, 0.0],
            pos: [0.0, 0.0],
            t: 0,
            done: true,
            started: false,
        })
    }

    /// The hidden direction; diagnostics and scripted policies only.
    pub fn direction(&self) -> [f64; 2] {
        self.direction
    }
}

impl Environment for PointDir {
    fn name(&self) -> &'static str {
        "point_dir"
    }

    fn obs_dim(&self) -> usize {
        2
    }

    fn action_spec(&self) -> ActionSpec {
        ActionSpec::Continuous { dim: 2, low: -1.0, high: 1.0 }
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&mut self, seed: u64) -> Result<(Vec<f64>, ContextSample)> {
        let mut rng = seeding::rng_for(seed, seeding::SeedStream::Env);
        let theta = rng.random::<f64>() * std::f64::consts::TAU;
        self.direction = [theta.cos(), theta.sin()];
        self.pos = [0.0, 0.0];
        self.t = 0;
        self.done = false;
        self.started = true;
        Ok((self.pos.to_vec(), ContextSample::Direction(self.direction)))
    }

    fn step(&mut self, action: &Action) -> Result<StepOutcome> {
        if !self.started {
            return Err(CoreError::Usage("step called before reset".into()));
        }
        if self.done {
            return Err(CoreError::Usage("step called on a finished episode".into()));
        }
        let raw = action.continuous()?;
        if raw.len() != 2 {
            return Err(CoreError::Usage(format!(
                "point_dir wants 2 action components, got {}",
                raw.len()
            )));
        }
        let v = [raw[0].clamp(-1.0, 1.0), raw[1].clamp(-1.0, 1.0)];
        let speed2 = v[0] * v[0] + v[1] * v[1];
        let speed = speed2.sqrt();
        let align = v[0] * self.direction[0] + v[1] * self.direction[1];
        // Zero action: zero alignment and zero effort, reward exactly 0.
        let reward = if speed > 0.0 { align / speed - EFFORT_COST * speed2 } else { 0.0 };
        for i in 0..2 {
            self.pos[i] = (self.pos[i] + STEP_SCALE * v[i]).clamp(-1.0, 1.0);
        }
        self.t += 1;
        self.done = self.t >= self.horizon;
        Ok(StepOutcome { observation: self.pos.to_vec(), reward, done: self.done })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::collect_episode_with;

    #[test]
    fn reset_hides_the_direction() {
        let mut env = PointDir::new(10).unwrap();
        let (obs, ctx) = env.reset(3).unwrap();
        assert_eq!(obs, vec![0.0, 0.0]);
        let ContextSample::Direction(d) = ctx else { panic!("direction context") };
        assert!((d[0] * d[0] + d[1] * d[1] - 1.0).abs() < 1e-12, "unit vector");
    }

    #[test]
    fn aligned_full_speed_action_is_optimal() {
        let mut env = PointDir::new(100).unwrap();
        env.reset(11).unwrap();
        let d = env.direction();
        let ep = collect_episode_with(&mut env, 11, |_, _| {
            Ok(Action::Continuous(vec![d[0], d[1]]))
        })
        .unwrap();
        let expect = OPTIMAL_STEP_REWARD * ep.len() as f64;
        assert!((ep.total_return() - expect).abs() < 1e-9, "{}", ep.total_return());
        // No single-step reward can beat cos=1 minus zero effort.
        assert!(ep.rewards.iter().all(|r| *r <= 1.0 + 1e-12));
    }

    #[test]
    fn zero_action_pays_zero() {
        let mut env = PointDir::new(5).unwrap();
        env.reset(2).unwrap();
        let out = env.step(&Action::Continuous(vec![0.0, 0.0])).unwrap();
        assert_eq!(out.reward, 0.0);
        assert_eq!(out.observation, vec![0.0, 0.0]);
    }

    #[test]
    fn position_stays_in_the_box_and_tracks_velocity() {
        let mut env = PointDir::new(40).unwrap();
        env.reset(5).unwrap();
        let mut obs = vec![0.0, 0.0];
        for _ in 0..40 {
            let out = env.step(&Action::Continuous(vec![1.0, -1.0])).unwrap();
            obs = out.observation;
            assert!(obs.iter().all(|p| (-1.0..=1.0).contains(p)));
        }
        assert_eq!(obs, vec![1.0, -1.0], "40 steps of 0.1 saturate the box");
        // Out-of-range actions are clamped, not rejected.
        let mut env = PointDir::new(2).unwrap();
        env.reset(5).unwrap();
        let out = env.step(&Action::Continuous(vec![5.0, 0.0])).unwrap();
        assert!((out.observation[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn fixed_seed_reproduces_the_direction() {
        let mut env = PointDir::new(3).unwrap();
        let (_, c1) = env.reset(17).unwrap();
        let (_, c2) = env.reset(17).unwrap();
        assert_eq!(c1, c2);
        let (_, c3) = env.reset(18).unwrap();
        assert_ne!(c1, c3);
    }
}
