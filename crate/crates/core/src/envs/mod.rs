//! Desk-scale contextual-MDP environments.
//!
//! Every environment samples a hidden context at reset and keeps it out of
//! the observation stream except through its own disclosure rules (the
//! T-Maze cue channel, the bandit's noisy rewards, the direction task's
//! reward signal). The context is still recorded on every episode for
//! diagnostics; agent code never reads it.

pub mod gauss_bandit;
pub mod point_dir;
pub mod tmaze;

pub use gauss_bandit::GaussBandit;
pub use point_dir::PointDir;
pub use tmaze::{
    analytic_reference_returns, tmaze_reward, Move, ReferenceReturns, TMaze, TMazeSpec,
    TMazeVariant,
};

use crate::error::{CoreError, Result};

/// Agent-side action: either an index into a finite action set or a small
/// continuous vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    pub fn discrete(&self) -> Result<usize> {
        match self {
            Action::Discrete(a) => Ok(*a),
            Action::Continuous(_) => Err(CoreError::Usage(
                "expected a discrete action, got a continuous one".into(),
            )),
        }
    }

    pub fn continuous(&self) -> Result<&[f64]> {
        match self {
            Action::Continuous(v) => Ok(v),
            Action::Discrete(_) => Err(CoreError::Usage(
                "expected a continuous action, got a discrete one".into(),
            )),
        }
    }

    /// Fixed-width numeric encoding used in transition vectors: one-hot for
    /// discrete actions, the raw components for continuous ones.
    pub fn encode(&self, spec: &ActionSpec) -> Result<Vec<f64>> {
        match (self, spec) {
            (Action::Discrete(a), ActionSpec::Discrete { n }) => {
                if a >= n {
                    return Err(CoreError::Usage(format!(
                        "action {a} outside discrete set of size {n}"
                    )));
                }
                let mut v = vec![0.0; *n];
                v[*a] = 1.0;
                Ok(v)
            }
            (Action::Continuous(v), ActionSpec::Continuous { dim, .. }) => {
                if v.len() != *dim {
                    return Err(CoreError::Usage(format!(
                        "action has {} components, environment wants {dim}",
                        v.len()
                    )));
                }
                Ok(v.clone())
            }
            _ => Err(CoreError::Usage(
                "action kind does not match the environment's action space".into(),
            )),
        }
    }
}

/// Shape of an environment's action space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActionSpec {
    Discrete { n: usize },
    Continuous { dim: usize, low: f64, high: f64 },
}

impl ActionSpec {
    /// Width of [`Action::encode`]'s output.
    pub fn encoded_dim(&self) -> usize {
        match self {
            ActionSpec::Discrete { n } => *n,
            ActionSpec::Continuous { dim, .. } => *dim,
        }
    }
}

/// The hidden context an episode was generated under. Diagnostics only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ContextSample {
    /// T-Maze goal: +1 = upper arm, -1 = lower arm.
    Goal(i8),
    /// Scalar bandit context.
    Scalar(f64),
    /// Unit direction in the plane.
    Direction([f64; 2]),
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// A complete episode: `T+1` observations bracketing `T` actions/rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub context: ContextSample,
}

impl EpisodeRecord {
    /// Number of transitions (= actions = rewards).
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.observations.len() != self.actions.len() + 1 {
            return Err(CoreError::Data(format!(
                "episode has {} observations for {} actions",
                self.observations.len(),
                self.actions.len()
            )));
        }
        if self.rewards.len() != self.actions.len() {
            return Err(CoreError::Data(format!(
                "episode has {} rewards for {} actions",
                self.rewards.len(),
                self.actions.len()
            )));
        }
        let width = self.observations.first().map(|o| o.len()).unwrap_or(0);
        for (i, o) in self.observations.iter().enumerate() {
            if o.len() != width {
                return Err(CoreError::Data(format!(
                    "observation {i} has width {}, expected {width}",
                    o.len()
                )));
            }
            if o.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::Data(format!("observation {i} is not finite")));
            }
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(CoreError::Data("episode contains a non-finite reward".into()));
        }
        Ok(())
    }
}

/// A contextual-MDP environment instance.
///
/// `reset` samples a fresh hidden context and returns the initial
/// observation together with the context (for diagnostics; policies must not
/// look at it). Stepping after `done` is a usage error.
pub trait Environment {
    fn name(&self) -> &'static str;
    fn obs_dim(&self) -> usize;
    fn action_spec(&self) -> ActionSpec;
    fn horizon(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Result<(Vec<f64>, ContextSample)>;
    fn step(&mut self, action: &Action) -> Result<StepOutcome>;
}

/// Environments selectable from a run configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvName {
    TMazePassive,
    TMazeActive,
    GaussBandit,
    PointDir,
}

impl EnvName {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tmaze_passive" => Ok(EnvName::TMazePassive),
            "tmaze_active" => Ok(EnvName::TMazeActive),
            "gauss_bandit" => Ok(EnvName::GaussBandit),
            "point_dir" => Ok(EnvName::PointDir),
            other => Err(CoreError::Config(format!(
                "unknown environment `{other}` (expected tmaze_passive, tmaze_active, gauss_bandit, or point_dir)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EnvName::TMazePassive => "tmaze_passive",
            EnvName::TMazeActive => "tmaze_active",
            EnvName::GaussBandit => "gauss_bandit",
            EnvName::PointDir => "point_dir",
        }
    }
}

/// Build an environment by name. `horizon` is the episode length `T`; the
/// T-Maze derives its corridor length from it.
pub fn make_env(name: EnvName, horizon: usize) -> Result<Box<dyn Environment>> {
    Ok(match name {
        EnvName::TMazePassive => {
            Box::new(TMaze::new(TMazeSpec::from_horizon(TMazeVariant::Passive, horizon)?))
        }
        EnvName::TMazeActive => {
            Box::new(TMaze::new(TMazeSpec::from_horizon(TMazeVariant::Active, horizon)?))
        }
        EnvName::GaussBandit => Box::new(GaussBandit::new(horizon)?),
        EnvName::PointDir => Box::new(PointDir::new(horizon)?),
    })
}

/// Roll one episode under a policy closure `(t, observation) -> Action`.
pub fn collect_episode_with<F>(
    env: &mut dyn Environment,
    seed: u64,
    mut policy: F,
) -> Result<EpisodeRecord>
where
    F: FnMut(usize, &[f64]) -> Result<Action>,
{
    let (obs0, context) = env.reset(seed)?;
    let mut observations = vec![obs0];
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    for t in 0..env.horizon() {
        let action = policy(t, observations.last().unwrap())?;
        let out = env.step(&action)?;
        observations.push(out.observation);
        actions.push(action);
        rewards.push(out.reward);
        if out.done {
            break;
        }
    }
    let record = EpisodeRecord { observations, actions, rewards, context };
    record.validate()?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_encoding() {
        let spec = ActionSpec::Discrete { n: 4 };
        assert_eq!(Action::Discrete(2).encode(&spec).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        assert!(Action::Discrete(4).encode(&spec).is_err());
        assert!(Action::Continuous(vec![0.0]).encode(&spec).is_err());

        let spec = ActionSpec::Continuous { dim: 2, low: -1.0, high: 1.0 };
        assert_eq!(spec.encoded_dim(), 2);
        assert_eq!(
            Action::Continuous(vec![0.25, -1.0]).encode(&spec).unwrap(),
            vec![0.25, -1.0]
        );
        assert!(Action::Continuous(vec![0.25]).encode(&spec).is_err());
    }

    #[test]
    fn episode_validation_catches_mismatches() {
        let mut ep = EpisodeRecord {
            observations: vec![vec![0.0, 0.0], vec![1.0, 0.0]],
            actions: vec![Action::Discrete(0)],
            rewards: vec![0.5],
            context: ContextSample::Goal(1),
        };
        ep.validate().unwrap();
        ep.rewards.push(0.1);
        assert!(ep.validate().is_err());
        ep.rewards.pop();
        ep.observations[1] = vec![f64::NAN, 0.0];
        assert!(ep.validate().is_err());
    }

    #[test]
    fn env_name_round_trip() {
        for name in [
            EnvName::TMazePassive,
            EnvName::TMazeActive,
            EnvName::GaussBandit,
            EnvName::PointDir,
        ] {
            assert_eq!(EnvName::parse(name.as_str()).unwrap(), name);
        }
        assert!(matches!(EnvName::parse("maze"), Err(CoreError::Config(_))));
    }
}
