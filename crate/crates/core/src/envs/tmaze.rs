//! T-Maze memory probes.
//!
//! A corridor runs from the oracle cell `O` at x = 0 to a junction `J` at
//! x = L, with goal arms directly above and below `J`. The hidden context is
//! which arm pays out. A cue channel reveals the context only at `O`; in the
//! Active variant the very first observation instead carries the *negated*
//! cue, and the agent must walk left to the oracle before committing.
//!
//! Per-step reward is `1(reached goal) - (1 - dx)/L`: rightward progress is
//! free, stalling costs 1/L, walking left costs 2/L. An episode ends when the
//! agent enters either goal arm or after `T` actions.

use super::{Action, ActionSpec, ContextSample, Environment, EpisodeRecord, StepOutcome};
use crate::error::{CoreError, Result};
use crate::seeding;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TMazeVariant {
    /// Start on the oracle: the first observation already carries the truth,
    /// and the corridor spans L = T - 1.
    Passive,
    /// Start one cell right of the oracle behind a one-step rightward block,
    /// first observation carries the false cue; L = T - 2.
    Active,
}

/// Static description of one maze: variant, horizon `T`, corridor length `L`,
/// and the starting column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TMazeSpec {
    pub variant: TMazeVariant,
    pub horizon: usize,
    pub corridor: usize,
    pub start_x: usize,
}

impl TMazeSpec {
    /// Derive the corridor from the horizon: L = T-1 (passive) or T-2 (active).
    pub fn from_horizon(variant: TMazeVariant, horizon: usize) -> Result<Self> {
        let corridor = match variant {
            TMazeVariant::Passive => horizon.saturating_sub(1),
            TMazeVariant::Active => horizon.saturating_sub(2),
        };
        Self::build(variant, horizon, corridor)
    }

    /// Derive the horizon from the corridor length.
    pub fn from_corridor(variant: TMazeVariant, corridor: usize) -> Result<Self> {
        let horizon = match variant {
            TMazeVariant::Passive => corridor + 1,
            TMazeVariant::Active => corridor + 2,
        };
        Self::build(variant, horizon, corridor)
    }

    fn build(variant: TMazeVariant, horizon: usize, corridor: usize) -> Result<Self> {
        if corridor < 2 {
            return Err(CoreError::Config(format!(
                "T-Maze corridor must be at least 2 cells, got {corridor} (horizon {horizon})"
            )));
        }
        let start_x = match variant {
            TMazeVariant::Passive => 0,
            TMazeVariant::Active => 1,
        };
        Ok(Self { variant, horizon, corridor, start_x })
    }
}

/// The four grid moves. Moves into a wall are no-ops that still pay the
/// stall penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    Left = 0,
    Right = 1,
    Up = 2,
    Down = 3,
}

impl Move {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn action(self) -> Action {
        Action::Discrete(self.index())
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Move::Left),
            1 => Ok(Move::Right),
            2 => Ok(Move::Up),
            3 => Ok(Move::Down),
            _ => Err(CoreError::Usage(format!("T-Maze has 4 moves, got index {i}"))),
        }
    }
}

/// Goal term minus velocity penalty: `1(goal) - (1 - (x_next - x_prev))/L`.
pub fn tmaze_reward(x_prev: usize, x_next: usize, reached_goal: bool, corridor: usize) -> f64 {
    debug_assert!(corridor >= 2);
    let dx = x_next as f64 - x_prev as f64;
    debug_assert!(dx.abs() <= 1.0);
    (reached_goal as u8 as f64) - (1.0 - dx) / corridor as f64
}

pub struct TMaze {
    spec: TMazeSpec,
    x: usize,
    y: i8,
    t: usize,
    goal: i8,
    done: bool,
    started: bool,
}

impl TMaze {
    pub fn new(spec: TMazeSpec) -> Self {
        Self { spec, x: spec.start_x, y: 0, t: 0, goal: 1, done: true, started: false }
    }

    pub fn spec(&self) -> &TMazeSpec {
        &self.spec
    }

    /// Reset with an explicitly chosen goal instead of sampling one. Used by
    /// context-hiding diagnostics that replay the same action sequence under
    /// both contexts.
    pub fn reset_forced(&mut self, goal: i8) -> Result<Vec<f64>> {
        if goal != 1 && goal != -1 {
            return Err(CoreError::Usage(format!("T-Maze goal must be +1 or -1, got {goal}")));
        }
        self.x = self.spec.start_x;
        self.y = 0;
        self.t = 0;
        self.goal = goal;
        self.done = false;
        self.started = true;
        Ok(self.observation())
    }

    fn cue(&self) -> f64 {
        if self.x == 0 && self.y == 0 {
            return self.goal as f64;
        }
        if self.spec.variant == TMazeVariant::Active && self.t == 0 {
            return -(self.goal as f64);
        }
        0.0
    }

    fn observation(&self) -> Vec<f64> {
        vec![self.x as f64 / self.spec.corridor as f64, self.y as f64, self.cue()]
    }
}

impl Environment for TMaze {
    fn name(&self) -> &'static str {
        match self.spec.variant {
            TMazeVariant::Passive => "tmaze_passive",
            TMazeVariant::Active => "tmaze_active",
        }
    }

    fn obs_dim(&self) -> usize {
        3
    }

    fn action_spec(&self) -> ActionSpec {
        ActionSpec::Discrete { n: 4 }
    }

    fn horizon(&self) -> usize {
        self.spec.horizon
    }

    fn reset(&mut self, seed: u64) -> Result<(Vec<f64>, ContextSample)> {
        let mut rng: ChaCha8Rng = seeding::rng_for(seed, seeding::SeedStream::Env);
        let goal = if rng.random::<bool>() { 1 } else { -1 };
        let obs = self.reset_forced(goal)?;
        Ok((obs, ContextSample::Goal(goal)))
    }

    fn step(&mut self, action: &Action) -> Result<StepOutcome> {
        if !self.started {
            return Err(CoreError::Usage("step called before reset".into()));
        }
        if self.done {
            return Err(CoreError::Usage("step called on a finished episode".into()));
        }
        let mv = Move::from_index(action.discrete()?)?;
        let l = self.spec.corridor;
        let x_prev = self.x;
        debug_assert_eq!(self.y, 0, "episodes end on goal entry");
        let at_junction = self.x == l;
        match mv {
            Move::Left => {
                if !at_junction {
                    self.x = self.x.saturating_sub(1);
                }
            }
            Move::Right => {
                let blocked =
                    self.spec.variant == TMazeVariant::Active && self.t == 0;
                if !at_junction && !blocked {
                    self.x += 1;
                }
            }
            Move::Up => {
                if at_junction {
                    self.y = 1;
                }
            }
            Move::Down => {
                if at_junction {
                    self.y = -1;
                }
            }
        }
        let reached_goal = self.y != 0 && self.y == self.goal;
        let reward = tmaze_reward(x_prev, self.x, reached_goal, l);
        self.t += 1;
        self.done = self.y != 0 || self.t >= self.spec.horizon;
        Ok(StepOutcome { observation: self.observation(), reward, done: self.done })
    }
}

/// Exact returns of three reference policies under the implemented reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceReturns {
    /// Walk the oracle route, turn toward the true goal.
    pub optimal: f64,
    /// Walk the same route but guess at the junction (cue-blind agent).
    pub markovian: f64,
    /// Stand still for the whole horizon.
    pub worst: f64,
}

/// Closed-form optimal/markovian returns plus a simulated stay-forever worst
/// case. Optimal is `1 - 1/L` (passive) or `1 - 3/L` (active: the detour to
/// the oracle costs an extra 2/L); the cue-blind variant replaces the goal
/// term with a coin flip; the worst case accrues the stall penalty `T` times.
pub fn analytic_reference_returns(spec: &TMazeSpec) -> ReferenceReturns {
    let l = spec.corridor as f64;
    let detour = match spec.variant {
        TMazeVariant::Passive => 0.0,
        TMazeVariant::Active => 2.0 / l,
    };
    let optimal = 1.0 - 1.0 / l - detour;
    let markovian = 0.5 - 1.0 / l - detour;

    let mut env = TMaze::new(*spec);
    let record = run_script(&mut env, TMazeScript::Stay, 0)
        .expect("stay policy cannot fail on a valid spec");
    ReferenceReturns { optimal, markovian, worst: record.total_return() }
}

/// Hand-written reference policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TMazeScript {
    /// Read the cue at the oracle (detouring left in Active), then walk to
    /// the junction and turn correctly.
    Oracle,
    /// Active only: trust the initial (false) cue but walk the same route.
    FalseCue,
    /// Never move.
    Stay,
}

/// Roll one episode under a reference script.
pub fn run_script(env: &mut TMaze, script: TMazeScript, seed: u64) -> Result<EpisodeRecord> {
    let variant = env.spec().variant;
    let horizon = env.spec().horizon;
    let mut cue = 0.0f64;
    let turn = |cue: f64| -> Result<Action> {
        if cue > 0.0 {
            Ok(Move::Up.action())
        } else if cue < 0.0 {
            Ok(Move::Down.action())
        } else {
            Err(CoreError::Usage("scripted policy never saw a cue".into()))
        }
    };
    super::collect_episode_with(env, seed, move |t, obs| match script {
        TMazeScript::Stay => Ok(Move::Up.action()),
        TMazeScript::Oracle => match variant {
            TMazeVariant::Passive => {
                if t == 0 {
                    cue = obs[2];
                }
                if t + 1 < horizon {
                    Ok(Move::Right.action())
                } else {
                    turn(cue)
                }
            }
            TMazeVariant::Active => {
                if t == 0 {
                    return Ok(Move::Left.action());
                }
                if t == 1 {
                    cue = obs[2];
                }
                if t + 1 < horizon {
                    Ok(Move::Right.action())
                } else {
                    turn(cue)
                }
            }
        },
        TMazeScript::FalseCue => {
            if variant != TMazeVariant::Active {
                return Err(CoreError::Usage(
                    "the false-cue script only makes sense in the Active variant".into(),
                ));
            }
            if t == 0 {
                cue = obs[2];
                return Ok(Move::Left.action());
            }
            if t + 1 < horizon {
                Ok(Move::Right.action())
            } else {
                turn(cue)
            }
        }
    })
}
