//! Small, self-contained research stack for memory-based reinforcement
//! learning in contextual MDPs.
//!
//! The centrepiece is a permutation-invariant *sum memory*: each observed
//! transition is embedded by a shared encoder and the embeddings are summed,
//! so the agent's belief state is a multiset statistic of its history rather
//! than an ordered one. The crate ships that architecture next to two
//! sequence baselines with matched parameter budgets (an LSTM and a causal
//! single-head attention block), exact Bayesian posterior references to test
//! sufficiency claims against, a handful of desk-scale diagnostic
//! environments, double-DQN and SAC trainers built on an in-crate reverse-mode
//! tape, and a timing harness for rollout/update scaling measurements.
//!
//! Everything is `f64` and deterministic: given a master seed and a worker
//! count, training produces bit-identical artifacts across runs.

pub mod bench;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod envs;
pub mod error;
pub mod memory;
pub mod metrics;
pub mod nn;
pub mod posterior;
pub mod rl;
pub mod rundir;
pub mod seeding;

pub use error::{CoreError, Result};
