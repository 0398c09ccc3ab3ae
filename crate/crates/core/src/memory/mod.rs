//! Memory architectures over transition histories.
//!
//! All three encoders map a stream of transition vectors to a fixed-width
//! belief readout. The sum memory embeds each transition independently and
//! accumulates the embeddings, so its state is a multiset statistic: any
//! reordering of the history yields the same readout, and incremental cost
//! per step is constant. The LSTM and causal-attention baselines consume the
//! same transition vectors through order-aware mixers and exist as matched
//! comparisons.
//!
//! Training never replays sequences step by step: whole batches of episodes
//! run through fused tape ops with per-episode segment lengths, and the
//! incremental `encode_step` path shares the same row kernels, so the two
//! are bit-identical.

mod attn;
mod mate;
mod probe;
mod rnn;

pub use probe::{injectivity_probe, ProbeReport};

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{Activation, Bound, ParamId, ParamSet, Tape, Tensor, VarId, Workers};

/// One transition `(s, a, r, s')` flattened for the encoders:
/// `[prev_obs, action encoding, reward, next_obs]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionVector(pub Vec<f64>);

impl TransitionVector {
    pub fn new(prev_obs: &[f64], action_enc: &[f64], reward: f64, next_obs: &[f64]) -> Self {
        let mut v = Vec::with_capacity(prev_obs.len() + action_enc.len() + 1 + next_obs.len());
        v.extend_from_slice(prev_obs);
        v.extend_from_slice(action_enc);
        v.push(reward);
        v.extend_from_slice(next_obs);
        TransitionVector(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Width of a transition vector for the given observation/action widths.
    pub fn width(obs_dim: usize, action_enc_dim: usize) -> usize {
        2 * obs_dim + action_enc_dim + 1
    }
}

/// A history of transitions treated as a multiset: ordering is bookkeeping,
/// not meaning. Used by invariance tests and the injectivity probe.
#[derive(Debug, Clone, Default)]
pub struct MultisetHistory {
    items: Vec<Vec<f64>>,
}

impl MultisetHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(items: Vec<Vec<f64>>) -> Self {
        MultisetHistory { items }
    }

    pub fn push(&mut self, x: Vec<f64>) {
        self.items.push(x);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.items
    }

    /// Reordered copy; `perm` must be a permutation of `0..len`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.items.len(), "permutation length mismatch");
        MultisetHistory {
            items: perm.iter().map(|&i| self.items[i].clone()).collect(),
        }
    }

    /// Equality as multisets (sorted-row comparison, exact).
    pub fn multiset_eq(&self, other: &Self) -> bool {
        if self.items.len() != other.items.len() {
            return false;
        }
        let key = |rows: &[Vec<f64>]| {
            let mut k: Vec<Vec<u64>> = rows
                .iter()
                .map(|r| r.iter().map(|v| v.to_bits()).collect())
                .collect();
            k.sort();
            k
        };
        key(&self.items) == key(&other.items)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Mate,
    Rnn,
    Attn,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Mate => "mate",
            Arch::Rnn => "rnn",
            Arch::Attn => "attn",
        }
    }
}

/// Static description of an encoder: which architecture, the transition
/// width `input_dim`, the readout width `memory_dim`, and the maximum
/// number of transitions `horizon` it must absorb.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub arch: Arch,
    pub input_dim: usize,
    pub memory_dim: usize,
    pub horizon: usize,
    pub activation: Activation,
    /// Learned absolute positional rows; only meaningful for `attn`.
    pub positional: bool,
}

impl EncoderConfig {
    pub fn new(arch: Arch, input_dim: usize, memory_dim: usize, horizon: usize) -> Self {
        EncoderConfig {
            arch,
            input_dim,
            memory_dim,
            horizon,
            activation: Activation::Tanh,
            positional: arch == Arch::Attn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.memory_dim == 0 || self.horizon == 0 {
            return Err(CoreError::Config(format!(
                "encoder dims must be positive: input_dim {}, memory_dim {}, horizon {}",
                self.input_dim, self.memory_dim, self.horizon
            )));
        }
        if self.positional && self.arch != Arch::Attn {
            return Err(CoreError::Config(format!(
                "positional rows are an attention feature, not valid for `{}`",
                self.arch.name()
            )));
        }
        Ok(())
    }

    /// Readout width that provably suffices for an injective sum embedding
    /// of up-to-`horizon` histories: `2 * n * T + 1`.
    pub fn theory_min_dim(&self) -> usize {
        2 * self.input_dim * self.horizon + 1
    }
}

/// Incremental memory state for rollouts; created by [`Encoder::init_state`].
#[derive(Debug, Clone)]
pub enum MemoryState {
    Mate(MateState),
    Rnn(RnnState),
    Attn(AttnCache),
}

/// Running unnormalized embedding sum.
#[derive(Debug, Clone)]
pub struct MateState {
    pub sum: Vec<f64>,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct RnnState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
    pub steps: usize,
}

/// Cached key/value rows (flat `steps x dim`) for incremental attention.
#[derive(Debug, Clone)]
pub struct AttnCache {
    pub keys: Vec<f64>,
    pub vals: Vec<f64>,
    pub steps: usize,
}

impl MemoryState {
    pub fn steps(&self) -> usize {
        match self {
            MemoryState::Mate(s) => s.steps,
            MemoryState::Rnn(s) => s.steps,
            MemoryState::Attn(s) => s.steps,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Core {
    Mate(mate::MateCore),
    Rnn(rnn::RnnCore),
    Attn(attn::AttnCore),
}

/// A transition-history encoder with parameters living in a shared
/// [`ParamSet`]. Construction registers `embed/*` tensors for the input
/// embedding plus architecture-specific `mem/*` tensors (and `psi`, the
/// projection offset, for the sum memory).
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    embed_w: ParamId,
    embed_b: ParamId,
    core: Core,
}

impl Encoder {
    pub fn new<R: Rng>(params: &mut ParamSet, cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let embed_w = params.add("embed/w", crate::nn::xavier_uniform(cfg.input_dim, cfg.memory_dim, rng));
        let embed_b = params.add("embed/b", Tensor::zeros(&[cfg.memory_dim]));
        let core = match cfg.arch {
            Arch::Mate => Core::Mate(mate::MateCore::new(params, &cfg, rng)),
            Arch::Rnn => Core::Rnn(rnn::RnnCore::new(params, &cfg, rng)),
            Arch::Attn => Core::Attn(attn::AttnCore::new(params, &cfg, rng)),
        };
        Ok(Encoder { cfg, embed_w, embed_b, core })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn memory_dim(&self) -> usize {
        self.cfg.memory_dim
    }

    pub fn input_dim(&self) -> usize {
        self.cfg.input_dim
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embed_w, self.embed_b];
        match &self.core {
            Core::Mate(c) => ids.extend(c.param_ids()),
            Core::Rnn(c) => ids.extend(c.param_ids()),
            Core::Attn(c) => ids.extend(c.param_ids()),
        }
        ids
    }

    pub fn init_state(&self) -> MemoryState {
        let m = self.cfg.memory_dim;
        match &self.core {
            Core::Mate(_) => MemoryState::Mate(MateState { sum: vec![0.0; m], steps: 0 }),
            Core::Rnn(_) => MemoryState::Rnn(RnnState { h: vec![0.0; m], c: vec![0.0; m], steps: 0 }),
            Core::Attn(_) => MemoryState::Attn(AttnCache { keys: Vec::new(), vals: Vec::new(), steps: 0 }),
        }
    }

    /// Readout of the empty history: the projected offset for the sum
    /// memory, zeros for the baselines (no hidden state, nothing cached).
    pub fn empty_readout(&self, params: &ParamSet) -> Result<Vec<f64>> {
        match &self.core {
            Core::Mate(c) => c.readout(params, &vec![0.0; self.cfg.memory_dim]),
            _ => Ok(vec![0.0; self.cfg.memory_dim]),
        }
    }

    /// Absorb one transition and return the new readout.
    pub fn encode_step(
        &self,
        params: &ParamSet,
        state: &mut MemoryState,
        x: &[f64],
        workers: &Workers,
    ) -> Result<Vec<f64>> {
        if x.len() != self.cfg.input_dim {
            return Err(CoreError::Config(format!(
                "encode_step: transition width {} does not match encoder input_dim {}",
                x.len(),
                self.cfg.input_dim
            )));
        }
        if state.steps() >= self.cfg.horizon {
            return Err(CoreError::Usage(format!(
                "encode_step: memory already holds {} transitions, horizon is {}",
                state.steps(),
                self.cfg.horizon
            )));
        }
        let e = self.embed_row(params, x, workers)?;
        let out = match (&self.core, state) {
            (Core::Mate(c), MemoryState::Mate(s)) => c.step(params, s, &e),
            (Core::Rnn(c), MemoryState::Rnn(s)) => c.step(params, s, &e),
            (Core::Attn(c), MemoryState::Attn(s)) => c.step(params, s, &e),
            _ => Err(CoreError::Usage(
                "encode_step: memory state built for a different architecture".into(),
            )),
        }?;
        Tensor::vector(out.clone()).ensure_finite("encode_step readout")?;
        Ok(out)
    }

    /// Encode a whole history from scratch; output `k` is the readout after
    /// `k + 1` transitions. Exactly equivalent to repeated `encode_step`.
    pub fn encode_sequence(
        &self,
        params: &ParamSet,
        xs: &[Vec<f64>],
        workers: &Workers,
    ) -> Result<Vec<Vec<f64>>> {
        if xs.len() > self.cfg.horizon {
            return Err(CoreError::Usage(format!(
                "encode_sequence: {} transitions exceed horizon {}",
                xs.len(),
                self.cfg.horizon
            )));
        }
        let mut state = self.init_state();
        let mut out = Vec::with_capacity(xs.len());
        for x in xs {
            out.push(self.encode_step(params, &mut state, x, workers)?);
        }
        Ok(out)
    }

    /// Whole-batch encoding on a tape. `x` is all transitions of all
    /// episodes stacked as `N x input_dim`; `segs` gives per-episode lengths.
    /// With `with_initial`, each episode contributes a leading row for the
    /// empty memory, so a length-`k` episode yields `k + 1` readout rows
    /// (the row layout the per-timestep heads consume).
    pub fn encode_sequence_tape(
        &self,
        tape: &Tape,
        bound: &mut Bound,
        params: &ParamSet,
        x: VarId,
        segs: Arc<Vec<usize>>,
        with_initial: bool,
    ) -> Result<VarId> {
        let xv = tape.value(x);
        if xv.rank() != 2 || xv.cols() != self.cfg.input_dim {
            return Err(CoreError::Config(format!(
                "encode_sequence_tape: expected N x {} input, got {:?}",
                self.cfg.input_dim,
                xv.shape()
            )));
        }
        if segs.iter().any(|&l| l > self.cfg.horizon) {
            return Err(CoreError::Usage(format!(
                "encode_sequence_tape: a segment exceeds horizon {}",
                self.cfg.horizon
            )));
        }
        let w = bound.var(tape, params, self.embed_w);
        let b = bound.var(tape, params, self.embed_b);
        let lin = tape.matmul(x, w);
        let lin_b = tape.add_row_vec(lin, b);
        let e = match self.cfg.activation {
            Activation::Identity => lin_b,
            act => tape.activation(lin_b, act),
        };
        match &self.core {
            Core::Mate(c) => c.sequence_tape(tape, bound, params, e, segs, with_initial),
            Core::Rnn(c) => c.sequence_tape(tape, bound, params, e, segs, with_initial),
            Core::Attn(c) => c.sequence_tape(tape, bound, params, e, segs, with_initial),
        }
    }

    /// Raw (unnormalized) accumulated state for the sum memory.
    pub fn raw_sum<'s>(&self, state: &'s MemoryState) -> Result<&'s [f64]> {
        match state {
            MemoryState::Mate(s) => Ok(&s.sum),
            _ => Err(CoreError::Usage(
                "raw_sum: only the sum memory exposes an unnormalized state".into(),
            )),
        }
    }

    // Bias is added after the full matvec (not folded into the accumulator)
    // so the floating-point evaluation order matches the batched
    // matmul + bias-broadcast path exactly.
    fn embed_row(&self, params: &ParamSet, x: &[f64], _workers: &Workers) -> Result<Vec<f64>> {
        let m = self.cfg.memory_dim;
        let w = params.get(self.embed_w);
        let b = params.get(self.embed_b);
        let mut e = vec![0.0; m];
        for (k, &xv) in x.iter().enumerate() {
            crate::nn::linalg::axpy(&mut e, xv, w.row(k));
        }
        for (v, &bv) in e.iter_mut().zip(b.as_slice()) {
            *v = self.cfg.activation.apply(*v + bv);
        }
        Ok(e)
    }
}

/// Closed-form encoder for scalar Gaussian evidence with known-variance
/// likelihood: maps one observation to `(mu / sigma2, 1 / sigma2)`. Sums of
/// these two statistics are exactly the information-form posterior update,
/// so a sum memory over them is lossless for this family.
pub fn gaussian_analytic_encoder(mu: f64, sigma2: f64) -> Result<[f64; 2]> {
    if !sigma2.is_finite() || !mu.is_finite() {
        return Err(CoreError::Domain(format!(
            "gaussian_analytic_encoder: non-finite input (mu {mu}, sigma2 {sigma2})"
        )));
    }
    if sigma2 <= 0.0 {
        return Err(CoreError::Domain(format!(
            "gaussian_analytic_encoder: variance must be positive, got {sigma2}"
        )));
    }
    Ok([mu / sigma2, 1.0 / sigma2])
}

/// Invert the hyperspherical readout back to the unnormalized sum, assuming
/// the augmented-coordinate construction: embeddings carry a constant 0 in
/// the last slot and the offset carries a 1 there, so after projection the
/// last coordinate holds exactly the normalization factor. Dividing by it
/// cancels both the norm and the radius, leaving the raw sum.
pub fn recover_unnormalized(m_hat: &[f64]) -> Result<Vec<f64>> {
    if m_hat.len() < 2 {
        return Err(CoreError::Usage(
            "recover_unnormalized: need at least two coordinates (payload + scale slot)".into(),
        ));
    }
    let denom = *m_hat.last().unwrap();
    if denom.abs() < 1e-300 {
        return Err(CoreError::Degenerate(format!(
            "recover_unnormalized: scale slot is {denom:.3e}; nothing to divide by"
        )));
    }
    Ok(m_hat[..m_hat.len() - 1].iter().map(|v| v / denom).collect())
}

/// Forward construction matching [`recover_unnormalized`]: augment a raw sum
/// with the constant slot and project.
pub fn augmented_readout(raw_sum: &[f64], scale: f64) -> Result<Vec<f64>> {
    let mut aug = raw_sum.to_vec();
    aug.push(0.0);
    let mut offset = vec![0.0; raw_sum.len()];
    offset.push(1.0);
    crate::nn::hypersphere_project(&aug, &offset, scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transition_vector_layout() {
        let tv = TransitionVector::new(&[1.0, 2.0], &[0.0, 1.0, 0.0], -0.5, &[3.0, 4.0]);
        assert_eq!(tv.as_slice(), &[1.0, 2.0, 0.0, 1.0, 0.0, -0.5, 3.0, 4.0]);
        assert_eq!(tv.dim(), TransitionVector::width(2, 3));
    }

    #[test]
    fn multiset_equality_ignores_order() {
        let a = MultisetHistory::from_rows(vec![vec![1.0], vec![2.0], vec![1.0]]);
        let b = a.permuted(&[2, 0, 1]);
        assert!(a.multiset_eq(&b));
        let c = MultisetHistory::from_rows(vec![vec![1.0], vec![2.0], vec![2.0]]);
        assert!(!a.multiset_eq(&c));
    }

    #[test]
    fn analytic_gaussian_encoder_is_additive_posterior() {
        // Two observations with the same noise: summed statistics equal the
        // known conjugate-update result.
        let e1 = gaussian_analytic_encoder(1.0, 1.0).unwrap();
        let e2 = gaussian_analytic_encoder(3.0, 1.0).unwrap();
        let sum = [e1[0] + e2[0], e1[1] + e2[1]];
        let post_var = 1.0 / sum[1];
        let post_mean = sum[0] * post_var;
        assert!((post_mean - 2.0).abs() < 1e-15);
        assert!((post_var - 0.5).abs() < 1e-15);
        assert!(gaussian_analytic_encoder(0.0, 0.0).is_err());
        assert!(gaussian_analytic_encoder(0.0, -1.0).is_err());
    }

    #[test]
    fn recovery_round_trip_is_tight() {
        let raw = vec![0.3, -2.0, 14.0, 0.001];
        let readout = augmented_readout(&raw, (5.0f64).sqrt()).unwrap();
        let rec = recover_unnormalized(&readout).unwrap();
        for (a, b) in rec.iter().zip(&raw) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn config_rejects_positional_outside_attn() {
        let mut cfg = EncoderConfig::new(Arch::Mate, 4, 8, 10);
        cfg.positional = true;
        assert!(cfg.validate().is_err());
        assert!(EncoderConfig::new(Arch::Attn, 4, 8, 10).validate().is_ok());
    }

    #[test]
    fn theory_dim_formula() {
        let cfg = EncoderConfig::new(Arch::Mate, 2, 17, 4);
        assert_eq!(cfg.theory_min_dim(), 17);
    }
}

#[cfg(test)]
mod arch_tests;
