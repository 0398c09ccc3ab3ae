//! Sum memory: per-transition embeddings accumulate into a running sum,
//! and the readout is the hyperspherically projected sum. The projection
//! offset `psi` is trainable; its presence is what keeps histories that
//! differ only by repetition count from collapsing onto one ray.

use std::sync::Arc;

use rand::Rng;

use super::{EncoderConfig, MateState};
use crate::error::Result;
use crate::nn::{offset_init, ParamId, ParamSet, Tape, VarId};

#[derive(Debug, Clone)]
pub(crate) struct MateCore {
    psi: ParamId,
    scale: f64,
}

impl MateCore {
    pub fn new<R: Rng>(params: &mut ParamSet, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let psi = params.add("psi", offset_init(cfg.memory_dim, rng));
        MateCore { psi, scale: (cfg.memory_dim as f64).sqrt() }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.psi]
    }

    pub fn readout(&self, params: &ParamSet, sum: &[f64]) -> Result<Vec<f64>> {
        crate::nn::hypersphere_project(sum, params.get(self.psi).as_slice(), self.scale)
    }

    pub fn step(&self, params: &ParamSet, state: &mut MateState, e: &[f64]) -> Result<Vec<f64>> {
        for (s, &ev) in state.sum.iter_mut().zip(e) {
            *s += ev;
        }
        state.steps += 1;
        self.readout(params, &state.sum)
    }

    pub fn sequence_tape(
        &self,
        tape: &Tape,
        bound: &mut crate::nn::Bound,
        params: &ParamSet,
        e: VarId,
        segs: Arc<Vec<usize>>,
        with_initial: bool,
    ) -> Result<VarId> {
        let sums = tape.seg_prefix(e, segs, with_initial);
        let psi = bound.var(tape, params, self.psi);
        tape.hypersphere(sums, psi, self.scale)
    }
}
