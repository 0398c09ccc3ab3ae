//! Recurrent baseline: a single LSTM over the embedded transitions, hidden
//! width equal to the memory width, readout = hidden state.

use std::sync::Arc;

use rand::Rng;

use super::{EncoderConfig, RnnState};
use crate::error::Result;
use crate::nn::{seq, xavier_uniform, ParamId, ParamSet, Tape, Tensor, VarId};

#[derive(Debug, Clone)]
pub(crate) struct RnnCore {
    w_ih: ParamId,
    w_hh: ParamId,
    b: ParamId,
}

impl RnnCore {
    pub fn new<R: Rng>(params: &mut ParamSet, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let m = cfg.memory_dim;
        RnnCore {
            w_ih: params.add("mem/w_ih", xavier_uniform(m, 4 * m, rng)),
            w_hh: params.add("mem/w_hh", xavier_uniform(m, 4 * m, rng)),
            b: params.add("mem/b", Tensor::zeros(&[4 * m])),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w_ih, self.w_hh, self.b]
    }

    pub fn step(&self, params: &ParamSet, state: &mut RnnState, e: &[f64]) -> Result<Vec<f64>> {
        let m = state.h.len();
        let mut h_new = vec![0.0; m];
        let mut c_new = vec![0.0; m];
        seq::lstm_cell(
            e,
            &state.h,
            &state.c,
            params.get(self.w_ih),
            params.get(self.w_hh),
            params.get(self.b).as_slice(),
            &mut h_new,
            &mut c_new,
            None,
        );
        state.h = h_new;
        state.c = c_new;
        state.steps += 1;
        Ok(state.h.clone())
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
        let w_ih = bound.var(tape, params, self.w_ih);
        let w_hh = bound.var(tape, params, self.w_hh);
        let b = bound.var(tape, params, self.b);
        let h = tape.lstm(e, w_ih, w_hh, b, Arc::clone(&segs));
        Ok(if with_initial {
            // The empty-history readout is the zero initial hidden state.
            tape.insert_zero_rows(h, segs)
        } else {
            h
        })
    }
}
