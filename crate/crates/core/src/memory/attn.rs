//! Attention baseline: learned positional rows plus one pre-norm block
//! (layer norm, single-head causal attention, layer norm, feedforward, with
//! residual connections), GPT-style but sized to the memory width. The
//! rollout path keeps a key/value cache so one step costs O(t); every row
//! computation is shared with the tape ops, so rollout and whole-sequence
//! training agree exactly.

use std::sync::Arc;

use rand::Rng;

use super::{AttnCache, EncoderConfig};
use crate::error::Result;
use crate::nn::{seq, std_normal, xavier_uniform, Activation, ParamId, ParamSet, Tape, Tensor, VarId};

#[derive(Debug, Clone)]
pub(crate) struct AttnCore {
    pos: Option<ParamId>,
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
    act: Activation,
    dim: usize,
}

impl AttnCore {
    pub fn new<R: Rng>(params: &mut ParamSet, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let m = cfg.memory_dim;
        let ff = 2 * m;
        let pos = cfg.positional.then(|| {
            let data = (0..cfg.horizon * m).map(|_| 0.02 * std_normal(rng)).collect();
            params.add("mem/pos", Tensor::matrix(cfg.horizon, m, data))
        });
        AttnCore {
            pos,
            ln1_g: params.add("mem/ln1_g", Tensor::from_shape(vec![m], vec![1.0; m])),
            ln1_b: params.add("mem/ln1_b", Tensor::zeros(&[m])),
            wq: params.add("mem/wq", xavier_uniform(m, m, rng)),
            bq: params.add("mem/bq", Tensor::zeros(&[m])),
            wk: params.add("mem/wk", xavier_uniform(m, m, rng)),
            bk: params.add("mem/bk", Tensor::zeros(&[m])),
            wv: params.add("mem/wv", xavier_uniform(m, m, rng)),
            bv: params.add("mem/bv", Tensor::zeros(&[m])),
            wo: params.add("mem/wo", xavier_uniform(m, m, rng)),
            bo: params.add("mem/bo", Tensor::zeros(&[m])),
            ln2_g: params.add("mem/ln2_g", Tensor::from_shape(vec![m], vec![1.0; m])),
            ln2_b: params.add("mem/ln2_b", Tensor::zeros(&[m])),
            ff1_w: params.add("mem/ff1_w", xavier_uniform(m, ff, rng)),
            ff1_b: params.add("mem/ff1_b", Tensor::zeros(&[ff])),
            ff2_w: params.add("mem/ff2_w", xavier_uniform(ff, m, rng)),
            ff2_b: params.add("mem/ff2_b", Tensor::zeros(&[m])),
            act: cfg.activation,
            dim: m,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.ln1_g, self.ln1_b, self.wq, self.bq, self.wk, self.bk, self.wv, self.bv,
            self.wo, self.bo, self.ln2_g, self.ln2_b, self.ff1_w, self.ff1_b, self.ff2_w,
            self.ff2_b,
        ];
        if let Some(p) = self.pos {
            ids.push(p);
        }
        ids
    }

    // Row matvec with bias added after the accumulation, mirroring the
    // batched matmul + bias-broadcast evaluation order.
    fn linear_row(params: &ParamSet, x: &[f64], w: ParamId, b: ParamId, out_dim: usize) -> Vec<f64> {
        let wt = params.get(w);
        let mut out = vec![0.0; out_dim];
        for (k, &xv) in x.iter().enumerate() {
            crate::nn::linalg::axpy(&mut out, xv, wt.row(k));
        }
        for (o, &bv) in out.iter_mut().zip(params.get(b).as_slice()) {
            *o += bv;
        }
        out
    }

    pub fn step(&self, params: &ParamSet, cache: &mut AttnCache, e: &[f64]) -> Result<Vec<f64>> {
        let m = self.dim;
        let t = cache.steps;
        let mut e_pos = e.to_vec();
        if let Some(pos) = self.pos {
            for (v, &pv) in e_pos.iter_mut().zip(params.get(pos).row(t)) {
                *v += pv;
            }
        }
        let mut ln1 = vec![0.0; m];
        seq::layer_norm_row(
            &e_pos,
            params.get(self.ln1_g).as_slice(),
            params.get(self.ln1_b).as_slice(),
            &mut ln1,
        );
        let q = Self::linear_row(params, &ln1, self.wq, self.bq, m);
        let k = Self::linear_row(params, &ln1, self.wk, self.bk, m);
        let v = Self::linear_row(params, &ln1, self.wv, self.bv, m);
        cache.keys.extend_from_slice(&k);
        cache.vals.extend_from_slice(&v);
        cache.steps += 1;

        let mut ctx = vec![0.0; m];
        let mut probs = Vec::new();
        seq::attn_row(
            &q,
            &cache.keys,
            &cache.vals,
            cache.steps,
            1.0 / (m as f64).sqrt(),
            &mut ctx,
            &mut probs,
        );
        let proj = Self::linear_row(params, &ctx, self.wo, self.bo, m);
        let mut u = e_pos;
        for (uv, &pv) in u.iter_mut().zip(&proj) {
            *uv += pv;
        }
        let mut ln2 = vec![0.0; m];
        seq::layer_norm_row(
            &u,
            params.get(self.ln2_g).as_slice(),
            params.get(self.ln2_b).as_slice(),
            &mut ln2,
        );
        let mut hid = Self::linear_row(params, &ln2, self.ff1_w, self.ff1_b, 2 * m);
        for h in hid.iter_mut() {
            *h = self.act.apply(*h);
        }
        let ff = Self::linear_row(params, &hid, self.ff2_w, self.ff2_b, m);
        let mut y = u;
        for (yv, &fv) in y.iter_mut().zip(&ff) {
            *yv += fv;
        }
        Ok(y)
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
        let e_pos = match self.pos {
            Some(pos) => {
                let mut idx = Vec::with_capacity(tape.value(e).rows());
                for &len in segs.iter() {
                    idx.extend(0..len);
                }
                let table = bound.var(tape, params, pos);
                tape.add_table_rows(e, table, Arc::new(idx))
            }
            None => e,
        };
        fn lin(
            tape: &Tape,
            bound: &mut crate::nn::Bound,
            params: &ParamSet,
            w: ParamId,
            b: ParamId,
            x: VarId,
        ) -> VarId {
            let wv = bound.var(tape, params, w);
            let bv = bound.var(tape, params, b);
            tape.add_row_vec(tape.matmul(x, wv), bv)
        }

        let g1 = bound.var(tape, params, self.ln1_g);
        let b1 = bound.var(tape, params, self.ln1_b);
        let ln1 = tape.layer_norm(e_pos, g1, b1);
        let q = lin(tape, bound, params, self.wq, self.bq, ln1);
        let k = lin(tape, bound, params, self.wk, self.bk, ln1);
        let v = lin(tape, bound, params, self.wv, self.bv, ln1);
        let ctx = tape.causal_attention(q, k, v, Arc::clone(&segs));
        let proj = lin(tape, bound, params, self.wo, self.bo, ctx);
        let u = tape.add(e_pos, proj);
        let g2 = bound.var(tape, params, self.ln2_g);
        let bb2 = bound.var(tape, params, self.ln2_b);
        let ln2 = tape.layer_norm(u, g2, bb2);
        let hid_lin = lin(tape, bound, params, self.ff1_w, self.ff1_b, ln2);
        let hid = tape.activation(hid_lin, self.act);
        let ff = lin(tape, bound, params, self.ff2_w, self.ff2_b, hid);
        let y = tape.add(u, ff);
        Ok(if with_initial {
            tape.insert_zero_rows(y, segs)
        } else {
            y
        })
    }
}
