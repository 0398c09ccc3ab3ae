//! Reverse-mode autodiff tape over [`Tensor`] values.
//!
//! Ops execute eagerly and record themselves; [`Tape::backward`] walks the
//! record in reverse. The op set is deliberately small and includes a few
//! fused sequence ops (segmented prefix sums, an LSTM, causal attention)
//! so whole batches of variable-length episodes go through the tape as one
//! graph, with per-episode boundaries expressed as segment lengths instead
//! of padding.
//!
//! Shape misuse is a programming error and panics via `assert!`; runtime
//! numeric failures (non-finite gradients, near-zero projection norms)
//! surface as `CoreError`s.

use std::cell::RefCell;
use std::sync::Arc;

use super::act::Activation;
use super::linalg::{self, Workers};
use super::seq;
use super::tensor::Tensor;
use crate::error::{CoreError, Result};

/// Norm below which a hyperspherical projection input counts as degenerate.
pub const MIN_PROJECT_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug, Clone, Copy)]
pub enum Unary {
    Act(Activation),
    Exp,
    Ln,
    Neg,
    Clamp { lo: f64, hi: f64 },
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Act(a) => a.apply(x),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Neg => -x,
            Unary::Clamp { lo, hi } => x.clamp(lo, hi),
        }
    }

    fn grad(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Act(a) => a.grad(x, y),
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Neg => -1.0,
            Unary::Clamp { lo, hi } => {
                if x >= lo && x <= hi {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    /// Elementwise min; gradient follows the smaller operand (first on ties).
    Minimum(VarId, VarId),
    Scale(VarId, f64),
    AddScalar(VarId),
    Unary(VarId, Unary),
    /// Broadcast add of a length-`c` vector to every row of an `N x c` matrix.
    AddRowVec(VarId, VarId),
    /// Per-row sum of an `N x c` matrix, yielding length-`N`.
    RowSums(VarId),
    SumAll(VarId),
    MeanAll(VarId),
    ConcatCols(Vec<VarId>),
    SliceCols { x: VarId, start: usize, len: usize },
    SelectRows { x: VarId, idx: Arc<Vec<usize>> },
    /// `out[i] = x[i, idx[i]]`, yielding length-`N`.
    GatherPerRow { x: VarId, idx: Arc<Vec<usize>> },
    MatMul(VarId, VarId),
    /// Row-wise `scale * (x + offset) / |x + offset|`.
    Hypersphere { x: VarId, offset: VarId, scale: f64 },
    /// Per-segment running row sums; `with_zero` prepends the empty sum.
    SegPrefix { x: VarId, segs: Arc<Vec<usize>>, with_zero: bool },
    /// Insert an all-zero row at the start of each segment.
    InsertZeroRows { x: VarId, segs: Arc<Vec<usize>> },
    LayerNorm { x: VarId, gain: VarId, bias: VarId },
    /// Single-head causal attention within each segment, scale `1/sqrt(dim)`.
    /// Backward recomputes attention weights row by row instead of storing
    /// the `N x N` probability matrix.
    Attention { q: VarId, k: VarId, v: VarId, segs: Arc<Vec<usize>> },
    /// Fused LSTM over segments; hidden/cell state reset to zero at each
    /// segment start. Post-activation gates and cell states are stashed at
    /// forward time for the backward sweep.
    Lstm {
        x: VarId,
        w_ih: VarId,
        w_hh: VarId,
        b: VarId,
        segs: Arc<Vec<usize>>,
        gates: Tensor,
        cells: Tensor,
    },
    /// `out[i] = x[i] + table[idx[i]]` (learned positional rows).
    AddTableRows { x: VarId, table: VarId, idx: Arc<Vec<usize>> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Minimum(..) => "minimum",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Unary(..) => "unary",
            Op::AddRowVec(..) => "add_row_vec",
            Op::RowSums(..) => "row_sums",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::SelectRows { .. } => "select_rows",
            Op::GatherPerRow { .. } => "gather_per_row",
            Op::MatMul(..) => "matmul",
            Op::Hypersphere { .. } => "hypersphere",
            Op::SegPrefix { .. } => "seg_prefix",
            Op::InsertZeroRows { .. } => "insert_zero_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::Lstm { .. } => "lstm",
            Op::AddTableRows { .. } => "add_table_rows",
        }
    }
}

struct Node {
    op: Op,
    value: Arc<Tensor>,
    needs_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by the tape's ids.
#[derive(Debug)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, id: VarId) -> Option<&Tensor> {
        self.slots[id.0].as_ref()
    }
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    workers: Workers,
}

impl Tape {
    pub fn new(workers: Workers) -> Self {
        Tape { nodes: RefCell::new(Vec::new()), workers }
    }

    pub fn workers(&self) -> &Workers {
        &self.workers
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Value of a recorded node (cheap `Arc` clone).
    pub fn value(&self, id: VarId) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id.0].value)
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes.borrow()[id.0].needs_grad
    }

    fn push(&self, op: Op, value: Tensor, needs_grad: bool) -> VarId {
        self.push_arc(op, Arc::new(value), needs_grad)
    }

    fn push_arc(&self, op: Op, value: Arc<Tensor>, needs_grad: bool) -> VarId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value, needs_grad });
        VarId(nodes.len() - 1)
    }

    /// Constant input: participates in the forward pass, receives no gradient.
    pub fn leaf(&self, value: Tensor) -> VarId {
        self.push(Op::Leaf, value, false)
    }

    /// Trainable input; shares storage with the caller's parameter tensor.
    pub fn param(&self, value: Arc<Tensor>) -> VarId {
        self.push_arc(Op::Leaf, value, true)
    }

    // ---- elementwise and broadcast ops ----

    pub fn add(&self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(&vb), "add: shape mismatch");
        let mut out = va.as_ref().clone();
        for (o, &x) in out.as_mut_slice().iter_mut().zip(vb.as_slice()) {
            *o += x;
        }
        self.push(Op::Add(a, b), out, self.needs(a) || self.needs(b))
    }

    pub fn sub(&self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(&vb), "sub: shape mismatch");
        let mut out = va.as_ref().clone();
        for (o, &x) in out.as_mut_slice().iter_mut().zip(vb.as_slice()) {
            *o -= x;
        }
        self.push(Op::Sub(a, b), out, self.needs(a) || self.needs(b))
    }

    pub fn mul(&self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(&vb), "mul: shape mismatch");
        let mut out = va.as_ref().clone();
        for (o, &x) in out.as_mut_slice().iter_mut().zip(vb.as_slice()) {
            *o *= x;
        }
        self.push(Op::Mul(a, b), out, self.needs(a) || self.needs(b))
    }

    pub fn minimum(&self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(&vb), "minimum: shape mismatch");
        let mut out = va.as_ref().clone();
        for (o, &x) in out.as_mut_slice().iter_mut().zip(vb.as_slice()) {
            if x < *o {
                *o = x;
            }
        }
        self.push(Op::Minimum(a, b), out, self.needs(a) || self.needs(b))
    }

    pub fn scale(&self, a: VarId, s: f64) -> VarId {
        let va = self.value(a);
        let mut out = va.as_ref().clone();
        for o in out.as_mut_slice() {
            *o *= s;
        }
        self.push(Op::Scale(a, s), out, self.needs(a))
    }

    pub fn add_scalar(&self, a: VarId, s: f64) -> VarId {
        let va = self.value(a);
        let mut out = va.as_ref().clone();
        for o in out.as_mut_slice() {
            *o += s;
        }
        self.push(Op::AddScalar(a), out, self.needs(a))
    }

    pub fn unary(&self, a: VarId, u: Unary) -> VarId {
        let va = self.value(a);
        let mut out = va.as_ref().clone();
        for o in out.as_mut_slice() {
            *o = u.apply(*o);
        }
        self.push(Op::Unary(a, u), out, self.needs(a))
    }

    pub fn activation(&self, a: VarId, act: Activation) -> VarId {
        self.unary(a, Unary::Act(act))
    }

    pub fn tanh(&self, a: VarId) -> VarId {
        self.activation(a, Activation::Tanh)
    }

    pub fn exp(&self, a: VarId) -> VarId {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&self, a: VarId) -> VarId {
        self.unary(a, Unary::Ln)
    }

    pub fn neg(&self, a: VarId) -> VarId {
        self.unary(a, Unary::Neg)
    }

    pub fn clamp(&self, a: VarId, lo: f64, hi: f64) -> VarId {
        self.unary(a, Unary::Clamp { lo, hi })
    }

    pub fn square(&self, a: VarId) -> VarId {
        self.mul(a, a)
    }

    pub fn add_row_vec(&self, x: VarId, v: VarId) -> VarId {
        let (vx, vv) = (self.value(x), self.value(v));
        assert_eq!(vv.rank(), 1, "add_row_vec: bias must be rank 1");
        assert_eq!(vx.cols(), vv.len(), "add_row_vec: width mismatch");
        let mut out = vx.as_ref().clone();
        let c = out.cols();
        for row in out.as_mut_slice().chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(vv.as_slice()) {
                *o += bv;
            }
        }
        self.push(Op::AddRowVec(x, v), out, self.needs(x) || self.needs(v))
    }

    pub fn row_sums(&self, x: VarId) -> VarId {
        let vx = self.value(x);
        assert_eq!(vx.rank(), 2, "row_sums: rank 2 input required");
        let data: Vec<f64> = (0..vx.rows()).map(|i| vx.row(i).iter().sum()).collect();
        self.push(Op::RowSums(x), Tensor::vector(data), self.needs(x))
    }

    pub fn sum_all(&self, x: VarId) -> VarId {
        let vx = self.value(x);
        let s: f64 = vx.as_slice().iter().sum();
        self.push(Op::SumAll(x), Tensor::scalar(s), self.needs(x))
    }

    pub fn mean_all(&self, x: VarId) -> VarId {
        let vx = self.value(x);
        assert!(!vx.is_empty(), "mean_all: empty tensor");
        let s: f64 = vx.as_slice().iter().sum::<f64>() / vx.len() as f64;
        self.push(Op::MeanAll(x), Tensor::scalar(s), self.needs(x))
    }

    pub fn concat_cols(&self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let vals: Vec<Arc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let rows = vals[0].rows();
        for v in &vals {
            assert_eq!(v.rank(), 2, "concat_cols: rank 2 inputs required");
            assert_eq!(v.rows(), rows, "concat_cols: row count mismatch");
        }
        let total: usize = vals.iter().map(|v| v.cols()).sum();
        let mut out = Tensor::zeros(&[rows, total]);
        for i in 0..rows {
            let orow = out.row_mut(i);
            let mut at = 0;
            for v in &vals {
                let c = v.cols();
                orow[at..at + c].copy_from_slice(v.row(i));
                at += c;
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatCols(parts.to_vec()), out, needs)
    }

    pub fn slice_cols(&self, x: VarId, start: usize, len: usize) -> VarId {
        let vx = self.value(x);
        assert_eq!(vx.rank(), 2, "slice_cols: rank 2 input required");
        assert!(start + len <= vx.cols(), "slice_cols: out of range");
        let mut out = Tensor::zeros(&[vx.rows(), len]);
        for i in 0..vx.rows() {
            out.row_mut(i).copy_from_slice(&vx.row(i)[start..start + len]);
        }
        self.push(Op::SliceCols { x, start, len }, out, self.needs(x))
    }

    pub fn select_rows(&self, x: VarId, idx: Arc<Vec<usize>>) -> VarId {
        let vx = self.value(x);
        assert_eq!(vx.rank(), 2, "select_rows: rank 2 input required");
        let mut out = Tensor::zeros(&[idx.len(), vx.cols()]);
        for (i, &src) in idx.iter().enumerate() {
            assert!(src < vx.rows(), "select_rows: index out of range");
            out.row_mut(i).copy_from_slice(vx.row(src));
        }
        self.push(Op::SelectRows { x, idx }, out, self.needs(x))
    }

    pub fn gather_per_row(&self, x: VarId, idx: Arc<Vec<usize>>) -> VarId {
        let vx = self.value(x);
        assert_eq!(vx.rank(), 2, "gather_per_row: rank 2 input required");
        assert_eq!(vx.rows(), idx.len(), "gather_per_row: one index per row");
        let data: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < vx.cols(), "gather_per_row: column out of range");
                vx.row(i)[j]
            })
            .collect();
        self.push(Op::GatherPerRow { x, idx }, Tensor::vector(data), self.needs(x))
    }

    pub fn matmul(&self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rank(), 2, "matmul: lhs must be rank 2");
        assert_eq!(vb.rank(), 2, "matmul: rhs must be rank 2");
        assert_eq!(va.cols(), vb.rows(), "matmul: inner dimension mismatch");
        let (p, q, r) = (va.rows(), va.cols(), vb.cols());
        let mut out = Tensor::zeros(&[p, r]);
        linalg::matmul_acc(out.as_mut_slice(), va.as_slice(), vb.as_slice(), p, q, r, &self.workers);
        self.push(Op::MatMul(a, b), out, self.needs(a) || self.needs(b))
    }

    // ---- fused row/sequence ops ----

    /// Row-wise hyperspherical projection with trainable offset. Errors if
    /// any row of `x + offset` has norm below [`MIN_PROJECT_NORM`].
    pub fn hypersphere(&self, x: VarId, offset: VarId, scale: f64) -> Result<VarId> {
        let (vx, vo) = (self.value(x), self.value(offset));
        assert_eq!(vo.rank(), 1, "hypersphere: offset must be rank 1");
        assert_eq!(vx.cols(), vo.len(), "hypersphere: width mismatch");
        assert!(scale > 0.0, "hypersphere: scale must be positive");
        let rows = vx.rows();
        let mut out = Tensor::zeros(&[rows, vx.cols()]);
        for i in 0..rows {
            let norm = seq::hypersphere_row(vx.row(i), vo.as_slice(), scale, out.row_mut(i));
            if !(norm >= MIN_PROJECT_NORM) {
                return Err(CoreError::Degenerate(format!(
                    "hypersphere: row {i} has pre-projection norm {norm:.3e}"
                )));
            }
        }
        Ok(self.push(
            Op::Hypersphere { x, offset, scale },
            out,
            self.needs(x) || self.needs(offset),
        ))
    }

    /// Running per-segment row sums. `segs` are the segment lengths and must
    /// sum to the row count. With `with_zero`, each segment's output starts
    /// with an all-zero row (the empty sum), so a segment of length `k`
    /// produces `k + 1` rows.
    pub fn seg_prefix(&self, x: VarId, segs: Arc<Vec<usize>>, with_zero: bool) -> VarId {
        let vx = self.value(x);
        assert_eq!(vx.rank(), 2, "seg_prefix: rank 2 input required");
        assert_eq!(segs.iter().sum::<usize>(), vx.rows(), "seg_prefix: segment lengths must cover rows");
        let c = vx.cols();
        let extra = if with_zero { segs.len() } else { 0 };
        let mut out = Tensor::zeros(&[vx.rows() + extra, c]);
        let mut src = 0;
        let mut dst = 0;
        let mut acc = vec![0.0; c];
        for &len in segs.iter() {
            acc.fill(0.0);
            if with_zero {
                dst += 1; // already zeroed
            }
            for _ in 0..len {
                for (a, &v) in acc.iter_mut().zip(vx.row(src)) {
                    *a += v;
                }
                out.row_mut(dst).copy_from_slice(&acc);
                src += 1;
                dst += 1;
            }
        }
        self.push(Op::SegPrefix { x, segs, with_zero }, out, self.needs(x))
    }

    pub fn insert_zero_rows(&self, x: VarId, segs: Arc<Vec<usize>>) -> VarId {
        let vx = self.value(x);
        assert_eq!(vx.rank(), 2, "insert_zero_rows: rank 2 input required");
        assert_eq!(segs.iter().sum::<usize>(), vx.rows(), "insert_zero_rows: segment lengths must cover rows");
        let mut out = Tensor::zeros(&[vx.rows() + segs.len(), vx.cols()]);
        let mut src = 0;
        let mut dst = 0;
        for &len in segs.iter() {
            dst += 1; // zero row at segment start
            for _ in 0..len {
                out.row_mut(dst).copy_from_slice(vx.row(src));
                src += 1;
                dst += 1;
            }
        }
        self.push(Op::InsertZeroRows { x, segs }, out, self.needs(x))
    }

    pub fn layer_norm(&self, x: VarId, gain: VarId, bias: VarId) -> VarId {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        assert_eq!(vg.rank(), 1, "layer_norm: gain must be rank 1");
        assert!(vg.same_shape(&vb), "layer_norm: gain/bias mismatch");
        assert_eq!(vx.cols(), vg.len(), "layer_norm: width mismatch");
        let mut out = Tensor::zeros(&[vx.rows(), vx.cols()]);
        for i in 0..vx.rows() {
            seq::layer_norm_row(vx.row(i), vg.as_slice(), vb.as_slice(), out.row_mut(i));
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(Op::LayerNorm { x, gain, bias }, out, needs)
    }

    /// Causal single-head attention within each segment. Row `t` of a segment
    /// attends to rows `0..=t` of the same segment with scale `1/sqrt(dim)`.
    pub fn causal_attention(&self, q: VarId, k: VarId, v: VarId, segs: Arc<Vec<usize>>) -> VarId {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        assert!(vq.same_shape(&vk) && vq.same_shape(&vv), "attention: q/k/v shape mismatch");
        assert_eq!(vq.rank(), 2, "attention: rank 2 inputs required");
        assert_eq!(segs.iter().sum::<usize>(), vq.rows(), "attention: segment lengths must cover rows");
        let dim = vq.cols();
        let scale = 1.0 / (dim as f64).sqrt();

        // Row-parallel forward: each output row only reads earlier rows of
        // its own segment. Map every global row to its segment start first.
        let mut seg_start = vec![0usize; vq.rows()];
        let mut at = 0;
        for &len in segs.iter() {
            for i in 0..len {
                seg_start[at + i] = at;
            }
            at += len;
        }
        let mut out = Tensor::zeros(&[vq.rows(), dim]);
        let (qs, ks, vs) = (vq.as_slice(), vk.as_slice(), vv.as_slice());
        self.workers.for_row_chunks(out.as_mut_slice(), dim, |row0, chunk| {
            let mut probs = Vec::new();
            for (local, orow) in chunk.chunks_mut(dim).enumerate() {
                let t = row0 + local;
                let s0 = seg_start[t];
                let t_len = t - s0 + 1;
                seq::attn_row(
                    &qs[t * dim..(t + 1) * dim],
                    &ks[s0 * dim..(s0 + t_len) * dim],
                    &vs[s0 * dim..(s0 + t_len) * dim],
                    t_len,
                    scale,
                    orow,
                    &mut probs,
                );
            }
        });
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(Op::Attention { q, k, v, segs }, out, needs)
    }

    /// Fused LSTM over segments. `x` is `N x n`, weights follow the
    /// input-major `in x 4h` layout of [`seq::lstm_cell`]; output is the
    /// hidden-state row per input row.
    pub fn lstm(&self, x: VarId, w_ih: VarId, w_hh: VarId, b: VarId, segs: Arc<Vec<usize>>) -> VarId {
        let (vx, vwi, vwh, vb) = (self.value(x), self.value(w_ih), self.value(w_hh), self.value(b));
        assert_eq!(vx.rank(), 2, "lstm: rank 2 input required");
        assert_eq!(segs.iter().sum::<usize>(), vx.rows(), "lstm: segment lengths must cover rows");
        assert_eq!(vb.len() % 4, 0, "lstm: bias length must be 4h");
        let h = vb.len() / 4;
        assert_eq!(vwi.shape(), &[vx.cols(), 4 * h], "lstm: w_ih shape mismatch");
        assert_eq!(vwh.shape(), &[h, 4 * h], "lstm: w_hh shape mismatch");

        let n_rows = vx.rows();
        let mut out = Tensor::zeros(&[n_rows, h]);
        let mut gates = Tensor::zeros(&[n_rows, 4 * h]);
        let mut cells = Tensor::zeros(&[n_rows, h]);
        let zero_h = vec![0.0; h];
        let mut row = 0;
        for &len in segs.iter() {
            for i in 0..len {
                let (h_prev, c_prev): (&[f64], &[f64]) = if i == 0 {
                    (&zero_h, &zero_h)
                } else {
                    (out.row(row - 1), cells.row(row - 1))
                };
                // Split borrows: previous rows are read-only, current rows
                // are written. Work around the borrow checker with copies of
                // the short previous rows.
                let hp = h_prev.to_vec();
                let cp = c_prev.to_vec();
                seq::lstm_cell(
                    vx.row(row),
                    &hp,
                    &cp,
                    &vwi,
                    &vwh,
                    vb.as_slice(),
                    out.row_mut(row),
                    cells.row_mut(row),
                    Some(gates.row_mut(row)),
                );
                row += 1;
            }
        }
        let needs = [x, w_ih, w_hh, b].iter().any(|&i| self.needs(i));
        self.push(Op::Lstm { x, w_ih, w_hh, b, segs, gates, cells }, out, needs)
    }

    pub fn add_table_rows(&self, x: VarId, table: VarId, idx: Arc<Vec<usize>>) -> VarId {
        let (vx, vt) = (self.value(x), self.value(table));
        assert_eq!(vx.rank(), 2, "add_table_rows: rank 2 input required");
        assert_eq!(vt.rank(), 2, "add_table_rows: table must be rank 2");
        assert_eq!(vx.rows(), idx.len(), "add_table_rows: one index per row");
        assert_eq!(vx.cols(), vt.cols(), "add_table_rows: width mismatch");
        let mut out = vx.as_ref().clone();
        for (i, &j) in idx.iter().enumerate() {
            assert!(j < vt.rows(), "add_table_rows: table row out of range");
            for (o, &tv) in out.row_mut(i).iter_mut().zip(vt.row(j)) {
                *o += tv;
            }
        }
        let needs = self.needs(x) || self.needs(table);
        self.push(Op::AddTableRows { x, table, idx }, out, needs)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Gradients are accumulated for every
    /// node that (transitively) depends on a trainable leaf; anything else is
    /// skipped. Fails with a usage error if `loss` is not scalar and with a
    /// numeric error naming the offending op if any gradient goes non-finite.
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(CoreError::Usage(format!(
                "backward: loss must be scalar, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.item().is_finite() {
            return Err(CoreError::Numeric(format!(
                "backward: loss value is non-finite ({})",
                lv.item()
            )));
        }

        let mut slots: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Tensor::from_shape(lv.shape().to_vec(), vec![1.0]));

        for i in (0..nodes.len()).rev() {
            if slots[i].is_none() || !nodes[i].needs_grad {
                continue;
            }
            let g = slots[i].take().unwrap();
            for (flat, v) in g.as_slice().iter().enumerate() {
                if !v.is_finite() {
                    return Err(CoreError::Numeric(format!(
                        "backward: non-finite gradient at node {i} ({}) flat index {flat}",
                        nodes[i].op.name()
                    )));
                }
            }
            self.backprop_node(&nodes, i, &g, &mut slots);
            slots[i] = Some(g);
        }
        Ok(Gradients { slots })
    }

    fn backprop_node(&self, nodes: &[Node], i: usize, g: &Tensor, slots: &mut [Option<Tensor>]) {
        let val = |id: VarId| -> &Tensor { &nodes[id.0].value };
        let wants = |id: VarId| -> bool { nodes[id.0].needs_grad };

        // Accumulate `f(dst_slice)` into the gradient slot of `id`.
        macro_rules! into_grad {
            ($id:expr, $f:expr) => {
                if wants($id) {
                    let slot = &mut slots[$id.0];
                    let t = slot.get_or_insert_with(|| Tensor::zeros(val($id).shape()));
                    #[allow(clippy::redundant_closure_call)]
                    ($f)(t);
                }
            };
        }

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                into_grad!(*a, |t: &mut Tensor| add_assign(t, g.as_slice()));
                into_grad!(*b, |t: &mut Tensor| add_assign(t, g.as_slice()));
            }
            Op::Sub(a, b) => {
                into_grad!(*a, |t: &mut Tensor| add_assign(t, g.as_slice()));
                into_grad!(*b, |t: &mut Tensor| sub_assign(t, g.as_slice()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                into_grad!(*a, |t: &mut Tensor| mul_add_assign(t, g.as_slice(), vb.as_slice()));
                into_grad!(*b, |t: &mut Tensor| mul_add_assign(t, g.as_slice(), va.as_slice()));
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                into_grad!(*a, |t: &mut Tensor| {
                    for ((tv, &gv), (&x, &y)) in t
                        .as_mut_slice()
                        .iter_mut()
                        .zip(g.as_slice())
                        .zip(va.as_slice().iter().zip(vb.as_slice()))
                    {
                        if x <= y {
                            *tv += gv;
                        }
                    }
                });
                into_grad!(*b, |t: &mut Tensor| {
                    for ((tv, &gv), (&x, &y)) in t
                        .as_mut_slice()
                        .iter_mut()
                        .zip(g.as_slice())
                        .zip(va.as_slice().iter().zip(vb.as_slice()))
                    {
                        if y < x {
                            *tv += gv;
                        }
                    }
                });
            }
            Op::Scale(a, s) => {
                let s = *s;
                into_grad!(*a, |t: &mut Tensor| {
                    for (tv, &gv) in t.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *tv = s.mul_add(gv, *tv);
                    }
                });
            }
            Op::AddScalar(a) => {
                into_grad!(*a, |t: &mut Tensor| add_assign(t, g.as_slice()));
            }
            Op::Unary(a, u) => {
                let va = val(*a);
                let vy = &nodes[i].value;
                into_grad!(*a, |t: &mut Tensor| {
                    for (((tv, &gv), &x), &y) in t
                        .as_mut_slice()
                        .iter_mut()
                        .zip(g.as_slice())
                        .zip(va.as_slice())
                        .zip(vy.as_slice())
                    {
                        *tv += gv * u.grad(x, y);
                    }
                });
            }
            Op::AddRowVec(x, v) => {
                into_grad!(*x, |t: &mut Tensor| add_assign(t, g.as_slice()));
                let c = val(*v).len();
                into_grad!(*v, |t: &mut Tensor| {
                    for row in g.as_slice().chunks(c) {
                        for (tv, &gv) in t.as_mut_slice().iter_mut().zip(row) {
                            *tv += gv;
                        }
                    }
                });
            }
            Op::RowSums(x) => {
                let c = val(*x).cols();
                into_grad!(*x, |t: &mut Tensor| {
                    for (row, &gv) in t.as_mut_slice().chunks_mut(c).zip(g.as_slice()) {
                        for tv in row {
                            *tv += gv;
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let gv = g.item();
                into_grad!(*x, |t: &mut Tensor| {
                    for tv in t.as_mut_slice() {
                        *tv += gv;
                    }
                });
            }
            Op::MeanAll(x) => {
                let gv = g.item() / val(*x).len() as f64;
                into_grad!(*x, |t: &mut Tensor| {
                    for tv in t.as_mut_slice() {
                        *tv += gv;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if wants(p) {
                        let slot = &mut slots[p.0];
                        let t = slot.get_or_insert_with(|| Tensor::zeros(val(p).shape()));
                        for i_row in 0..g.rows() {
                            let src = &g.row(i_row)[at..at + c];
                            for (tv, &gv) in t.row_mut(i_row).iter_mut().zip(src) {
                                *tv += gv;
                            }
                        }
                    }
                    at += c;
                }
            }
            Op::SliceCols { x, start, len } => {
                let (start, len) = (*start, *len);
                into_grad!(*x, |t: &mut Tensor| {
                    for i_row in 0..g.rows() {
                        let dst = &mut t.row_mut(i_row)[start..start + len];
                        for (tv, &gv) in dst.iter_mut().zip(g.row(i_row)) {
                            *tv += gv;
                        }
                    }
                });
            }
            Op::SelectRows { x, idx } => {
                into_grad!(*x, |t: &mut Tensor| {
                    for (i_row, &src) in idx.iter().enumerate() {
                        for (tv, &gv) in t.row_mut(src).iter_mut().zip(g.row(i_row)) {
                            *tv += gv;
                        }
                    }
                });
            }
            Op::GatherPerRow { x, idx } => {
                into_grad!(*x, |t: &mut Tensor| {
                    for (i_row, &j) in idx.iter().enumerate() {
                        t.row_mut(i_row)[j] += g.as_slice()[i_row];
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (p, q, r) = (va.rows(), va.cols(), vb.cols());
                into_grad!(*a, |t: &mut Tensor| {
                    linalg::matmul_nt_acc(t.as_mut_slice(), g.as_slice(), vb.as_slice(), p, r, q, &self.workers)
                });
                into_grad!(*b, |t: &mut Tensor| {
                    linalg::matmul_tn_acc(t.as_mut_slice(), va.as_slice(), g.as_slice(), p, q, r, &self.workers)
                });
            }
            Op::Hypersphere { x, offset, scale } => {
                // y = s*u/|u| with u = x + psi. du = (s/|u|) (g - u_hat (u_hat . g)).
                let vx = val(*x);
                let vo = val(*offset);
                let scale = *scale;
                let c = vx.cols();
                let mut du_row = vec![0.0; c];
                let (wx, wo) = (wants(*x), wants(*offset));
                if wx {
                    slots[x.0].get_or_insert_with(|| Tensor::zeros(vx.shape()));
                }
                if wo {
                    slots[offset.0].get_or_insert_with(|| Tensor::zeros(vo.shape()));
                }
                for i_row in 0..vx.rows() {
                    let grow = g.row(i_row);
                    // Recompute u and its norm.
                    let xrow = vx.row(i_row);
                    let orow = vo.as_slice();
                    let mut sq = 0.0;
                    for (&xv, &pv) in xrow.iter().zip(orow) {
                        let u = xv + pv;
                        sq = u.mul_add(u, sq);
                    }
                    let norm = sq.sqrt();
                    let mut udotg = 0.0;
                    for ((&xv, &pv), &gv) in xrow.iter().zip(orow).zip(grow) {
                        udotg += (xv + pv) / norm * gv;
                    }
                    let s_over_n = scale / norm;
                    for (j, du) in du_row.iter_mut().enumerate() {
                        let uhat = (xrow[j] + orow[j]) / norm;
                        *du = s_over_n * (grow[j] - uhat * udotg);
                    }
                    if wx {
                        let t = slots[x.0].as_mut().unwrap();
                        for (tv, &dv) in t.row_mut(i_row).iter_mut().zip(&du_row) {
                            *tv += dv;
                        }
                    }
                    if wo {
                        let t = slots[offset.0].as_mut().unwrap();
                        for (tv, &dv) in t.as_mut_slice().iter_mut().zip(&du_row) {
                            *tv += dv;
                        }
                    }
                }
            }
            Op::SegPrefix { x, segs, with_zero } => {
                // d x_i = sum of output grads at positions >= i in the same
                // segment: reversed running sum, skipping the zero row.
                let vx = val(*x);
                let c = vx.cols();
                into_grad!(*x, |t: &mut Tensor| {
                    let mut run = vec![0.0; c];
                    let mut src_end = 0; // input row index one past segment end
                    let mut out_at = 0; // output row index of segment start
                    for &len in segs.iter() {
                        let out_rows = len + usize::from(*with_zero);
                        src_end += len;
                        run.fill(0.0);
                        for k in (0..len).rev() {
                            let g_row = g.row(out_at + out_rows - (len - k));
                            for (rv, &gv) in run.iter_mut().zip(g_row) {
                                *rv += gv;
                            }
                            let dst = t.row_mut(src_end - (len - k));
                            for (tv, &rv) in dst.iter_mut().zip(&run) {
                                *tv += rv;
                            }
                        }
                        out_at += out_rows;
                    }
                });
            }
            Op::InsertZeroRows { x, segs } => {
                into_grad!(*x, |t: &mut Tensor| {
                    let mut src = 0; // row in g (output side)
                    let mut dst = 0; // row in t (input side)
                    for &len in segs.iter() {
                        src += 1; // skip the inserted zero row
                        for _ in 0..len {
                            for (tv, &gv) in t.row_mut(dst).iter_mut().zip(g.row(src)) {
                                *tv += gv;
                            }
                            src += 1;
                            dst += 1;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias } => {
                let vx = val(*x);
                let vg = val(*gain);
                let c = vx.cols();
                let n = c as f64;
                let (wx, wg, wb) = (wants(*x), wants(*gain), wants(*bias));
                if wx {
                    slots[x.0].get_or_insert_with(|| Tensor::zeros(vx.shape()));
                }
                if wg {
                    slots[gain.0].get_or_insert_with(|| Tensor::zeros(vg.shape()));
                }
                if wb {
                    slots[bias.0].get_or_insert_with(|| Tensor::zeros(vg.shape()));
                }
                let mut xhat = vec![0.0; c];
                let mut gg = vec![0.0; c];
                for i_row in 0..vx.rows() {
                    let xrow = vx.row(i_row);
                    let grow = g.row(i_row);
                    let mean = xrow.iter().sum::<f64>() / n;
                    let mut var = 0.0;
                    for &v in xrow {
                        let d = v - mean;
                        var = d.mul_add(d, var);
                    }
                    var /= n;
                    let inv = 1.0 / (var + seq::LN_EPS).sqrt();
                    for (j, xh) in xhat.iter_mut().enumerate() {
                        *xh = (xrow[j] - mean) * inv;
                    }
                    if wx {
                        let gains = vg.as_slice();
                        let mut mean_gg = 0.0;
                        let mut mean_ggx = 0.0;
                        for j in 0..c {
                            gg[j] = grow[j] * gains[j];
                            mean_gg += gg[j];
                            mean_ggx += gg[j] * xhat[j];
                        }
                        mean_gg /= n;
                        mean_ggx /= n;
                        let t = slots[x.0].as_mut().unwrap();
                        let trow = t.row_mut(i_row);
                        for j in 0..c {
                            trow[j] += inv * (gg[j] - mean_gg - xhat[j] * mean_ggx);
                        }
                    }
                    if wg {
                        let t = slots[gain.0].as_mut().unwrap();
                        for (j, tv) in t.as_mut_slice().iter_mut().enumerate() {
                            *tv += grow[j] * xhat[j];
                        }
                    }
                    if wb {
                        let t = slots[bias.0].as_mut().unwrap();
                        for (tv, &gv) in t.as_mut_slice().iter_mut().zip(grow) {
                            *tv += gv;
                        }
                    }
                }
            }
            Op::Attention { q, k, v, segs } => {
                let (vq, vk, vv) = (val(*q), val(*k), val(*v));
                let dim = vq.cols();
                let scale = 1.0 / (dim as f64).sqrt();
                let (wq, wk, wv) = (wants(*q), wants(*k), wants(*v));
                if wq {
                    slots[q.0].get_or_insert_with(|| Tensor::zeros(vq.shape()));
                }
                if wk {
                    slots[k.0].get_or_insert_with(|| Tensor::zeros(vk.shape()));
                }
                if wv {
                    slots[v.0].get_or_insert_with(|| Tensor::zeros(vv.shape()));
                }
                let mut probs = Vec::new();
                let mut scratch = vec![0.0; dim];
                let mut ds = Vec::new();
                let mut seg_at = 0;
                for &len in segs.iter() {
                    for t_loc in 0..len {
                        let t_glob = seg_at + t_loc;
                        let grow = g.row(t_glob);
                        let t_len = t_loc + 1;
                        seq::attn_row(
                            vq.row(t_glob),
                            &vk.as_slice()[seg_at * dim..(seg_at + t_len) * dim],
                            &vv.as_slice()[seg_at * dim..(seg_at + t_len) * dim],
                            t_len,
                            scale,
                            &mut scratch,
                            &mut probs,
                        );
                        ds.clear();
                        ds.resize(t_len, 0.0);
                        let mut p_dot = 0.0;
                        for (j, dsv) in ds.iter_mut().enumerate() {
                            let dp = linalg::dot(vv.row(seg_at + j), grow);
                            *dsv = dp;
                            p_dot += probs[j] * dp;
                        }
                        for (j, dsv) in ds.iter_mut().enumerate() {
                            *dsv = probs[j] * (*dsv - p_dot);
                        }
                        if wq {
                            let t = slots[q.0].as_mut().unwrap();
                            let trow = t.row_mut(t_glob);
                            for (j, &dsv) in ds.iter().enumerate() {
                                linalg::axpy(trow, scale * dsv, vk.row(seg_at + j));
                            }
                        }
                        if wk {
                            let t = slots[k.0].as_mut().unwrap();
                            for (j, &dsv) in ds.iter().enumerate() {
                                linalg::axpy(t.row_mut(seg_at + j), scale * dsv, vq.row(t_glob));
                            }
                        }
                        if wv {
                            let t = slots[v.0].as_mut().unwrap();
                            for (j, &pv) in probs.iter().enumerate() {
                                linalg::axpy(t.row_mut(seg_at + j), pv, grow);
                            }
                        }
                    }
                    seg_at += len;
                }
            }
            Op::Lstm { x, w_ih, w_hh, b, segs, gates, cells } => {
                let vx = val(*x);
                let vwi = val(*w_ih);
                let vwh = val(*w_hh);
                let hy = &nodes[i].value; // hidden states, one row per input row
                let n_in = vx.cols();
                let h = hy.cols();
                let (wx, wwi, wwh, wb) = (wants(*x), wants(*w_ih), wants(*w_hh), wants(*b));
                if wx {
                    slots[x.0].get_or_insert_with(|| Tensor::zeros(vx.shape()));
                }
                if wwi {
                    slots[w_ih.0].get_or_insert_with(|| Tensor::zeros(vwi.shape()));
                }
                if wwh {
                    slots[w_hh.0].get_or_insert_with(|| Tensor::zeros(vwh.shape()));
                }
                if wb {
                    slots[b.0].get_or_insert_with(|| Tensor::zeros(val(*b).shape()));
                }
                let mut dz = vec![0.0; 4 * h];
                let mut dh_carry = vec![0.0; h];
                let mut dc_carry = vec![0.0; h];
                let zero = vec![0.0; h];
                let mut seg_end = vx.rows();
                // Walk segments in reverse so carries never cross a boundary.
                for &len in segs.iter().rev() {
                    let seg_start = seg_end - len;
                    dh_carry.fill(0.0);
                    dc_carry.fill(0.0);
                    for t in (seg_start..seg_end).rev() {
                        let gate = gates.row(t);
                        let c_row = cells.row(t);
                        let (h_prev, c_prev): (&[f64], &[f64]) = if t == seg_start {
                            (&zero, &zero)
                        } else {
                            (hy.row(t - 1), cells.row(t - 1))
                        };
                        let grow = g.row(t);
                        for j in 0..h {
                            let i_g = gate[j];
                            let f_g = gate[h + j];
                            let g_g = gate[2 * h + j];
                            let o_g = gate[3 * h + j];
                            let tc = c_row[j].tanh();
                            let dh = grow[j] + dh_carry[j];
                            let dzo = dh * tc * o_g * (1.0 - o_g);
                            let dc = dc_carry[j] + dh * o_g * (1.0 - tc * tc);
                            let dzf = dc * c_prev[j] * f_g * (1.0 - f_g);
                            let dzi = dc * g_g * i_g * (1.0 - i_g);
                            let dzg = dc * i_g * (1.0 - g_g * g_g);
                            dz[j] = dzi;
                            dz[h + j] = dzf;
                            dz[2 * h + j] = dzg;
                            dz[3 * h + j] = dzo;
                            dc_carry[j] = dc * f_g;
                        }
                        if wb {
                            let t_b = slots[b.0].as_mut().unwrap();
                            add_slice(t_b.as_mut_slice(), &dz);
                        }
                        if wwi {
                            let t_wi = slots[w_ih.0].as_mut().unwrap();
                            let xrow = vx.row(t);
                            for (kk, &xv) in xrow.iter().enumerate() {
                                if xv != 0.0 {
                                    linalg::axpy(t_wi.row_mut(kk), xv, &dz);
                                }
                            }
                        }
                        if wwh {
                            let t_wh = slots[w_hh.0].as_mut().unwrap();
                            for (kk, &hv) in h_prev.iter().enumerate() {
                                if hv != 0.0 {
                                    linalg::axpy(t_wh.row_mut(kk), hv, &dz);
                                }
                            }
                        }
                        if wx {
                            let t_x = slots[x.0].as_mut().unwrap();
                            let trow = t_x.row_mut(t);
                            for (kk, tv) in trow.iter_mut().take(n_in).enumerate() {
                                *tv += linalg::dot(&dz, vwi.row(kk));
                            }
                        }
                        for (kk, dhv) in dh_carry.iter_mut().enumerate() {
                            *dhv = linalg::dot(&dz, vwh.row(kk));
                        }
                    }
                    seg_end = seg_start;
                }
            }
            Op::AddTableRows { x, table, idx } => {
                into_grad!(*x, |t: &mut Tensor| add_assign(t, g.as_slice()));
                into_grad!(*table, |t: &mut Tensor| {
                    for (i_row, &j) in idx.iter().enumerate() {
                        for (tv, &gv) in t.row_mut(j).iter_mut().zip(g.row(i_row)) {
                            *tv += gv;
                        }
                    }
                });
            }
        }
    }
}

fn add_assign(t: &mut Tensor, g: &[f64]) {
    for (tv, &gv) in t.as_mut_slice().iter_mut().zip(g) {
        *tv += gv;
    }
}

fn sub_assign(t: &mut Tensor, g: &[f64]) {
    for (tv, &gv) in t.as_mut_slice().iter_mut().zip(g) {
        *tv -= gv;
    }
}

fn mul_add_assign(t: &mut Tensor, g: &[f64], other: &[f64]) {
    for ((tv, &gv), &ov) in t.as_mut_slice().iter_mut().zip(g).zip(other) {
        *tv = gv.mul_add(ov, *tv);
    }
}

fn add_slice(t: &mut [f64], g: &[f64]) {
    for (tv, &gv) in t.iter_mut().zip(g) {
        *tv += gv;
    }
}
