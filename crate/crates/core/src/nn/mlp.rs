use rand::Rng;

use super::act::Activation;
use super::linalg::{self, Workers};
use super::params::{Bound, ParamId, ParamSet};
use super::tape::{Tape, VarId};
use super::tensor::Tensor;
use crate::error::{CoreError, Result};

/// Xavier/Glorot uniform draw in `[-a, a]` with `a = sqrt(6 / (in + out))`.
pub fn xavier_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * a)
        .collect();
    Tensor::matrix(rows, cols, data)
}

#[derive(Debug, Clone)]
struct DenseLayer {
    w: ParamId,
    b: ParamId,
    act: Activation,
    in_dim: usize,
    out_dim: usize,
}

/// Fully connected network whose tensors live in a shared [`ParamSet`].
///
/// Weights are `in x out` so a batch forward is `x @ w + b` on row-major
/// batches; biases start at zero, weights at Xavier uniform.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

impl Mlp {
    /// `dims` is `[in, h1, ..., out]`; `acts` has one entry per layer.
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        dims: &[usize],
        acts: &[Activation],
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        assert_eq!(acts.len(), dims.len() - 1, "one activation per layer");
        let layers = dims
            .windows(2)
            .zip(acts)
            .enumerate()
            .map(|(i, (d, &act))| {
                let (in_dim, out_dim) = (d[0], d[1]);
                let w = params.add(&format!("{prefix}/w{i}"), xavier_uniform(in_dim, out_dim, rng));
                let b = params.add(&format!("{prefix}/b{i}"), Tensor::zeros(&[out_dim]));
                DenseLayer { w, b, act, in_dim, out_dim }
            })
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    /// Per-layer `(weights, biases, activation)` views, for callers that
    /// evaluate the network with its parameters held constant.
    pub fn layer_views<'p>(&self, params: &'p ParamSet) -> Vec<(&'p Tensor, &'p Tensor, Activation)> {
        self.layers
            .iter()
            .map(|l| (params.get(l.w), params.get(l.b), l.act))
            .collect()
    }

    /// Plain batched forward pass (no gradient recording).
    pub fn forward(&self, params: &ParamSet, input: &Tensor, workers: &Workers) -> Result<Tensor> {
        if input.rank() != 2 || input.cols() != self.in_dim() {
            return Err(CoreError::Config(format!(
                "mlp forward: expected input of width {}, got shape {:?}",
                self.in_dim(),
                input.shape()
            )));
        }
        let mut x = input.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let w = params.get(layer.w);
            let b = params.get(layer.b);
            let rows = x.rows();
            let mut y = Tensor::zeros(&[rows, layer.out_dim]);
            linalg::matmul_acc(
                y.as_mut_slice(),
                x.as_slice(),
                w.as_slice(),
                rows,
                layer.in_dim,
                layer.out_dim,
                workers,
            );
            for row in y.as_mut_slice().chunks_mut(layer.out_dim) {
                for (v, &bv) in row.iter_mut().zip(b.as_slice()) {
                    *v = layer.act.apply(*v + bv);
                }
            }
            y.ensure_finite(&format!("mlp forward: layer {li} output"))?;
            x = y;
        }
        Ok(x)
    }

    /// Forward pass recorded on a tape; parameters are bound through `bound`
    /// so repeated calls share leaves.
    pub fn forward_tape(
        &self,
        tape: &Tape,
        bound: &mut Bound,
        params: &ParamSet,
        input: VarId,
    ) -> VarId {
        let mut x = input;
        for layer in &self.layers {
            let w = bound.var(tape, params, layer.w);
            let b = bound.var(tape, params, layer.b);
            let z = tape.matmul(x, w);
            let zb = tape.add_row_vec(z, b);
            x = match layer.act {
                Activation::Identity => zb,
                act => tape.activation(zb, act),
            };
        }
        x
    }
}
