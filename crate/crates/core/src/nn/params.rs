use std::collections::HashMap;
use std::sync::Arc;

use super::tape::{Gradients, Tape, VarId};
use super::tensor::Tensor;
use crate::error::{CoreError, Result};

/// Index of one named tensor in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, named collection of trainable tensors.
///
/// This is the single source of truth for model state: modules keep
/// `ParamId`s plus their wiring, optimizers mutate the set in place, and
/// checkpoints serialize it by name. Tensors are `Arc`-shared so binding them
/// into a tape is free; updates go through `Arc::make_mut`, which only copies
/// if a tape from a previous step is still alive.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(Arc::new(value));
        self.by_name.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn arc(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.values[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert!(
            value.same_shape(self.get(id)),
            "set: shape mismatch for `{}`",
            self.names[id.0]
        );
        self.values[id.0] = Arc::new(value);
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v.as_ref()))
    }

    /// Total number of scalar entries across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Copy every value from `other`, matching by name. Shapes must agree;
    /// names present on only one side are reported as errors.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        for (_, name, tensor) in other.iter() {
            let id = self.id(name).ok_or_else(|| {
                CoreError::Checkpoint(format!("unexpected tensor `{name}` in source set"))
            })?;
            if !self.get(id).same_shape(tensor) {
                return Err(CoreError::Checkpoint(format!(
                    "tensor `{name}` shape mismatch: expected {:?}, found {:?}",
                    self.get(id).shape(),
                    tensor.shape()
                )));
            }
            self.set(id, tensor.clone());
        }
        if other.len() != self.len() {
            let missing: Vec<&str> = self
                .names
                .iter()
                .map(|n| n.as_str())
                .filter(|n| other.id(n).is_none())
                .collect();
            return Err(CoreError::Checkpoint(format!(
                "source set is missing tensors: {missing:?}"
            )));
        }
        Ok(())
    }
}

/// Gradient slots parallel to a [`ParamSet`]; `None` means "not touched by
/// the loss", which optimizers treat as skip-this-parameter.
#[derive(Debug, Clone)]
pub struct GradSet {
    slots: Vec<Option<Tensor>>,
}

impl GradSet {
    pub fn zeros_like(params: &ParamSet) -> Self {
        GradSet { slots: vec![None; params.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots[id.index()].as_ref()
    }

    pub fn insert(&mut self, id: ParamId, g: Tensor) {
        match &mut self.slots[id.index()] {
            Some(t) => {
                assert!(t.same_shape(&g), "gradient accumulation shape mismatch");
                for (tv, &gv) in t.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *tv += gv;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    pub fn iter_present(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|t| (ParamId(i), t)))
    }

    pub fn iter_present_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor)> {
        self.slots
            .iter_mut()
            .enumerate()
            .filter_map(|(i, s)| s.as_mut().map(|t| (ParamId(i), t)))
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .map(|t| t.sq_norm())
            .sum::<f64>()
            .sqrt()
    }
}

/// Clip all present gradients jointly to `max_norm` (global Euclidean norm).
/// Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut GradSet, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(CoreError::Usage(format!(
            "clip_gradients: max_norm must be positive, got {max_norm}"
        )));
    }
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(CoreError::Numeric(format!(
            "clip_gradients: global gradient norm is {norm}"
        )));
    }
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, t) in grads.iter_present_mut() {
            for v in t.as_mut_slice() {
                *v *= s;
            }
        }
    }
    Ok(norm)
}

/// Cache of tape bindings for a parameter set: each parameter becomes at most
/// one trainable leaf per tape, so gradients never split across duplicates.
pub struct Bound {
    vars: Vec<Option<VarId>>,
}

impl Bound {
    pub fn new(params: &ParamSet) -> Self {
        Bound { vars: vec![None; params.len()] }
    }

    pub fn var(&mut self, tape: &Tape, params: &ParamSet, id: ParamId) -> VarId {
        *self.vars[id.index()].get_or_insert_with(|| tape.param(params.arc(id)))
    }

    /// Pull the gradients of every bound parameter out of a backward result.
    pub fn grads(&self, params: &ParamSet, grads: &Gradients) -> GradSet {
        let mut out = GradSet::zeros_like(params);
        for (i, v) in self.vars.iter().enumerate() {
            if let Some(var) = v {
                if let Some(g) = grads.wrt(*var) {
                    out.insert(ParamId(i), g.clone());
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::linalg::Workers;

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::vector(vec![0.0]));
        let mut gs = GradSet::zeros_like(&ps);
        gs.insert(a, Tensor::vector(vec![3.0]));
        // second component of the joint vector
        let b = ps.add("b", Tensor::vector(vec![0.0]));
        let mut gs = GradSet::zeros_like(&ps);
        gs.insert(a, Tensor::vector(vec![3.0]));
        gs.insert(b, Tensor::vector(vec![4.0]));
        let pre = clip_gradients(&mut gs, 1.0).unwrap();
        assert_eq!(pre, 5.0);
        assert!((gs.get(a).unwrap().as_slice()[0] - 0.6).abs() < 1e-15);
        assert!((gs.get(b).unwrap().as_slice()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::vector(vec![0.0]));
        let mut gs = GradSet::zeros_like(&ps);
        gs.insert(a, Tensor::vector(vec![0.25]));
        clip_gradients(&mut gs, 1.0).unwrap();
        assert_eq!(gs.get(a).unwrap().as_slice()[0], 0.25);
    }

    #[test]
    fn bound_deduplicates_leaves() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::scalar(2.0));
        let tape = Tape::new(Workers::serial());
        let mut bound = Bound::new(&ps);
        let v1 = bound.var(&tape, &ps, a);
        let v2 = bound.var(&tape, &ps, a);
        assert_eq!(v1, v2);
        // loss = a * a; both uses flow into the same leaf.
        let prod = tape.mul(v1, v2);
        let loss = tape.sum_all(prod);
        let g = tape.backward(loss).unwrap();
        let gs = bound.grads(&ps, &g);
        assert_eq!(gs.get(a).unwrap().as_slice()[0], 4.0);
    }

    #[test]
    fn load_from_reports_name_mismatches() {
        let mut dst = ParamSet::new();
        dst.add("x", Tensor::scalar(0.0));
        let mut src = ParamSet::new();
        src.add("y", Tensor::scalar(1.0));
        let err = dst.load_from(&src).unwrap_err();
        assert!(err.to_string().contains("y"), "{err}");
    }
}
