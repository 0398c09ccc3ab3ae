use super::params::{GradSet, ParamSet};
use super::tensor::Tensor;
use crate::error::{CoreError, Result};

/// Adam with bias correction. Moment buffers are allocated lazily per
/// parameter the first time that parameter receives a gradient, so one
/// optimizer can serve a set where different steps touch different subsets
/// (e.g. an actor step that leaves critic parameters untouched).
#[derive(Debug, Clone)]
pub struct AdamState {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: vec![None; params.len()],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. Parameters without a gradient entry are skipped
    /// entirely: their values and moments stay bit-identical.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradSet, lr: f64) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(CoreError::Usage(format!(
                "adam: learning rate must be positive, got {lr}"
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, g) in grads.iter_present() {
            g.ensure_finite("adam: gradient")?;
            let (m, v) = self.moments[id.index()]
                .get_or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            if !m.same_shape(g) {
                return Err(CoreError::Usage(format!(
                    "adam: gradient shape changed for `{}`",
                    params.name(id)
                )));
            }
            let theta = params.value_mut(id);
            for (((tv, mv), vv), &gv) in theta
                .as_mut_slice()
                .iter_mut()
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
                .zip(g.as_slice())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *tv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Polyak averaging `target <- (1 - tau) * target + tau * online`, used to
/// keep frozen value targets trailing the online network.
pub fn soft_update(params: &mut ParamSet, pairs: &[(crate::nn::ParamId, crate::nn::ParamId)], tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(CoreError::Usage(format!("soft_update: tau must be in [0, 1], got {tau}")));
    }
    for &(target, online) in pairs {
        if !params.get(target).same_shape(params.get(online)) {
            return Err(CoreError::Usage(format!(
                "soft_update: `{}` and `{}` have different shapes",
                params.name(target),
                params.name(online)
            )));
        }
        let src = params.get(online).clone();
        let dst = params.value_mut(target);
        for (d, &s) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
            *d = (1.0 - tau) * *d + tau * s;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::GradSet;

    #[test]
    fn first_step_moves_by_almost_lr() {
        // With a unit gradient, bias correction makes the very first Adam
        // step equal lr * 1 / (1 + eps).
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::scalar(0.0));
        let mut gs = GradSet::zeros_like(&ps);
        gs.insert(a, Tensor::scalar(1.0));
        let mut adam = AdamState::new(&ps);
        adam.step(&mut ps, &gs, 0.1).unwrap();
        let got = ps.get(a).item();
        assert_eq!(got, -0.09999999900000002);
    }

    #[test]
    fn untouched_parameters_stay_bit_identical() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::scalar(1.5));
        let b = ps.add("b", Tensor::scalar(-2.5));
        let mut gs = GradSet::zeros_like(&ps);
        gs.insert(a, Tensor::scalar(0.3));
        let mut adam = AdamState::new(&ps);
        for _ in 0..7 {
            adam.step(&mut ps, &gs, 0.01).unwrap();
        }
        assert_eq!(ps.get(b).item(), -2.5);
        assert_ne!(ps.get(a).item(), 1.5);
    }

    #[test]
    fn soft_update_single_step() {
        let mut ps = ParamSet::new();
        let online = ps.add("online", Tensor::scalar(1.0));
        let target = ps.add("target", Tensor::scalar(0.0));
        soft_update(&mut ps, &[(target, online)], 0.001).unwrap();
        assert!((ps.get(target).item() - 0.001).abs() < 1e-18);
        assert_eq!(ps.get(online).item(), 1.0);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::scalar(0.0));
        let mut gs = GradSet::zeros_like(&ps);
        gs.insert(a, Tensor::scalar(1.0));
        let mut adam = AdamState::new(&ps);
        assert!(adam.step(&mut ps, &gs, 0.0).is_err());
        assert!(soft_update(&mut ps, &[], -0.1).is_err());
    }
}
