use super::params::{GradSet, ParamId, ParamSet};
use crate::error::{CoreError, Result};

/// Largest relative disagreement between analytic and central-difference
/// gradients, over every scalar entry of the listed parameters.
///
/// `f` evaluates the loss (and its analytic gradients) at the current
/// parameter values; only the loss value is used at the perturbed points.
/// The relative error for one entry is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1.0)`.
///
/// The unit floor in the denominator keeps central-difference truncation
/// noise from registering on entries whose true gradient is exactly zero
/// (e.g. a bias that is provably absorbed by a shift-invariant op). It
/// assumes losses are scaled so that interesting gradients are O(1); every
/// check in this crate arranges that.
pub fn finite_difference_check<F>(
    params: &mut ParamSet,
    which: &[ParamId],
    eps: f64,
    mut f: F,
) -> Result<f64>
where
    F: FnMut(&ParamSet) -> Result<(f64, GradSet)>,
{
    if !(eps > 0.0) {
        return Err(CoreError::Usage(format!("finite differences need eps > 0, got {eps}")));
    }
    let (_, analytic) = f(params)?;
    let mut worst: f64 = 0.0;
    for &id in which {
        let n = params.get(id).len();
        for j in 0..n {
            let orig = params.get(id).as_slice()[j];
            params.value_mut(id).as_mut_slice()[j] = orig + eps;
            let (up, _) = f(params)?;
            params.value_mut(id).as_mut_slice()[j] = orig - eps;
            let (down, _) = f(params)?;
            params.value_mut(id).as_mut_slice()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let ana = analytic
                .get(id)
                .map(|t| t.as_slice()[j])
                .unwrap_or(0.0);
            if !numeric.is_finite() || !ana.is_finite() {
                return Err(CoreError::Numeric(format!(
                    "finite differences: non-finite gradient for `{}`[{j}]: numeric {numeric}, analytic {ana}",
                    params.name(id)
                )));
            }
            let rel = (ana - numeric).abs() / ana.abs().max(numeric.abs()).max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    #[test]
    fn quadratic_passes_and_wrong_gradient_fails() {
        // loss = sum(x^2), analytic gradient 2x.
        let mut ps = ParamSet::new();
        let x = ps.add("x", Tensor::vector(vec![0.3, -1.2, 2.0]));
        let good = |ps: &ParamSet| {
            let t = ps.get(ps.id("x").unwrap());
            let loss: f64 = t.as_slice().iter().map(|v| v * v).sum();
            let mut gs = GradSet::zeros_like(ps);
            gs.insert(
                ps.id("x").unwrap(),
                Tensor::vector(t.as_slice().iter().map(|v| 2.0 * v).collect()),
            );
            Ok((loss, gs))
        };
        let worst = finite_difference_check(&mut ps, &[x], 1e-5, good).unwrap();
        assert!(worst < 1e-9, "central differences on a quadratic are near-exact, got {worst}");

        let bad = |ps: &ParamSet| {
            let t = ps.get(ps.id("x").unwrap());
            let loss: f64 = t.as_slice().iter().map(|v| v * v).sum();
            let mut gs = GradSet::zeros_like(ps);
            gs.insert(
                ps.id("x").unwrap(),
                Tensor::vector(t.as_slice().iter().map(|v| 2.0 * v + 0.05).collect()),
            );
            Ok((loss, gs))
        };
        let worst = finite_difference_check(&mut ps, &[x], 1e-5, bad).unwrap();
        assert!(worst > 1e-3, "a biased gradient must be flagged, got {worst}");
    }
}
