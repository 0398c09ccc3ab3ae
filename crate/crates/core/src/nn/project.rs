use rand::Rng;

use super::seq;
use super::tape::MIN_PROJECT_NORM;
use super::tensor::Tensor;
use crate::error::{CoreError, Result};

/// Shift a vector by a learned offset and rescale it onto the sphere of
/// radius `scale`: `scale * (x + offset) / |x + offset|`.
///
/// The offset breaks the scale-invariance a bare normalization would have
/// (without it, a multiset and its doubled copy would collapse to the same
/// point), and the fixed radius keeps downstream layers in a stable range
/// regardless of how many summands went into `x`.
pub fn hypersphere_project(x: &[f64], offset: &[f64], scale: f64) -> Result<Vec<f64>> {
    if x.len() != offset.len() {
        return Err(CoreError::Config(format!(
            "hypersphere_project: dimension mismatch ({} vs {})",
            x.len(),
            offset.len()
        )));
    }
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(CoreError::Usage(format!(
            "hypersphere_project: scale must be positive and finite, got {scale}"
        )));
    }
    let mut out = vec![0.0; x.len()];
    let norm = seq::hypersphere_row(x, offset, scale, &mut out);
    if !(norm >= MIN_PROJECT_NORM) {
        return Err(CoreError::Degenerate(format!(
            "hypersphere_project: pre-projection norm {norm:.3e} is below {MIN_PROJECT_NORM:.0e}"
        )));
    }
    Ok(out)
}

/// Standard-normal sample via Box-Muller.
pub fn std_normal<R: Rng>(rng: &mut R) -> f64 {
    // Guard the log: random::<f64>() can return exactly 0.
    let u1: f64 = loop {
        let u = rng.random::<f64>();
        if u > 0.0 {
            break u;
        }
    };
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Initial projection offset: a unit vector with an isotropic random
/// direction (coordinates drawn N(0, 1/m), then normalized).
pub fn offset_init<R: Rng>(dim: usize, rng: &mut R) -> Tensor {
    assert!(dim > 0, "offset_init: dim must be positive");
    let inv_sqrt = 1.0 / (dim as f64).sqrt();
    let mut v: Vec<f64> = (0..dim).map(|_| std_normal(rng) * inv_sqrt).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < MIN_PROJECT_NORM {
        // Astronomically unlikely; fall back to a basis vector.
        v = vec![0.0; dim];
        v[0] = 1.0;
    } else {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    Tensor::vector(v)
}
