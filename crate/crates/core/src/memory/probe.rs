//! Empirical injectivity probe for the sum embedding.
//!
//! The claim under test: with readout width at least `2nT + 1` and an
//! analytic non-polynomial activation, the map from a multiset of at most
//! `T` transition vectors in `R^n` to the embedding sum is injective for
//! almost every weight draw. The probe samples pairs of distinct multisets
//! and measures the distance between their unnormalized sums; any pair
//! closer than `tolerance` (relative to the sum norms) counts as a
//! collision.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::{Arch, Encoder, MemoryState, MultisetHistory};
use crate::error::{CoreError, Result};
use crate::nn::{ParamSet, Workers};

#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub trials: usize,
    pub collisions: usize,
    pub min_distance: f64,
    pub memory_dim: usize,
    pub theory_min_dim: usize,
    /// Whether the configured width meets the `2nT + 1` bound.
    pub dim_sufficient: bool,
}

fn random_history<R: Rng>(n: usize, max_len: usize, rng: &mut R) -> MultisetHistory {
    let len = rng.random_range(1..=max_len);
    MultisetHistory::from_rows(
        (0..len)
            .map(|_| (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .collect(),
    )
}

fn summed(encoder: &Encoder, params: &ParamSet, h: &MultisetHistory, w: &Workers) -> Result<Vec<f64>> {
    let mut state = encoder.init_state();
    for row in h.rows() {
        encoder.encode_step(params, &mut state, row, w)?;
    }
    match state {
        MemoryState::Mate(s) => Ok(s.sum),
        _ => unreachable!("probe is gated on the sum architecture"),
    }
}

/// Sample `trials` pairs of distinct multisets and look for embedding-sum
/// collisions. Requires a sum-memory encoder.
pub fn injectivity_probe(
    encoder: &Encoder,
    params: &ParamSet,
    trials: usize,
    tolerance: f64,
    seed: u64,
) -> Result<ProbeReport> {
    if encoder.config().arch != Arch::Mate {
        return Err(CoreError::Usage(
            "injectivity_probe: only the sum memory has an order-free embedding sum".into(),
        ));
    }
    if !(tolerance > 0.0) {
        return Err(CoreError::Usage(format!(
            "injectivity_probe: tolerance must be positive, got {tolerance}"
        )));
    }
    let cfg = encoder.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let workers = Workers::serial();
    let mut min_distance = f64::INFINITY;
    let mut collisions = 0;
    for _ in 0..trials {
        let a = random_history(cfg.input_dim, cfg.horizon, &mut rng);
        let b = loop {
            let cand = random_history(cfg.input_dim, cfg.horizon, &mut rng);
            if !cand.multiset_eq(&a) {
                break cand;
            }
        };
        let sa = summed(encoder, params, &a, &workers)?;
        let sb = summed(encoder, params, &b, &workers)?;
        let dist: f64 = sa
            .iter()
            .zip(&sb)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let norm_a: f64 = sa.iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm_b: f64 = sb.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rel = dist / norm_a.max(norm_b).max(1.0);
        if rel < min_distance {
            min_distance = rel;
        }
        if rel < tolerance {
            collisions += 1;
        }
    }
    Ok(ProbeReport {
        trials,
        collisions,
        min_distance,
        memory_dim: cfg.memory_dim,
        theory_min_dim: cfg.theory_min_dim(),
        dim_sufficient: cfg.memory_dim >= cfg.theory_min_dim(),
    })
}
