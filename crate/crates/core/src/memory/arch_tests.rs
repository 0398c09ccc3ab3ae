//! Cross-architecture behavior tests: incremental vs. whole-sequence
//! agreement, permutation invariance (and its deliberate absence in the
//! baselines), and gradient fidelity of full encoder graphs.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::{
    finite_difference_check, rel_l2_diff, Bound, ParamSet, Tape, Tensor, Workers,
};

fn build(arch: Arch, n: usize, m: usize, t: usize, seed: u64) -> (Encoder, ParamSet) {
    let mut ps = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = Encoder::new(&mut ps, EncoderConfig::new(arch, n, m, t), &mut rng).unwrap();
    (enc, ps)
}

fn random_rows(n_rows: usize, width: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n_rows)
        .map(|_| (0..width).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
        .collect()
}

fn stack(rows: &[Vec<f64>]) -> Tensor {
    let width = rows[0].len();
    Tensor::matrix(rows.len(), width, rows.iter().flatten().copied().collect())
}

#[test]
fn step_and_sequence_tape_agree_exactly() {
    // The rollout path and the batched tape path must produce identical
    // readouts, bit for bit, for every architecture.
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for arch in [Arch::Mate, Arch::Rnn, Arch::Attn] {
        let (enc, ps) = build(arch, 5, 8, 12, 101);
        let segs: Vec<usize> = vec![4, 1, 7];
        let all_rows: Vec<Vec<f64>> = random_rows(12, 5, &mut rng);
        let w = Workers::serial();

        // Incremental per episode.
        let mut stepwise: Vec<Vec<f64>> = Vec::new();
        let mut at = 0;
        for &len in &segs {
            let mut state = enc.init_state();
            for row in &all_rows[at..at + len] {
                stepwise.push(enc.encode_step(&ps, &mut state, row, &w).unwrap());
            }
            at += len;
        }

        // Batched tape over the same episodes.
        let tape = Tape::new(Workers::serial());
        let mut bound = Bound::new(&ps);
        let x = tape.leaf(stack(&all_rows));
        let out = enc
            .encode_sequence_tape(&tape, &mut bound, &ps, x, Arc::new(segs.clone()), false)
            .unwrap();
        let v = tape.value(out);
        assert_eq!(v.rows(), stepwise.len());
        for (i, row) in stepwise.iter().enumerate() {
            assert_eq!(v.row(i), row.as_slice(), "{:?} row {i} differs", arch);
        }

        // And encode_sequence is literally the step loop.
        let seq = enc.encode_sequence(&ps, &all_rows[0..4], &w).unwrap();
        assert_eq!(seq.as_slice(), &stepwise[0..4]);
    }
}

#[test]
fn with_initial_prepends_empty_readout() {
    for arch in [Arch::Mate, Arch::Rnn, Arch::Attn] {
        let (enc, ps) = build(arch, 3, 6, 8, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows = random_rows(5, 3, &mut rng);
        let tape = Tape::new(Workers::serial());
        let mut bound = Bound::new(&ps);
        let x = tape.leaf(stack(&rows));
        let out = enc
            .encode_sequence_tape(&tape, &mut bound, &ps, x, Arc::new(vec![2, 3]), true)
            .unwrap();
        let v = tape.value(out);
        assert_eq!(v.rows(), 5 + 2);
        let empty = enc.empty_readout(&ps).unwrap();
        assert_eq!(v.row(0), empty.as_slice(), "{arch:?} initial row");
        assert_eq!(v.row(3), empty.as_slice(), "{arch:?} second segment initial row");
    }
}

#[test]
fn sum_memory_is_permutation_invariant_baselines_are_not() {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let w = Workers::serial();
    for arch in [Arch::Mate, Arch::Rnn, Arch::Attn] {
        let (enc, ps) = build(arch, 4, 9, 32, 201);
        let mut max_rel: f64 = 0.0;
        for _ in 0..20 {
            let len = rng.random_range(2..=32usize);
            let rows = random_rows(len, 4, &mut rng);
            let mut perm: Vec<usize> = (0..len).collect();
            while perm.iter().enumerate().all(|(i, &p)| i == p) {
                perm.shuffle(&mut rng);
            }
            let h = MultisetHistory::from_rows(rows);
            let hp = h.permuted(&perm);
            let a = enc.encode_sequence(&ps, h.rows(), &w).unwrap();
            let b = enc.encode_sequence(&ps, hp.rows(), &w).unwrap();
            let rel = rel_l2_diff(a.last().unwrap(), b.last().unwrap());
            max_rel = max_rel.max(rel);
        }
        match arch {
            Arch::Mate => assert!(
                max_rel <= 1e-12,
                "sum memory must ignore ordering, worst rel diff {max_rel:.3e}"
            ),
            _ => assert!(
                max_rel > 1e-6,
                "{arch:?} is order-aware by design, got worst rel diff {max_rel:.3e}"
            ),
        }
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    // Whole-encoder graphs (embedding through readout) for each
    // architecture, checked against central differences.
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    for arch in [Arch::Mate, Arch::Rnn, Arch::Attn] {
        let (enc, mut ps) = build(arch, 4, 6, 10, 301);
        let rows = random_rows(7, 4, &mut rng);
        let x = stack(&rows);
        let segs = Arc::new(vec![3usize, 4]);
        let weight = {
            let data = (0..(7 + 2) * 6).map(|i| ((i % 11) as f64 - 5.0) * 0.2).collect();
            Tensor::matrix(9, 6, data)
        };
        let ids: Vec<_> = ps.ids().collect();
        let worst = finite_difference_check(&mut ps, &ids, 1e-5, |ps| {
            let tape = Tape::new(Workers::serial());
            let mut bound = Bound::new(ps);
            let xv = tape.leaf(x.clone());
            let out = enc.encode_sequence_tape(&tape, &mut bound, ps, xv, Arc::clone(&segs), true)?;
            let wv = tape.leaf(weight.clone());
            let prod = tape.mul(out, wv);
            let loss = tape.mean_all(prod);
            let value = tape.value(loss).item();
            let grads = tape.backward(loss)?;
            Ok((value, bound.grads(ps, &grads)))
        })
        .unwrap();
        assert!(worst < 1e-6, "{arch:?}: encoder gradient mismatch {worst:.3e}");
    }
}

#[test]
fn horizon_overflow_and_width_mismatch_error() {
    let (enc, ps) = build(Arch::Mate, 3, 5, 2, 1);
    let w = Workers::serial();
    let mut state = enc.init_state();
    let x = vec![0.1, 0.2, 0.3];
    enc.encode_step(&ps, &mut state, &x, &w).unwrap();
    enc.encode_step(&ps, &mut state, &x, &w).unwrap();
    let err = enc.encode_step(&ps, &mut state, &x, &w).unwrap_err();
    assert!(matches!(err, crate::error::CoreError::Usage(_)), "{err:?}");
    let err = enc.encode_step(&ps, &mut enc.init_state(), &[0.1], &w).unwrap_err();
    assert!(matches!(err, crate::error::CoreError::Config(_)), "{err:?}");
}

#[test]
fn probe_passes_at_theory_width_and_reports_thin_width() {
    let (enc, ps) = build(Arch::Mate, 2, 17, 4, 5);
    let report = injectivity_probe(&enc, &ps, 500, 1e-8, 99).unwrap();
    assert_eq!(report.collisions, 0, "collisions at width 2nT+1: {report:?}");
    assert!(report.dim_sufficient);
    assert!(report.min_distance > 1e-8);

    // A width-1 readout cannot separate multisets; the probe must see that.
    let (thin, thin_ps) = build(Arch::Mate, 2, 1, 4, 6);
    let report = injectivity_probe(&thin, &thin_ps, 2000, 1e-8, 99).unwrap();
    assert!(!report.dim_sufficient);
    assert!(
        report.min_distance < 1e-3,
        "a scalar sum should show near-collisions, got {:.3e}",
        report.min_distance
    );
}

#[test]
fn probe_rejects_order_aware_architectures() {
    let (enc, ps) = build(Arch::Rnn, 2, 8, 4, 5);
    assert!(injectivity_probe(&enc, &ps, 10, 1e-8, 1).is_err());
}
