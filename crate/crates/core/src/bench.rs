//! Timing harness for the encoder-complexity claims.
//!
//! Three phases are measured per architecture and sequence length `T`:
//! `rollout_total` (absorbing `T` transitions step by step), `rollout_step`
//! (the cost of the single step at a checkpoint position `t`), and
//! `update_total` (one whole-sequence differentiable encoding plus a dummy
//! scalar loss and backward pass). Inputs are pre-generated outside every
//! timed region; each measurement repeats ≥ 5 times after 2 discarded warmup
//! runs and reports the median and the median absolute deviation.
//!
//! Scaling verdicts come from ordinary least squares on (ln T, ln time):
//! sum-memory and recurrent encoders should fit slope ≈ 1, the causal
//! attention baseline slope ≈ 2.

use std::hint::black_box;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::memory::{Arch, Encoder, EncoderConfig, MemoryState};
use crate::metrics::{fmt_f64, CsvWriter, BENCH_COLUMNS, BENCH_SCHEMA, SCALING_COLUMNS, SCALING_SCHEMA};
use crate::nn::{Bound, ParamSet, Tape, Tensor, Workers};
use crate::seeding::{rng_indexed, SeedStream};

pub const PHASE_ROLLOUT_TOTAL: &str = "rollout_total";
pub const PHASE_ROLLOUT_STEP: &str = "rollout_step";
pub const PHASE_UPDATE_TOTAL: &str = "update_total";

/// Width of the synthetic transition vectors fed to every encoder.
pub const SYNTH_INPUT_DIM: usize = 16;

/// Approximate peak-allocation budget for one update measurement; points
/// whose estimate exceeds it become warning rows instead of timings.
const UPDATE_BYTES_BUDGET: f64 = 3.0e9;

/// One measured (or skipped) benchmark point.
#[derive(Debug, Clone)]
pub struct TimingSample {
    pub arch: &'static str,
    pub phase: &'static str,
    /// Sequence length `T`.
    pub t: usize,
    /// Step position for `rollout_step` rows; 0 for totals.
    pub t_checkpoint: usize,
    /// Episodes per update batch; 1 for rollout phases.
    pub batch: usize,
    pub workers: usize,
    /// Timed repeats (after warmup); 0 marks a skipped warning row.
    pub repeats: usize,
    pub median_ns: f64,
    pub mad_ns: f64,
}

impl TimingSample {
    /// Reduce raw per-run times; the first two runs are warmup and dropped.
    #[allow(clippy::too_many_arguments)]
    pub fn from_runs(
        arch: &'static str,
        phase: &'static str,
        t: usize,
        t_checkpoint: usize,
        batch: usize,
        workers: usize,
        runs_ns: &[f64],
    ) -> Result<Self> {
        if runs_ns.len() < WARMUP_RUNS + 5 {
            return Err(CoreError::Usage(format!(
                "need at least {} runs (2 warmup + 5 timed), got {}",
                WARMUP_RUNS + 5,
                runs_ns.len()
            )));
        }
        let timed = &runs_ns[WARMUP_RUNS..];
        let med = median(timed);
        let deviations: Vec<f64> = timed.iter().map(|&x| (x - med).abs()).collect();
        Ok(TimingSample {
            arch,
            phase,
            t,
            t_checkpoint,
            batch,
            workers,
            repeats: timed.len(),
            median_ns: med,
            mad_ns: median(&deviations),
        })
    }

    /// A warning row for a point that was not measured (e.g. the estimated
    /// allocation would not fit in memory).
    pub fn skipped(
        arch: &'static str,
        phase: &'static str,
        t: usize,
        batch: usize,
        workers: usize,
    ) -> Self {
        TimingSample {
            arch,
            phase,
            t,
            t_checkpoint: 0,
            batch,
            workers,
            repeats: 0,
            median_ns: 0.0,
            mad_ns: 0.0,
        }
    }

    pub fn is_skipped(&self) -> bool {
        self.repeats == 0
    }
}

const WARMUP_RUNS: usize = 2;

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Log-log least-squares fit over (T, median time) with a pass/fail verdict
/// against the architecture's expected exponent window.
#[derive(Debug, Clone)]
pub struct ScalingReport {
    pub arch: &'static str,
    pub phase: &'static str,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub verdict: String,
}

/// Expected log-log slope window for an architecture, any phase.
pub fn expected_slope_window(arch: &str) -> (f64, f64) {
    match arch {
        "attn" => (1.6, 2.4),
        _ => (0.8, 1.2),
    }
}

pub const MIN_R2: f64 = 0.98;

/// Ordinary least squares on (ln T, ln time). Needs ≥ 4 distinct lengths
/// spanning at least 16×, and strictly positive times.
pub fn fit_scaling(
    arch: &'static str,
    phase: &'static str,
    points: &[(usize, f64)],
) -> Result<ScalingReport> {
    let mut distinct: Vec<usize> = points.iter().map(|p| p.0).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 4 {
        return Err(CoreError::Usage(format!(
            "scaling fit for {arch}/{phase}: need ≥ 4 lengths, got {}",
            distinct.len()
        )));
    }
    let (lo, hi) = (distinct[0], distinct[distinct.len() - 1]);
    if hi < lo * 16 {
        return Err(CoreError::Usage(format!(
            "scaling fit for {arch}/{phase}: lengths {lo}..{hi} span less than 16x"
        )));
    }
    if let Some((t, time)) = points.iter().find(|p| !(p.1 > 0.0)) {
        return Err(CoreError::Data(format!(
            "scaling fit for {arch}/{phase}: non-positive time {time} at T={t}"
        )));
    }
    let xs: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    if !slope.is_finite() {
        return Err(CoreError::Numeric(format!(
            "scaling fit for {arch}/{phase}: non-finite slope"
        )));
    }
    let (w_lo, w_hi) = expected_slope_window(arch);
    let verdict = if slope < w_lo || slope > w_hi {
        format!("FAIL(slope {slope:.3} outside [{w_lo}..{w_hi}])")
    } else if r2 < MIN_R2 {
        format!("FAIL(r2 {r2:.4} < {MIN_R2})")
    } else {
        "PASS".to_string()
    };
    Ok(ScalingReport {
        arch,
        phase,
        slope,
        intercept,
        r2,
        verdict,
    })
}

/// Grid settings for a full benchmark run.
#[derive(Debug, Clone)]
pub struct BenchGrid {
    pub lengths: Vec<usize>,
    /// Timed repeats per point (warmups are extra).
    pub repeats: usize,
    /// Episodes per update batch for the linear-cost encoders.
    pub batch: usize,
    /// Memory width `m`.
    pub dim: usize,
    /// Extra worker count for the position-parallel update rows; 1 disables.
    pub workers: usize,
    pub seed: u64,
}

fn build_encoder(arch: Arch, dim: usize, horizon: usize, seed: u64, counter: u64) -> Result<(ParamSet, Encoder)> {
    let mut params = ParamSet::new();
    let mut rng = rng_indexed(seed, SeedStream::Bench, counter);
    let enc = Encoder::new(
        &mut params,
        EncoderConfig::new(arch, SYNTH_INPUT_DIM, dim, horizon),
        &mut rng,
    )?;
    Ok((params, enc))
}

fn synth_rows<R: Rng>(t: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..t)
        .map(|_| (0..SYNTH_INPUT_DIM).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

/// Run `f` enough times that the timed block lasts ≥ 10 µs, returning the
/// average nanoseconds per call. `prepare` builds the per-call state outside
/// the timed region.
fn time_adaptive<S>(mut prepare: impl FnMut(usize) -> Vec<S>, mut f: impl FnMut(&mut S)) -> f64 {
    let mut calls = 1usize;
    loop {
        let mut states = prepare(calls);
        let start = Instant::now();
        for s in &mut states {
            f(s);
        }
        let ns = start.elapsed().as_nanos() as f64;
        if ns >= 10_000.0 || calls >= (1 << 20) {
            return ns / calls as f64;
        }
        calls *= 8;
    }
}

/// Time a full `T`-step rollout plus the per-step cost at `t ∈ {T/16, T/4, T}`.
pub fn time_rollout(
    arch: Arch,
    t_len: usize,
    dim: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<TimingSample>> {
    if t_len < 16 {
        return Err(CoreError::Usage(format!(
            "rollout benchmark needs T >= 16 for the per-step checkpoints, got {t_len}"
        )));
    }
    let (params, enc) = build_encoder(arch, dim, t_len, seed, t_len as u64)?;
    let mut rng = rng_indexed(seed, SeedStream::Bench, 1_000_000 + t_len as u64);
    let rows = synth_rows(t_len, &mut rng);
    let workers = Workers::serial();

    // Total rollout time.
    let mut total_runs = Vec::with_capacity(WARMUP_RUNS + repeats);
    for _ in 0..WARMUP_RUNS + repeats {
        let ns = time_adaptive(
            |calls| (0..calls).map(|_| enc.init_state()).collect::<Vec<MemoryState>>(),
            |state| {
                for x in &rows {
                    black_box(enc.encode_step(&params, state, x, &workers).expect("encode"));
                }
            },
        );
        total_runs.push(ns);
    }
    let mut out = vec![TimingSample::from_runs(
        arch.name(),
        PHASE_ROLLOUT_TOTAL,
        t_len,
        0,
        1,
        1,
        &total_runs,
    )?];

    // Per-step cost at the checkpoints: advance to t-1 once (untimed), then
    // time the single step from pre-cloned states.
    for t in [t_len / 16, t_len / 4, t_len] {
        let mut state = enc.init_state();
        for x in rows.iter().take(t - 1) {
            enc.encode_step(&params, &mut state, x, &workers)?;
        }
        let x_t = &rows[t - 1];
        let mut runs = Vec::with_capacity(WARMUP_RUNS + repeats);
        for _ in 0..WARMUP_RUNS + repeats {
            let ns = time_adaptive(
                |calls| vec![state.clone(); calls],
                |s| {
                    black_box(enc.encode_step(&params, s, x_t, &workers).expect("encode"));
                },
            );
            runs.push(ns);
        }
        out.push(TimingSample::from_runs(
            arch.name(),
            PHASE_ROLLOUT_STEP,
            t_len,
            t,
            1,
            1,
            &runs,
        )?);
    }
    Ok(out)
}

/// Rough peak-allocation estimate for one differentiable encoding.
fn update_bytes_estimate(arch: Arch, t: usize, batch: usize, dim: usize) -> f64 {
    let per_episode = match arch {
        // Attention materializes pairwise score/probability matrices plus
        // their gradients.
        Arch::Attn => 4.0 * (t as f64) * (t as f64) * 8.0,
        _ => 8.0 * (t as f64) * (dim as f64) * 8.0,
    };
    per_episode * batch as f64
}

/// Episodes per update batch an architecture can afford at length `t`.
pub fn update_batch_for(arch: Arch, t_max: usize, batch: usize, dim: usize) -> usize {
    let mut b = batch.max(1);
    while b > 1 && update_bytes_estimate(arch, t_max, b, dim) > UPDATE_BYTES_BUDGET {
        b /= 2;
    }
    b
}

/// Time one whole-batch differentiable encoding: forward through the
/// sequence encoder, a mean-readout dummy loss, and the backward pass.
pub fn time_update(
    arch: Arch,
    t_len: usize,
    batch: usize,
    dim: usize,
    repeats: usize,
    workers: &Workers,
    seed: u64,
) -> Result<TimingSample> {
    if update_bytes_estimate(arch, t_len, batch, dim) > UPDATE_BYTES_BUDGET {
        return Ok(TimingSample::skipped(
            arch.name(),
            PHASE_UPDATE_TOTAL,
            t_len,
            batch,
            workers.count(),
        ));
    }
    let (params, enc) = build_encoder(arch, dim, t_len, seed, 2_000_000 + t_len as u64)?;
    let mut rng = rng_indexed(seed, SeedStream::Bench, 3_000_000 + t_len as u64);
    let mut data = Tensor::zeros(&[batch * t_len, SYNTH_INPUT_DIM]);
    for i in 0..batch * t_len {
        for v in data.row_mut(i) {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    let segs = Arc::new(vec![t_len; batch]);

    let mut runs = Vec::with_capacity(WARMUP_RUNS + repeats);
    for _ in 0..WARMUP_RUNS + repeats {
        let ns = time_adaptive(
            |calls| vec![(); calls],
            |_| {
                let tape = Tape::new(workers.clone());
                let mut bound = Bound::new(&params);
                let x = tape.leaf(data.clone());
                let readouts = enc
                    .encode_sequence_tape(&tape, &mut bound, &params, x, segs.clone(), false)
                    .expect("encode");
                let loss = tape.mean_all(readouts);
                black_box(tape.backward(loss).expect("backward"));
            },
        );
        runs.push(ns);
    }
    TimingSample::from_runs(
        arch.name(),
        PHASE_UPDATE_TOTAL,
        t_len,
        0,
        batch,
        workers.count(),
        &runs,
    )
}

/// Execute the full grid: every architecture × length × phase, plus
/// position-parallel update rows for the non-recurrent encoders when
/// `grid.workers > 1`. Returns all samples and the per-arch scaling fits.
pub fn run_grid(grid: &BenchGrid) -> Result<(Vec<TimingSample>, Vec<ScalingReport>)> {
    let mut samples = Vec::new();
    let mut reports = Vec::new();
    let t_max = *grid
        .lengths
        .iter()
        .max()
        .ok_or_else(|| CoreError::Usage("bench grid has no lengths".into()))?;
    for arch in [Arch::Mate, Arch::Rnn, Arch::Attn] {
        let update_batch = update_batch_for(arch, t_max, grid.batch, grid.dim);
        for &t in &grid.lengths {
            samples.extend(time_rollout(arch, t, grid.dim, grid.repeats, grid.seed)?);
            samples.push(time_update(
                arch,
                t,
                update_batch,
                grid.dim,
                grid.repeats,
                &Workers::serial(),
                grid.seed,
            )?);
            if grid.workers > 1 && arch != Arch::Rnn {
                samples.push(time_update(
                    arch,
                    t,
                    update_batch,
                    grid.dim,
                    grid.repeats,
                    &Workers::new(grid.workers)?,
                    grid.seed,
                )?);
            }
        }
        for phase in [PHASE_ROLLOUT_TOTAL, PHASE_UPDATE_TOTAL] {
            let points: Vec<(usize, f64)> = samples
                .iter()
                .filter(|s| {
                    s.arch == arch.name() && s.phase == phase && s.workers == 1 && !s.is_skipped()
                })
                .map(|s| (s.t, s.median_ns))
                .collect();
            reports.push(fit_scaling(arch.name(), phase, &points)?);
        }
    }
    Ok((samples, reports))
}

/// Write `bench.csv`.
pub fn write_bench_csv(samples: &[TimingSample], path: &std::path::Path) -> Result<()> {
    let mut w = CsvWriter::create(path, BENCH_SCHEMA, BENCH_COLUMNS)?;
    for s in samples {
        w.row(&[
            s.arch.to_string(),
            s.phase.to_string(),
            s.t.to_string(),
            s.t_checkpoint.to_string(),
            s.batch.to_string(),
            s.workers.to_string(),
            s.repeats.to_string(),
            fmt_f64(s.median_ns),
            fmt_f64(s.mad_ns),
        ])?;
    }
    Ok(())
}

/// Write `scaling.csv`.
pub fn write_scaling_csv(reports: &[ScalingReport], path: &std::path::Path) -> Result<()> {
    let mut w = CsvWriter::create(path, SCALING_SCHEMA, SCALING_COLUMNS)?;
    for r in reports {
        w.row(&[
            r.arch.to_string(),
            r.phase.to_string(),
            fmt_f64(r.slope),
            fmt_f64(r.r2),
            r.verdict.clone(),
        ])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const GRID_T: [usize; 5] = [512, 1024, 2048, 4096, 8192];

    #[test]
    fn exact_power_laws_fit_exactly() {
        let linear: Vec<(usize, f64)> = GRID_T.iter().map(|&t| (t, 3.7 * t as f64)).collect();
        let r = fit_scaling("mate", PHASE_ROLLOUT_TOTAL, &linear).unwrap();
        assert!((r.slope - 1.0).abs() < 1e-9, "slope {}", r.slope);
        assert!(r.r2 > 1.0 - 1e-12);
        assert_eq!(r.verdict, "PASS");

        let quad: Vec<(usize, f64)> =
            GRID_T.iter().map(|&t| (t, 0.4 * (t as f64) * (t as f64))).collect();
        let r = fit_scaling("attn", PHASE_UPDATE_TOTAL, &quad).unwrap();
        assert!((r.slope - 2.0).abs() < 1e-9, "slope {}", r.slope);
        assert_eq!(r.verdict, "PASS");
    }

    #[test]
    fn affine_offset_drags_the_slope_below_one() {
        // time = c·T + d with d = c·100.
        let c = 2.5;
        let pts: Vec<(usize, f64)> =
            GRID_T.iter().map(|&t| (t, c * t as f64 + c * 100.0)).collect();
        let r = fit_scaling("rnn", PHASE_ROLLOUT_TOTAL, &pts).unwrap();
        assert!(
            r.slope >= 0.9 && r.slope <= 1.0,
            "affine slope {} not in [0.9, 1.0]",
            r.slope
        );
    }

    #[test]
    fn fit_preconditions_are_enforced() {
        let few: Vec<(usize, f64)> = GRID_T[..3].iter().map(|&t| (t, t as f64)).collect();
        let err = fit_scaling("mate", PHASE_ROLLOUT_TOTAL, &few).unwrap_err();
        assert!(err.to_string().contains("need ≥ 4 lengths"), "err was: {err}");

        let narrow: Vec<(usize, f64)> =
            [512, 1024, 2048, 4096].iter().map(|&t| (t, t as f64)).collect();
        let err = fit_scaling("mate", PHASE_ROLLOUT_TOTAL, &narrow).unwrap_err();
        assert!(err.to_string().contains("span"), "err was: {err}");

        let mut bad: Vec<(usize, f64)> = GRID_T.iter().map(|&t| (t, t as f64)).collect();
        bad[2].1 = 0.0;
        assert!(matches!(
            fit_scaling("mate", PHASE_ROLLOUT_TOTAL, &bad),
            Err(CoreError::Data(_))
        ));
    }

    #[test]
    fn sample_reduction_discards_warmup_and_uses_median() {
        // Warmups 1000, 900 are dropped; median of [5, 1, 2, 9, 4] = 4,
        // deviations [1, 3, 2, 5, 0] → MAD = 2.
        let runs = [1000.0, 900.0, 5.0, 1.0, 2.0, 9.0, 4.0];
        let s = TimingSample::from_runs("mate", PHASE_ROLLOUT_TOTAL, 64, 0, 1, 1, &runs).unwrap();
        assert_eq!(s.repeats, 5);
        assert_eq!(s.median_ns, 4.0);
        assert_eq!(s.mad_ns, 2.0);
        assert!(TimingSample::from_runs("mate", PHASE_ROLLOUT_TOTAL, 64, 0, 1, 1, &runs[..6])
            .is_err());
    }

    #[test]
    fn tiny_grid_produces_all_rows_and_fits() {
        let grid = BenchGrid {
            lengths: vec![16, 32, 64, 256],
            repeats: 5,
            batch: 2,
            dim: 8,
            workers: 1,
            seed: 1,
        };
        let (samples, reports) = run_grid(&grid).unwrap();
        // 3 arch × 4 lengths × (1 total + 3 step + 1 update) rows.
        assert_eq!(samples.len(), 3 * 4 * 5);
        assert_eq!(reports.len(), 6);
        for s in &samples {
            assert!(!s.is_skipped());
            assert!(s.median_ns > 0.0, "{}/{} T={}", s.arch, s.phase, s.t);
        }
        // Slopes at toy lengths are noisy; only structural facts are checked.
        for r in &reports {
            assert!(r.slope.is_finite());
            assert!(r.r2.is_finite());
        }
        let dir = std::env::temp_dir().join(format!("bench-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        write_bench_csv(&samples, &dir.join("bench.csv")).unwrap();
        write_scaling_csv(&reports, &dir.join("scaling.csv")).unwrap();
        let text = std::fs::read_to_string(dir.join("bench.csv")).unwrap();
        assert_eq!(text.lines().count(), 2 + samples.len());
        assert!(text.lines().nth(1).unwrap().starts_with("arch,phase,T"));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn oversized_attention_updates_become_warning_rows() {
        // A ludicrous length forces the memory guard even at batch 1.
        let s = time_update(
            Arch::Attn,
            1 << 20,
            1,
            8,
            5,
            &Workers::serial(),
            1,
        )
        .unwrap();
        assert!(s.is_skipped());
        assert_eq!(s.median_ns, 0.0);
        // The linear encoders shrink an oversized batch instead.
        assert_eq!(update_batch_for(Arch::Attn, 8192, 8, 128), 1);
        assert_eq!(update_batch_for(Arch::Mate, 8192, 8, 128), 8);
    }
}
