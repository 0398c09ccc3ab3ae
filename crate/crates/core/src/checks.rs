//! Deterministic self-check suites for the analytic guarantees the library
//! rests on: permutation invariance of the sum memory, exact Bayesian
//! tracking, readout inversion, injectivity at the theoretical width, and
//! gradient correctness.
//!
//! Every suite runs with fixed internal seeds and pinned tolerances, so two
//! runs on any machine produce the same verdicts and near-identical measured
//! values. Each property yields one [`CheckLine`] carrying the measured
//! quantity next to its tolerance; [`render`] turns a batch of reports into
//! the text written to `report.txt` by the `check` subcommand.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::memory::{
    augmented_readout, injectivity_probe, recover_unnormalized, Arch, Encoder, EncoderConfig,
    MultisetHistory,
};
use crate::nn::{
    finite_difference_check, rel_l2_diff, Activation, Bound, Mlp, ParamSet, Tape, Tensor, Workers,
};
use crate::posterior::{
    discrete_posterior_batch, verify_memory_sufficiency, CategoricalPosterior, DiscreteTransition,
    KernelTable,
};

/// Valid suite names, in the order `all` runs them.
pub const SUITE_NAMES: &[&str] = &["invariance", "oracle", "recovery", "injectivity", "gradients"];

// --- invariance ---
const INVARIANCE_TRIALS: usize = 1000;
const INVARIANCE_MAX_LEN: usize = 64;
const INVARIANCE_TOL: f64 = 1e-12;
/// Reordering must move an order-aware readout by more than this.
const ORDER_SENSITIVE_MARGIN: f64 = 1e-6;
const ORDER_SENSITIVE_MIN_FRACTION: f64 = 0.99;

// --- oracle ---
const SUFFICIENCY_TRIALS: usize = 1000;
const SUFFICIENCY_LEN: usize = 100;
const SUFFICIENCY_TOL: f64 = 1e-10;
const POSTERIOR_KERNELS: usize = 1000;
const POSTERIOR_STEPS: usize = 4;
const POSTERIOR_TOL: f64 = 1e-12;
/// Log-weights below this are treated as exactly-excluded contexts.
const LOG_ZERO_FLOOR: f64 = -700.0;

// --- recovery ---
const RECOVERY_TRIALS: usize = 1000;
const RECOVERY_TOL: f64 = 1e-9;
const RECOVERY_DIMS: &[usize] = &[8, 16, 32, 64, 128, 256];

// --- injectivity ---
const INJECTIVITY_TRIALS: usize = 10_000;
const INJECTIVITY_TOL: f64 = 1e-8;
const INJECTIVITY_INPUT_DIM: usize = 2;
const INJECTIVITY_HORIZON: usize = 4;

// --- gradients ---
const GRADIENT_CONFIGS: usize = 100;
const GRADIENT_EPS: f64 = 1e-5;
const GRADIENT_TOL: f64 = 1e-4;

/// One measured property: a stable name, the verdict, and the measurement
/// (always including the tolerance it was judged against).
#[derive(Debug, Clone)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub measured: String,
}

/// All properties of one suite.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub suite: &'static str,
    pub lines: Vec<CheckLine>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.passed)
    }
}

/// Run one named suite, or every suite for `all`.
pub fn run_suites(name: &str) -> Result<Vec<CheckReport>> {
    if name == "all" {
        return SUITE_NAMES.iter().map(|s| run_suite(s)).collect();
    }
    Ok(vec![run_suite(name)?])
}

/// Run a single suite by name.
pub fn run_suite(name: &str) -> Result<CheckReport> {
    match name {
        "invariance" => suite_invariance(),
        "oracle" => suite_oracle(),
        "recovery" => suite_recovery(),
        "injectivity" => suite_injectivity(),
        "gradients" => suite_gradients(),
        other => Err(CoreError::Usage(format!(
            "unknown check suite `{other}`; valid suites: {}, all",
            SUITE_NAMES.join(", ")
        ))),
    }
}

/// Human-readable report: one verdict line per property, then a summary.
pub fn render(reports: &[CheckReport]) -> String {
    let mut out = String::new();
    let mut total = 0usize;
    let mut failed = 0usize;
    for report in reports {
        out.push_str(&format!("== {} ==\n", report.suite));
        for line in &report.lines {
            total += 1;
            if !line.passed {
                failed += 1;
            }
            let verdict = if line.passed { "PASS" } else { "FAIL" };
            out.push_str(&format!("{verdict}  {}: {}\n", line.name, line.measured));
        }
    }
    if failed == 0 {
        out.push_str(&format!("all {total} properties passed\n"));
    } else {
        out.push_str(&format!("{failed} of {total} properties FAILED\n"));
    }
    out
}

fn line(name: impl Into<String>, passed: bool, measured: String) -> CheckLine {
    CheckLine { name: name.into(), passed, measured }
}

fn build_encoder(arch: Arch, input_dim: usize, memory_dim: usize, horizon: usize, seed: u64) -> Result<(Encoder, ParamSet)> {
    let mut ps = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = Encoder::new(&mut ps, EncoderConfig::new(arch, input_dim, memory_dim, horizon), &mut rng)?;
    Ok((enc, ps))
}

fn random_rows(len: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..len)
        .map(|_| (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
        .collect()
}

/// A random non-identity permutation of `0..len` (`len >= 2`).
fn random_nonidentity_perm(len: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..len).collect();
    while perm.iter().enumerate().all(|(i, &p)| i == p) {
        perm.shuffle(rng);
    }
    perm
}

/// Reordering a history must leave the sum memory's readout untouched and
/// must visibly move the order-aware readouts on almost every history.
fn suite_invariance() -> Result<CheckReport> {
    let input_dim = 6;
    let memory_dim = 16;
    let (mate, mate_ps) = build_encoder(Arch::Mate, input_dim, memory_dim, INVARIANCE_MAX_LEN, 101)?;
    let (rnn, rnn_ps) = build_encoder(Arch::Rnn, input_dim, memory_dim, INVARIANCE_MAX_LEN, 102)?;
    let (attn, attn_ps) = build_encoder(Arch::Attn, input_dim, memory_dim, INVARIANCE_MAX_LEN, 103)?;
    let workers = Workers::serial();

    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let mut worst_mate: f64 = 0.0;
    let mut rnn_moved = 0usize;
    let mut attn_moved = 0usize;
    // The sum memory is compared on its raw accumulated state (the
    // invariant object); the baselines on their readouts, which is all they
    // expose.
    let raw_sum_of = |enc: &Encoder, ps: &ParamSet, rows: &[Vec<f64>]| -> Result<Vec<f64>> {
        let mut state = enc.init_state();
        for row in rows {
            enc.encode_step(ps, &mut state, row, &workers)?;
        }
        Ok(enc.raw_sum(&state)?.to_vec())
    };
    for _ in 0..INVARIANCE_TRIALS {
        let len = rng.random_range(2..=INVARIANCE_MAX_LEN);
        let history = MultisetHistory::from_rows(random_rows(len, input_dim, &mut rng));
        let perm = random_nonidentity_perm(len, &mut rng);
        let permuted = history.permuted(&perm);
        let readout_diff = |enc: &Encoder, ps: &ParamSet| -> Result<f64> {
            let a = enc.encode_sequence(ps, history.rows(), &workers)?;
            let b = enc.encode_sequence(ps, permuted.rows(), &workers)?;
            Ok(rel_l2_diff(a.last().unwrap(), b.last().unwrap()))
        };
        let sum_a = raw_sum_of(&mate, &mate_ps, history.rows())?;
        let sum_b = raw_sum_of(&mate, &mate_ps, permuted.rows())?;
        worst_mate = worst_mate.max(rel_l2_diff(&sum_a, &sum_b));
        if readout_diff(&rnn, &rnn_ps)? > ORDER_SENSITIVE_MARGIN {
            rnn_moved += 1;
        }
        if readout_diff(&attn, &attn_ps)? > ORDER_SENSITIVE_MARGIN {
            attn_moved += 1;
        }
    }

    let needed = (ORDER_SENSITIVE_MIN_FRACTION * INVARIANCE_TRIALS as f64).ceil() as usize;
    Ok(CheckReport {
        suite: "invariance",
        lines: vec![
            line(
                format!(
                    "sum-memory raw state is permutation-invariant over {INVARIANCE_TRIALS} histories (len <= {INVARIANCE_MAX_LEN})"
                ),
                worst_mate <= INVARIANCE_TOL,
                format!("worst rel diff {worst_mate:.3e} (tol {INVARIANCE_TOL:.0e})"),
            ),
            line(
                "lstm readout is order-aware",
                rnn_moved >= needed,
                format!("moved on {rnn_moved}/{INVARIANCE_TRIALS} reorderings (need >= {needed})"),
            ),
            line(
                "attention readout is order-aware",
                attn_moved >= needed,
                format!("moved on {attn_moved}/{INVARIANCE_TRIALS} reorderings (need >= {needed})"),
            ),
        ],
    })
}

/// All permutations of `[0, 1, 2, 3]`.
fn perms4() -> Vec<[usize; 4]> {
    let mut out = Vec::with_capacity(24);
    for a in 0..4 {
        for b in 0..4 {
            if b == a {
                continue;
            }
            for c in 0..4 {
                if c == a || c == b {
                    continue;
                }
                let d = 6 - a - b - c;
                out.push([a, b, c, d]);
            }
        }
    }
    out
}

/// The summed analytic statistics must reproduce the exact conjugate
/// Gaussian posterior, and the categorical filter must be a true Bayes
/// filter: order-free and equal to brute-force enumeration.
fn suite_oracle() -> Result<CheckReport> {
    // Gaussian evidence: the two summed statistics are the information-form
    // posterior, so folding them must match the sequential conjugate update.
    let mut rng = ChaCha8Rng::seed_from_u64(201);
    let mut worst_sufficiency: f64 = 0.0;
    for _ in 0..SUFFICIENCY_TRIALS {
        let history: Vec<(f64, f64)> = (0..SUFFICIENCY_LEN)
            .map(|_| {
                let mu = rng.random::<f64>() * 4.0 - 2.0;
                let var = 0.1 + rng.random::<f64>() * 3.9;
                (mu, var)
            })
            .collect();
        worst_sufficiency = worst_sufficiency.max(verify_memory_sufficiency(&history)?);
    }

    // Categorical evidence over random kernels: every ordering of a short
    // history must land on the same posterior, which in turn must equal the
    // normalized product of likelihoods computed directly.
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (n_states, n_actions, n_contexts, n_outcomes) = (3, 2, 3, 3);
    let mut worst_order: f64 = 0.0;
    let mut worst_brute: f64 = 0.0;
    let mut support_mismatches = 0usize;
    let permutations = perms4();
    for _ in 0..POSTERIOR_KERNELS {
        let kernel = KernelTable::random(n_states, n_actions, n_contexts, n_outcomes, &mut rng)?;
        let true_context = rng.random_range(0..n_contexts);
        let history: Vec<DiscreteTransition> = (0..POSTERIOR_STEPS)
            .map(|_| {
                let state = rng.random_range(0..n_states);
                let action = rng.random_range(0..n_actions);
                let (next_state, reward) =
                    kernel.sample_outcome(state, action, true_context, &mut rng)?;
                Ok(DiscreteTransition { state, action, next_state, reward })
            })
            .collect::<Result<_>>()?;
        let prior = CategoricalPosterior::uniform(n_contexts)?;
        let reference = discrete_posterior_batch(&prior, &kernel, &history)?;
        let ref_log = reference.log_probabilities();

        for perm in &permutations {
            let shuffled: Vec<DiscreteTransition> = perm.iter().map(|&i| history[i]).collect();
            let log = discrete_posterior_batch(&prior, &kernel, &shuffled)?.log_probabilities();
            for (l, r) in log.iter().zip(&ref_log) {
                let l_zero = *l <= LOG_ZERO_FLOOR;
                let r_zero = *r <= LOG_ZERO_FLOOR;
                match (l_zero, r_zero) {
                    (true, true) => {}
                    (false, false) => worst_order = worst_order.max((l - r).abs()),
                    _ => support_mismatches += 1,
                }
            }
        }

        // Brute force: unnormalized products of likelihoods per context.
        let mut brute: Vec<f64> = (0..n_contexts)
            .map(|c| {
                let mut p = 1.0 / n_contexts as f64;
                for x in &history {
                    p *= kernel.likelihood(c, x)?;
                }
                Ok(p)
            })
            .collect::<Result<_>>()?;
        let total: f64 = brute.iter().sum();
        for b in &mut brute {
            *b /= total;
        }
        for (p, b) in reference.probabilities().iter().zip(&brute) {
            worst_brute = worst_brute.max((p - b).abs());
        }
    }

    Ok(CheckReport {
        suite: "oracle",
        lines: vec![
            line(
                format!(
                    "summed statistics match the conjugate gaussian posterior ({SUFFICIENCY_TRIALS} histories of {SUFFICIENCY_LEN} steps)"
                ),
                worst_sufficiency <= SUFFICIENCY_TOL,
                format!("worst rel dev {worst_sufficiency:.3e} (tol {SUFFICIENCY_TOL:.0e})"),
            ),
            line(
                format!(
                    "categorical posterior is order-free across all {POSTERIOR_STEPS}-step reorderings ({POSTERIOR_KERNELS} kernels)"
                ),
                worst_order <= POSTERIOR_TOL && support_mismatches == 0,
                format!(
                    "worst log-space diff {worst_order:.3e} (tol {POSTERIOR_TOL:.0e}), support mismatches {support_mismatches}"
                ),
            ),
            line(
                "categorical posterior equals brute-force enumeration",
                worst_brute <= POSTERIOR_TOL,
                format!("worst probability diff {worst_brute:.3e} (tol {POSTERIOR_TOL:.0e})"),
            ),
        ],
    })
}

/// Projecting a raw sum onto the hypersphere with the augmented constant
/// slot and inverting must return the original sum almost exactly.
fn suite_recovery() -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(301);
    let mut worst: f64 = 0.0;
    for trial in 0..RECOVERY_TRIALS {
        let dim = RECOVERY_DIMS[trial % RECOVERY_DIMS.len()];
        // Spread magnitudes over several orders to exercise the division.
        let magnitude = 10f64.powf(rng.random::<f64>() * 6.0 - 3.0);
        let raw: Vec<f64> = (0..dim)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * magnitude)
            .collect();
        let radius = ((dim + 1) as f64).sqrt();
        let projected = augmented_readout(&raw, radius)?;
        let recovered = recover_unnormalized(&projected)?;
        worst = worst.max(rel_l2_diff(&raw, &recovered));
    }
    let (lo, hi) = (RECOVERY_DIMS[0], RECOVERY_DIMS[RECOVERY_DIMS.len() - 1]);
    Ok(CheckReport {
        suite: "recovery",
        lines: vec![line(
            format!(
                "hypersphere readout inverts back to the raw sum ({RECOVERY_TRIALS} vectors, dims {lo}..{hi})"
            ),
            worst <= RECOVERY_TOL,
            format!("worst rel error {worst:.3e} (tol {RECOVERY_TOL:.0e})"),
        )],
    })
}

/// At the theoretical width `2nT + 1` the embedding sum must separate every
/// pair of distinct multiset histories the probe draws.
fn suite_injectivity() -> Result<CheckReport> {
    let memory_dim = 2 * INJECTIVITY_INPUT_DIM * INJECTIVITY_HORIZON + 1;
    let (enc, ps) = build_encoder(
        Arch::Mate,
        INJECTIVITY_INPUT_DIM,
        memory_dim,
        INJECTIVITY_HORIZON,
        401,
    )?;
    let report = injectivity_probe(&enc, &ps, INJECTIVITY_TRIALS, INJECTIVITY_TOL, 402)?;
    Ok(CheckReport {
        suite: "injectivity",
        lines: vec![
            line(
                format!(
                    "width {memory_dim} meets the 2nT+1 bound (n = {INJECTIVITY_INPUT_DIM}, T = {INJECTIVITY_HORIZON})"
                ),
                report.dim_sufficient,
                format!("theory minimum {}", report.theory_min_dim),
            ),
            line(
                format!("distinct histories stay separated over {INJECTIVITY_TRIALS} pairs"),
                report.collisions == 0 && report.min_distance > INJECTIVITY_TOL,
                format!(
                    "collisions {}, min rel distance {:.3e} (tol {INJECTIVITY_TOL:.0e})",
                    report.collisions, report.min_distance
                ),
            ),
        ],
    })
}

/// Finite-difference agreement for one encoder architecture over
/// `GRADIENT_CONFIGS` random parameter draws and inputs.
fn encoder_gradient_worst(arch: Arch, base_seed: u64) -> Result<f64> {
    let input_dim = 3;
    let memory_dim = 4;
    let horizon = 8;
    let mut worst: f64 = 0.0;
    for cfg_idx in 0..GRADIENT_CONFIGS {
        let (enc, mut ps) = build_encoder(arch, input_dim, memory_dim, horizon, base_seed + cfg_idx as u64)?;
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed + 10_000 + cfg_idx as u64);
        let first = rng.random_range(1..=3usize);
        let second = rng.random_range(1..=3usize);
        let rows = random_rows(first + second, input_dim, &mut rng);
        let n_rows = rows.len();
        let x = Tensor::matrix(
            n_rows,
            input_dim,
            rows.into_iter().flatten().collect(),
        );
        let segs = Arc::new(vec![first, second]);
        // Fixed random projection so the scalar loss sees every output.
        let out_rows = n_rows + segs.len();
        let weight = Tensor::matrix(
            out_rows,
            memory_dim,
            (0..out_rows * memory_dim)
                .map(|_| rng.random::<f64>() * 2.0 - 1.0)
                .collect(),
        );
        let ids: Vec<_> = ps.ids().collect();
        let worst_here = finite_difference_check(&mut ps, &ids, GRADIENT_EPS, |ps| {
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
        })?;
        worst = worst.max(worst_here);
    }
    Ok(worst)
}

/// Central differences lie near a relu kink: if a pre-activation sits
/// within `eps` of zero the two-sided quotient averages the two slopes. Head
/// inputs are redrawn until every relu pre-activation clears this margin,
/// which is comfortably above the shift an `eps`-sized parameter nudge can
/// cause.
const KINK_MARGIN: f64 = 1e-3;

/// Smallest |pre-activation| over the non-final layers of the `head` MLP
/// for the given input rows.
fn min_hidden_preactivation(
    ps: &ParamSet,
    dims: &[usize],
    acts: &[Activation],
    rows: &[Vec<f64>],
) -> f64 {
    let mut cur: Vec<Vec<f64>> = rows.to_vec();
    let mut min_abs = f64::INFINITY;
    for (i, act) in acts.iter().enumerate() {
        let (n_in, n_out) = (dims[i], dims[i + 1]);
        let w = ps.get(ps.id(&format!("head/w{i}")).unwrap());
        let b = ps.get(ps.id(&format!("head/b{i}")).unwrap());
        let (w, b) = (w.as_slice(), b.as_slice());
        cur = cur
            .iter()
            .map(|x| {
                (0..n_out)
                    .map(|j| {
                        let mut z = b[j];
                        for (k, xk) in x.iter().enumerate().take(n_in) {
                            z += xk * w[k * n_out + j];
                        }
                        z
                    })
                    .collect()
            })
            .collect();
        if i + 1 < acts.len() {
            for row in &cur {
                for &z in row {
                    min_abs = min_abs.min(z.abs());
                }
            }
        }
        for row in &mut cur {
            for z in row.iter_mut() {
                *z = act.apply(*z);
            }
        }
    }
    min_abs
}

/// Finite-difference agreement for the dense heads over random shapes.
fn mlp_gradient_worst(base_seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for cfg_idx in 0..GRADIENT_CONFIGS {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed + cfg_idx as u64);
        let in_dim = rng.random_range(2..=5usize);
        let hidden = rng.random_range(3..=8usize);
        let out_dim = rng.random_range(1..=3usize);
        let act = if cfg_idx % 2 == 0 { Activation::Relu } else { Activation::Tanh };
        let dims = [in_dim, hidden, hidden, out_dim];
        let acts = [act, act, Activation::Identity];
        let mut ps = ParamSet::new();
        let mlp = Mlp::new(&mut ps, "head", &dims, &acts, &mut rng);
        let batch = rng.random_range(1..=4usize);
        let input = loop {
            let rows = random_rows(batch, in_dim, &mut rng);
            if act != Activation::Relu
                || min_hidden_preactivation(&ps, &dims, &acts, &rows) > KINK_MARGIN
            {
                break Tensor::matrix(batch, in_dim, rows.into_iter().flatten().collect());
            }
        };
        let ids: Vec<_> = ps.ids().collect();
        let worst_here = finite_difference_check(&mut ps, &ids, GRADIENT_EPS, |ps| {
            let tape = Tape::new(Workers::serial());
            let mut bound = Bound::new(ps);
            let xv = tape.leaf(input.clone());
            let out = mlp.forward_tape(&tape, &mut bound, ps, xv);
            let loss = tape.mean_all(out);
            let value = tape.value(loss).item();
            let grads = tape.backward(loss)?;
            Ok((value, bound.grads(ps, &grads)))
        })?;
        worst = worst.max(worst_here);
    }
    Ok(worst)
}

/// Analytic gradients must agree with central differences for every
/// differentiable component: the embedding + readout around each memory
/// architecture, and the dense heads.
fn suite_gradients() -> Result<CheckReport> {
    let cases: [(&str, f64); 4] = [
        ("sum memory graph (embedding through readout)", encoder_gradient_worst(Arch::Mate, 501)?),
        ("lstm memory graph", encoder_gradient_worst(Arch::Rnn, 601)?),
        ("attention memory graph", encoder_gradient_worst(Arch::Attn, 701)?),
        ("dense heads", mlp_gradient_worst(801)?),
    ];
    let lines = cases
        .into_iter()
        .map(|(name, worst)| {
            line(
                format!("{name} matches central differences ({GRADIENT_CONFIGS} random configs)"),
                worst <= GRADIENT_TOL,
                format!("worst rel error {worst:.3e} (tol {GRADIENT_TOL:.0e}, eps {GRADIENT_EPS:.0e})"),
            )
        })
        .collect();
    Ok(CheckReport { suite: "gradients", lines })
}
