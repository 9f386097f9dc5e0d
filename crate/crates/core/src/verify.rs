//! Self-contained identity and invariant checks.
//!
//! Every check draws its own fixtures from a seeded RNG, evaluates two
//! independent computation paths and records the worst disagreement.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{
    apply_dual_weight, dual_weight_linear, gram, kernel_expansion_attention,
    linear_attention_primal, softmax_attention, KernelParams,
};
use crate::duplication::{
    dual_similarity_direct, dual_similarity_factorized, normalized_kernel, DuplicationContext,
};
use crate::error::Result;
use crate::magnitude::magnitude_scores;
use crate::rope::{apply_rope, RopeParams};
use crate::selection::{keep_count, pc_mmr_with, sequential_mmr_multiplicative, PruneConfig};
use crate::synth::{generate_synthetic_batch, SynthSpec};
use crate::tensor::{dot, norm, sq_dist, Matrix};

/// Deliberate perturbations used to prove that a check can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Fault {
    /// Drops the factor 2 from the RBF denominator.
    Rbf,
    /// Skips the last token when forming the dual weight.
    PrimalDual,
    /// Uses `√(d+1)` as the kernel temperature in the expansion path.
    Softmax,
    /// Forgets the square root on the kernel factor of `‖ΔW_i‖_F`.
    Frobenius,
    /// Drops the value cosine from the factorized similarity.
    Factorization,
    /// Runs the chunked selection with `b0 = 2`.
    Pcmmr,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub trials: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    /// Overrides every check's default trial count.
    pub trials: Option<usize>,
    pub seed: u64,
    pub fault: Option<Fault>,
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::new(rows, cols, random_vec(rng, rows * cols, scale))
}

fn outcome(name: &'static str, trials: usize, max_error: f64, tolerance: f64) -> CheckOutcome {
    CheckOutcome { name, trials, max_error, tolerance, passed: max_error <= tolerance }
}

/// Linear attention computed directly vs through the accumulated dual
/// weight; error is `|Δ| / (1 + ‖out‖)`.
pub fn check_primal_dual(trials: usize, seed: u64, fault: Option<Fault>) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let n = rng.random_range(1..=64);
        let d = rng.random_range(1..=32);
        let dv = rng.random_range(1..=32);
        let k = random_matrix(&mut rng, n, d, 1.0);
        let v = random_matrix(&mut rng, n, dv, 1.0);
        let q = random_vec(&mut rng, d, 1.0);
        let primal = linear_attention_primal(&q, &k, &v)?;
        let w = if fault == Some(Fault::PrimalDual) && n > 1 {
            let idx: Vec<usize> = (0..n - 1).collect();
            dual_weight_linear(&k.select_rows(&idx), &v.select_rows(&idx))?
        } else {
            dual_weight_linear(&k, &v)?
        };
        let dual = apply_dual_weight(&q, &w);
        let diff: Vec<f64> = primal.iter().zip(&dual).map(|(a, b)| a - b).collect();
        worst = worst.max(norm(&diff) / (1.0 + norm(&primal)));
    }
    Ok(outcome("primal-dual", trials, worst, 1e-10))
}

/// Max-shifted softmax vs the normalized kernel expansion.
pub fn check_softmax_kernel(trials: usize, seed: u64, fault: Option<Fault>) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let n = rng.random_range(1..=64);
        let d = rng.random_range(1..=32);
        let dv = rng.random_range(1..=32);
        let k = random_matrix(&mut rng, n, d, 1.0);
        let v = random_matrix(&mut rng, n, dv, 1.0);
        let q = random_vec(&mut rng, d, 1.0);
        let params = KernelParams::new(d)?;
        let a = softmax_attention(&q, &k, &v, &params)?;
        let expansion_params = if fault == Some(Fault::Softmax) { KernelParams::new(d + 1)? } else { params };
        let b = kernel_expansion_attention(&q, &k, &v, &expansion_params)?;
        let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let scale = norm(&b);
        let err = if scale == 0.0 { norm(&diff) } else { norm(&diff) / scale };
        worst = worst.max(err);
    }
    Ok(outcome("softmax-kernel", trials, worst, 1e-12))
}

/// Normalized exponential kernel vs the Gaussian RBF closed form.
pub fn check_rbf(trials: usize, seed: u64, fault: Option<Fault>) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let d = rng.random_range(1..=64);
        let params = KernelParams::new(d)?;
        let x = random_vec(&mut rng, d, 1.5);
        let y = random_vec(&mut rng, d, 1.5);
        let via_kernel = normalized_kernel(&x, &y, &params);
        let denom = if fault == Some(Fault::Rbf) { params.scale() } else { 2.0 * params.scale() };
        let rbf = (-sq_dist(&x, &y) / denom).exp();
        worst = worst.max((via_kernel - rbf).abs());
    }
    Ok(outcome("rbf-identity", trials, worst, 1e-9))
}

/// Square root of the Gram diagonal vs `√κ(k, k) ‖v‖`, relative error.
pub fn check_frobenius(trials: usize, seed: u64, fault: Option<Fault>) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let d = rng.random_range(1..=32);
        let dv = rng.random_range(1..=32);
        let params = KernelParams::new(d)?;
        let k = random_matrix(&mut rng, 1, d, 1.0);
        let v = random_matrix(&mut rng, 1, dv, 1.0);
        let from_gram = gram(&[0], &[0], &k, &v, &params)?.inner(0, 0)?.sqrt();
        let kappa = (dot(k.row(0), k.row(0)) / params.scale()).exp();
        let direct = if fault == Some(Fault::Frobenius) { kappa } else { kappa.sqrt() } * norm(v.row(0));
        worst = worst.max((from_gram - direct).abs() / direct);
    }
    Ok(outcome("frobenius-norm", trials, worst, 1e-12))
}

/// Dual-form similarity from Gram inner products vs its factorized form,
/// per head of synthetic batches (RoPE applied to keys).
pub fn check_factorization(trials: usize, seed: u64, fault: Option<Fault>) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < trials {
        let spec = SynthSpec {
            heads: rng.random_range(1..=4),
            n_img: 32,
            n_text: 4,
            dim: 2 * rng.random_range(2..=16),
            value_dim: rng.random_range(2..=32),
            clusters: rng.random_range(1..=8),
            noise: rng.random_range(0.0..0.5),
            seed: rng.random(),
            ..SynthSpec::default()
        };
        let batch = generate_synthetic_batch(&spec)?.batch;
        let params = KernelParams::new(batch.head_dim())?;
        for h in 0..batch.heads() {
            let k = apply_rope(&batch.head_keys(h), batch.positions(), &RopeParams::on())?;
            let v = batch.head_values(h);
            let i = rng.random_range(0..batch.n_img());
            let j = rng.random_range(0..batch.n_img());
            let direct = dual_similarity_direct(k.row(i), k.row(j), v.row(i), v.row(j), &params)?;
            let factorized = if fault == Some(Fault::Factorization) {
                normalized_kernel(k.row(i), k.row(j), &params)
            } else {
                dual_similarity_factorized(k.row(i), k.row(j), v.row(i), v.row(j), &params)
            };
            worst = worst.max((direct - factorized).abs());
            done += 1;
            if done == trials {
                break;
            }
        }
    }
    Ok(outcome("similarity-factorization", trials, worst, 1e-10))
}

/// PC-MMR with unit chunks vs the one-at-a-time greedy; error is the number
/// of instances whose kept sets differ.
pub fn check_pcmmr_oracle(trials: usize, seed: u64, fault: Option<Fault>) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let budgets = [0.647, 0.778, 0.889];
    let mut mismatches = 0usize;
    for t in 0..trials {
        let n_img = rng.random_range(8..=128);
        let spec = SynthSpec {
            heads: rng.random_range(1..=2),
            n_img,
            n_text: 4,
            dim: 8,
            value_dim: 8,
            clusters: rng.random_range(1..=n_img.min(12)),
            noise: rng.random_range(0.0..0.3),
            seed: rng.random(),
            ..SynthSpec::default()
        };
        let batch = generate_synthetic_batch(&spec)?.batch;
        let rho = budgets[t % budgets.len()];
        let keep = keep_count(n_img, rho)?;
        let cfg = PruneConfig {
            rho,
            b0: if fault == Some(Fault::Pcmmr) { 2 } else { 1 },
            growth: 1.0,
            ..PruneConfig::default()
        };
        let scores = magnitude_scores(&batch, &cfg.magnitude)?;
        let ctx = DuplicationContext::new(&batch, cfg.duplication)?;
        let chunked = pc_mmr_with(&scores, &ctx, &cfg, keep)?;
        let sequential = sequential_mmr_multiplicative(&scores, &ctx, &PruneConfig { b0: 1, ..cfg }, keep)?;
        if chunked.kept != sequential.kept {
            mismatches += 1;
        }
    }
    Ok(outcome("pcmmr-oracle", trials, mismatches as f64, 0.0))
}

/// RoPE row norms before and after rotation.
pub fn check_rope_isometry(trials: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let d = 2 * rng.random_range(1..=32);
        let m = random_matrix(&mut rng, 1, d, 2.0);
        let pos = rng.random_range(0..100_000);
        let r = apply_rope(&m, &[pos], &RopeParams::on())?;
        worst = worst.max((norm(m.row(0)) - norm(r.row(0))).abs());
    }
    Ok(outcome("rope-isometry", trials, worst, 1e-12))
}

/// Runs the whole suite in a fixed order.
pub fn run_all(opts: &VerifyOptions) -> Result<Vec<CheckOutcome>> {
    let n = |default: usize| opts.trials.unwrap_or(default);
    // distinct, fixed sub-seeds per check
    let s = |k: u64| opts.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k);
    Ok(vec![
        check_primal_dual(n(500), s(1), opts.fault)?,
        check_softmax_kernel(n(500), s(2), opts.fault)?,
        check_rbf(n(1000), s(3), opts.fault)?,
        check_frobenius(n(1000), s(4), opts.fault)?,
        check_factorization(n(1000), s(5), opts.fault)?,
        check_pcmmr_oracle(n(200), s(6), opts.fault)?,
        check_rope_isometry(n(1000), s(7))?,
    ])
}
