//! Method evaluation: how well a kept set preserves the dual weight and the
//! attention outputs of the text tokens.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{dual_weight_relative_error, softmax_attention, DualWeightError, KernelParams};
use crate::batch::TokenBatch;
use crate::duplication::DuplicationContext;
use crate::error::{Error, Result};
use crate::magnitude::magnitude_scores;
use crate::rope::{apply_rope, RopeParams};
use crate::selection::{
    pc_mmr_with, random_select, sequential_mmr_additive, sequential_mmr_multiplicative, top_k,
    PruneConfig, SelectionResult,
};
use crate::tensor::{cosine, norm, Tensor};

pub const REPORT_SCHEMA: &str = "dualprune.report/1";
pub const SELECTION_SCHEMA: &str = "dualprune.selection/1";

/// Built-in pruning methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Magnitude scores + progressive chunked MMR.
    Iwp,
    /// Magnitude scores only.
    Topk,
    /// One-at-a-time greedy with the PC-MMR penalty rule.
    Greedy,
    /// Classic additive MMR.
    MmrAdditive,
    Random,
    /// Keep every image token.
    None,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Iwp => "iwp",
            Method::Topk => "topk",
            Method::Greedy => "greedy",
            Method::MmrAdditive => "mmr-additive",
            Method::Random => "random",
            Method::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub prune: PruneConfig,
    /// λ for additive MMR, on its own `[0, 1]` scale.
    pub additive_lambda: f64,
    /// RoPE applied to queries and keys when measuring preservation.
    pub rope: RopeParams,
    /// Record wall-clock timings (makes reports non-reproducible).
    pub timing: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            prune: PruneConfig::default(),
            additive_lambda: 0.5,
            rope: RopeParams::on(),
            timing: false,
        }
    }
}

/// Runs a built-in method on `batch`.
pub fn run_method(batch: &TokenBatch, method: Method, cfg: &EvalConfig) -> Result<SelectionResult> {
    let prune = &cfg.prune;
    let n_img = batch.n_img();
    let keep = prune.keep_count(n_img)?;
    match method {
        Method::Random => random_select(n_img, keep, prune.seed),
        Method::None => random_select(n_img, n_img, prune.seed),
        _ => {
            let scores = magnitude_scores(batch, &prune.magnitude)?;
            match method {
                Method::Topk => top_k(&scores, keep),
                _ => {
                    let ctx = DuplicationContext::new(batch, prune.duplication)?;
                    match method {
                        Method::Iwp => pc_mmr_with(&scores, &ctx, prune, keep),
                        Method::Greedy => sequential_mmr_multiplicative(&scores, &ctx, prune, keep),
                        Method::MmrAdditive => {
                            sequential_mmr_additive(&scores, &ctx, cfg.additive_lambda, keep)
                        }
                        _ => unreachable!(),
                    }
                }
            }
        }
    }
}

/// A selection stored on disk, possibly produced outside this crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionFile {
    pub schema: String,
    pub method: String,
    pub kept: Vec<usize>,
    #[serde(default)]
    pub n_img: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<PruneConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<SelectionResult>,
}

/// Output preservation of a kept set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preservation {
    pub dual_weight_rel_error: DualWeightError,
    pub attn_output_cosine: f64,
    pub attn_output_l2_rel: f64,
}

fn check_kept(batch: &TokenBatch, kept: &[usize]) -> Result<()> {
    if kept.is_empty() {
        return Err(Error::Config("a selection must keep at least one image token".into()));
    }
    let mut seen = vec![false; batch.n_img()];
    for &k in kept {
        if k >= batch.n_img() {
            return Err(Error::Consistency(format!(
                "kept index {k} is not one of {} image tokens",
                batch.n_img()
            )));
        }
        if std::mem::replace(&mut seen[k], true) {
            return Err(Error::Consistency(format!("kept index {k} appears twice")));
        }
    }
    Ok(())
}

/// Rotated `[H, N, d]` copy of a query or key tensor.
fn rotated(t: &Tensor, batch: &TokenBatch, rope: &RopeParams) -> Result<Tensor> {
    let mut data = Vec::with_capacity(t.len());
    for h in 0..t.shape()[0] {
        data.extend_from_slice(apply_rope(&t.head(h), batch.positions(), rope)?.data());
    }
    Tensor::new(t.shape().to_vec(), data)
}

pub fn measure_preservation(batch: &TokenBatch, kept: &[usize], rope: &RopeParams) -> Result<Preservation> {
    check_kept(batch, kept)?;
    let params = KernelParams::new(batch.head_dim())?;
    let keys = rotated(batch.keys(), batch, rope)?;
    let queries = rotated(batch.queries(), batch, rope)?;
    let dual = dual_weight_relative_error(kept, &batch.image_indices(), &keys, batch.values(), &params)?;

    let mut pruned_tokens = kept.to_vec();
    pruned_tokens.sort_unstable();
    pruned_tokens.extend(batch.text_indices());

    let (mut cos_sum, mut l2_sum, mut count) = (0.0, 0.0, 0usize);
    for h in 0..batch.heads() {
        let (q, k, v) = (queries.head(h), keys.head(h), batch.head_values(h));
        let (ks, vs) = (k.select_rows(&pruned_tokens), v.select_rows(&pruned_tokens));
        for t in batch.text_indices() {
            let full = softmax_attention(q.row(t), &k, &v, &params)?;
            let pruned = softmax_attention(q.row(t), &ks, &vs, &params)?;
            let diff: Vec<f64> = pruned.iter().zip(&full).map(|(a, b)| a - b).collect();
            let denom = norm(&full);
            cos_sum += if denom == 0.0 && norm(&pruned) == 0.0 { 1.0 } else { cosine(&full, &pruned) };
            l2_sum += if denom == 0.0 { norm(&diff) } else { norm(&diff) / denom };
            count += 1;
        }
    }
    Ok(Preservation {
        dual_weight_rel_error: dual,
        attn_output_cosine: (cos_sum / count as f64).clamp(-1.0, 1.0),
        attn_output_l2_rel: l2_sum / count as f64,
    })
}

/// Jaccard index of two index sets.
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let a: std::collections::BTreeSet<_> = a.iter().collect();
    let b: std::collections::BTreeSet<_> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub kept: usize,
    pub kept_ratio: f64,
    pub dual_weight_rel_error: DualWeightError,
    pub attn_output_cosine: f64,
    pub attn_output_l2_rel: f64,
    /// Jaccard index against the one-at-a-time greedy kept set.
    pub oracle_iou: f64,
    pub wall_time_ms: Option<f64>,
    pub duplication_cells_evaluated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub version: String,
    pub config: EvalConfig,
    pub seed: u64,
    pub n_img: usize,
    pub n_text: usize,
    pub layer: usize,
    pub rows: Vec<MethodRow>,
}

/// What to evaluate: a built-in method, or a precomputed kept set.
#[derive(Debug, Clone, PartialEq)]
pub enum Candidate {
    Builtin(Method),
    External { name: String, kept: Vec<usize> },
}

impl Candidate {
    pub fn name(&self) -> &str {
        match self {
            Candidate::Builtin(m) => m.name(),
            Candidate::External { name, .. } => name,
        }
    }
}

fn evaluate_one(
    batch: &TokenBatch,
    candidate: &Candidate,
    cfg: &EvalConfig,
    oracle: &[usize],
) -> Result<MethodRow> {
    let start = Instant::now();
    let (kept, cells) = match candidate {
        Candidate::Builtin(m) => {
            let r = run_method(batch, *m, cfg)?;
            (r.kept, r.cells_evaluated)
        }
        Candidate::External { kept, .. } => {
            let mut kept = kept.clone();
            kept.sort_unstable();
            (kept, 0)
        }
    };
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    let p = measure_preservation(batch, &kept, &cfg.rope)?;
    Ok(MethodRow {
        method: candidate.name().to_string(),
        kept: kept.len(),
        kept_ratio: kept.len() as f64 / batch.n_img() as f64,
        dual_weight_rel_error: p.dual_weight_rel_error,
        attn_output_cosine: p.attn_output_cosine,
        attn_output_l2_rel: p.attn_output_l2_rel,
        oracle_iou: jaccard(&kept, oracle),
        wall_time_ms: cfg.timing.then_some(elapsed),
        duplication_cells_evaluated: cells,
    })
}

/// Evaluates every candidate; row order follows `candidates` regardless of
/// `threads`.
pub fn evaluate(
    batch: &TokenBatch,
    candidates: &[Candidate],
    cfg: &EvalConfig,
    threads: usize,
) -> Result<EvalReport> {
    if candidates.is_empty() {
        return Err(Error::Config("no methods to evaluate".into()));
    }
    let oracle = run_method(batch, Method::Greedy, cfg)?.kept;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let rows = pool.install(|| {
        candidates
            .par_iter()
            .map(|c| evaluate_one(batch, c, cfg, &oracle))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(EvalReport {
        schema: REPORT_SCHEMA.to_string(),
        version: crate::VERSION.to_string(),
        config: *cfg,
        seed: cfg.prune.seed,
        n_img: batch.n_img(),
        n_text: batch.n_text(),
        layer: batch.layer(),
        rows,
    })
}
