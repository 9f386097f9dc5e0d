//! Token-subset selection.
//!
//! [`pc_mmr`] is the progressive chunked variant of maximal marginal
//! relevance: each round moves the `L_new` best candidates (by penalized
//! magnitude) into the kept set, compares only that new chunk against the
//! remaining candidates to update their running maximum duplication
//! `s_max`, re-penalizes, and grows the chunk size geometrically. The total
//! number of similarity cells it evaluates is bounded by `K · N_img`.

use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::TokenBatch;
use crate::duplication::{Duplication, DuplicationConfig, DuplicationContext};
use crate::error::{Error, Result};
use crate::magnitude::{MagnitudeConfig, ScoreVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyForm {
    /// `P · (1 - s_max)^λ`
    Power,
    /// `P · exp(-λ · s_max)`
    Exponential,
    /// `P - λ · s_max`
    Additive,
}

impl PenaltyForm {
    pub fn apply(self, score: f64, s_max: f64, lambda: f64) -> f64 {
        match self {
            PenaltyForm::Power => score * (1.0 - s_max).max(0.0).powf(lambda),
            PenaltyForm::Exponential => score * (-lambda * s_max).exp(),
            PenaltyForm::Additive => score - lambda * s_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Fraction of image tokens removed.
    pub rho: f64,
    pub lambda: f64,
    pub b0: usize,
    pub growth: f64,
    pub penalty: PenaltyForm,
    pub magnitude: MagnitudeConfig,
    pub duplication: DuplicationConfig,
    pub layer: usize,
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            rho: 0.889,
            lambda: 5.0,
            b0: 2,
            growth: 2.0,
            penalty: PenaltyForm::Power,
            magnitude: MagnitudeConfig::default(),
            duplication: DuplicationConfig::default(),
            layer: 4,
            seed: 0,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!("reduction ratio {} outside [0, 1)", self.rho)));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.b0 == 0 {
            return Err(Error::Config("initial chunk size must be at least 1".into()));
        }
        if !self.growth.is_finite() || self.growth < 1.0 {
            return Err(Error::Config(format!("growth must be >= 1, got {}", self.growth)));
        }
        Ok(())
    }

    pub fn keep_count(&self, n_img: usize) -> Result<usize> {
        keep_count(n_img, self.rho)
    }
}

/// `round((1 - rho) · n_img)` with halves rounded up.
pub fn keep_count(n_img: usize, rho: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Config(format!("reduction ratio {rho} outside [0, 1)")));
    }
    let k = ((1.0 - rho) * n_img as f64 + 0.5).floor() as usize;
    if k < 1 || k > n_img {
        return Err(Error::Config(format!(
            "keep count {k} must lie in 1..={n_img} (rho {rho})"
        )));
    }
    Ok(k)
}

/// One round of a selection loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Iteration {
    pub chunk_size: usize,
    pub picked: Vec<usize>,
    /// Penalized score of each picked token at the moment it was picked.
    pub picked_scores: Vec<f64>,
    /// Similarity cells evaluated after this round.
    pub cells_evaluated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Sorted kept image-token indices.
    pub kept: Vec<usize>,
    pub order: Vec<Iteration>,
    /// Final accumulated maximum duplication per image token.
    pub s_max: Vec<f64>,
    pub cells_evaluated: usize,
}

impl SelectionResult {
    fn from_order(order: Vec<Iteration>, s_max: Vec<f64>) -> Self {
        let mut kept: Vec<usize> = order.iter().flat_map(|it| it.picked.iter().copied()).collect();
        kept.sort_unstable();
        let cells_evaluated = order.iter().map(|it| it.cells_evaluated).sum();
        Self { kept, order, s_max, cells_evaluated }
    }

    pub fn chunk_sizes(&self) -> Vec<usize> {
        self.order.iter().map(|it| it.chunk_size).collect()
    }
}

/// Descending score, then ascending index.
fn rank_desc(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

fn check_keep(n_img: usize, keep: usize) -> Result<()> {
    if keep < 1 || keep > n_img {
        return Err(Error::Config(format!("keep count {keep} must lie in 1..={n_img}")));
    }
    Ok(())
}

/// Progressive chunked MMR over an arbitrary duplication source.
pub fn pc_mmr_with(
    scores: &ScoreVector,
    dup: &dyn Duplication,
    cfg: &PruneConfig,
    keep: usize,
) -> Result<SelectionResult> {
    cfg.validate()?;
    let n = scores.len();
    check_keep(n, keep)?;
    let p = &scores.scores;

    let mut s_max: Vec<f64> = vec![0.0; n];
    let mut penalized: Vec<f64> = p.clone();
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut selected = 0usize;
    let mut chunk = cfg.b0 as f64;
    let mut order = Vec::new();

    while selected < keep {
        let take = (chunk.min(usize::MAX as f64) as usize).min(keep - selected);
        let mut ranked: Vec<(usize, f64)> = remaining.iter().map(|&u| (u, penalized[u])).collect();
        ranked.sort_by(rank_desc);
        let new: Vec<(usize, f64)> = ranked[..take].to_vec();
        let picked: Vec<usize> = new.iter().map(|&(i, _)| i).collect();
        let mut is_new = vec![false; n];
        picked.iter().for_each(|&i| is_new[i] = true);
        remaining.retain(|&u| !is_new[u]);
        selected += take;

        let mut cells = 0;
        if selected < keep && !remaining.is_empty() {
            let block = dup.block(&picked, &remaining)?;
            cells = picked.len() * remaining.len();
            for (c, &u) in remaining.iter().enumerate() {
                let chunk_max = (0..picked.len())
                    .map(|r| block.cells.get(r, c))
                    .fold(f64::NEG_INFINITY, f64::max);
                s_max[u] = s_max[u].max(chunk_max);
                penalized[u] = cfg.penalty.apply(p[u], s_max[u], cfg.lambda);
            }
        }
        order.push(Iteration {
            chunk_size: take,
            picked,
            picked_scores: new.iter().map(|&(_, s)| s).collect(),
            cells_evaluated: cells,
        });
        chunk *= cfg.growth;
    }
    Ok(SelectionResult::from_order(order, s_max))
}

/// Progressive chunked MMR with dual-form duplication computed from `batch`.
pub fn pc_mmr(scores: &ScoreVector, batch: &TokenBatch, cfg: &PruneConfig) -> Result<SelectionResult> {
    let keep = cfg.keep_count(batch.n_img())?;
    if scores.len() != batch.n_img() {
        return Err(Error::Consistency(format!(
            "{} scores for {} image tokens",
            scores.len(),
            batch.n_img()
        )));
    }
    let ctx = DuplicationContext::new(batch, cfg.duplication)?;
    pc_mmr_with(scores, &ctx, cfg, keep)
}

/// One-at-a-time greedy with the same penalty rule as [`pc_mmr_with`]:
/// each step recomputes every candidate's maximum duplication against the
/// whole kept set and picks the best penalized score.
pub fn sequential_mmr_multiplicative(
    scores: &ScoreVector,
    dup: &dyn Duplication,
    cfg: &PruneConfig,
    keep: usize,
) -> Result<SelectionResult> {
    cfg.validate()?;
    let n = scores.len();
    check_keep(n, keep)?;
    let p = &scores.scores;
    let mut chosen: Vec<usize> = Vec::with_capacity(keep);
    let mut in_chosen = vec![false; n];
    let mut s_max: Vec<f64> = vec![0.0; n];
    let mut order = Vec::with_capacity(keep);

    for _ in 0..keep {
        let candidates: Vec<usize> = (0..n).filter(|&u| !in_chosen[u]).collect();
        let mut cells = 0;
        if !chosen.is_empty() {
            let block = dup.block(&candidates, &chosen)?;
            cells = candidates.len() * chosen.len();
            for (r, &u) in candidates.iter().enumerate() {
                s_max[u] = (0..chosen.len()).map(|c| block.cells.get(r, c)).fold(0.0, f64::max);
            }
        }
        let best = candidates
            .iter()
            .map(|&u| (u, cfg.penalty.apply(p[u], s_max[u], cfg.lambda)))
            .min_by(rank_desc)
            .expect("keep <= n leaves a candidate");
        chosen.push(best.0);
        in_chosen[best.0] = true;
        order.push(Iteration {
            chunk_size: 1,
            picked: vec![best.0],
            picked_scores: vec![best.1],
            cells_evaluated: cells,
        });
    }
    Ok(SelectionResult::from_order(order, s_max))
}

/// Classic additive MMR, `argmax λ·P_i - (1-λ)·max_{j∈C} S_ij` with
/// `λ ∈ [0, 1]`.
pub fn sequential_mmr_additive(
    scores: &ScoreVector,
    dup: &dyn Duplication,
    lambda: f64,
    keep: usize,
) -> Result<SelectionResult> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!(
            "additive MMR needs lambda in [0, 1], got {lambda}"
        )));
    }
    let n = scores.len();
    check_keep(n, keep)?;
    let p = &scores.scores;
    let mut in_chosen = vec![false; n];
    let mut s_max: Vec<f64> = vec![0.0; n];
    let mut order = Vec::with_capacity(keep);
    let mut last: Option<usize> = None;

    for _ in 0..keep {
        let candidates: Vec<usize> = (0..n).filter(|&u| !in_chosen[u]).collect();
        let mut cells = 0;
        if let Some(j) = last {
            // only the newest pick can raise a candidate's max
            let block = dup.block(&candidates, &[j])?;
            cells = candidates.len();
            for (r, &u) in candidates.iter().enumerate() {
                s_max[u] = s_max[u].max(block.cells.get(r, 0));
            }
        }
        let best = candidates
            .iter()
            .map(|&u| (u, lambda * p[u] - (1.0 - lambda) * s_max[u]))
            .min_by(rank_desc)
            .expect("keep <= n leaves a candidate");
        in_chosen[best.0] = true;
        last = Some(best.0);
        order.push(Iteration {
            chunk_size: 1,
            picked: vec![best.0],
            picked_scores: vec![best.1],
            cells_evaluated: cells,
        });
    }
    Ok(SelectionResult::from_order(order, s_max))
}

/// The `keep` highest scores, ties to the lower index.
pub fn top_k(scores: &ScoreVector, keep: usize) -> Result<SelectionResult> {
    let n = scores.len();
    check_keep(n, keep)?;
    let mut ranked: Vec<(usize, f64)> = scores.scores.iter().copied().enumerate().collect();
    ranked.sort_by(rank_desc);
    ranked.truncate(keep);
    let order = vec![Iteration {
        chunk_size: keep,
        picked: ranked.iter().map(|&(i, _)| i).collect(),
        picked_scores: ranked.iter().map(|&(_, s)| s).collect(),
        cells_evaluated: 0,
    }];
    Ok(SelectionResult::from_order(order, vec![0.0; n]))
}

/// Uniformly random `keep`-subset, deterministic per seed.
pub fn random_select(n_img: usize, keep: usize, seed: u64) -> Result<SelectionResult> {
    check_keep(n_img, keep)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, n_img, keep).into_vec();
    let order = vec![Iteration {
        chunk_size: keep,
        picked_scores: vec![0.0; keep],
        picked,
        cells_evaluated: 0,
    }];
    Ok(SelectionResult::from_order(order, vec![0.0; n_img]))
}

/// Convenience bundle of the default magnitude + PC-MMR pipeline.
pub fn prune_batch(batch: &TokenBatch, cfg: &PruneConfig) -> Result<SelectionResult> {
    let scores = crate::magnitude::magnitude_scores(batch, &cfg.magnitude)?;
    pc_mmr(&scores, batch, cfg)
}
