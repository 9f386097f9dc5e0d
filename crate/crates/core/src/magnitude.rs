//! Information-magnitude scoring of image tokens.
//!
//! The default scorer is `κ(q, k_i) ‖v_i‖`: the exponential-kernel alignment
//! of a token's key with an aggregated query, times the size of its value.
//! Scores are formed in log space, exponentiated after one global max-shift
//! (shared by every head, so the head mean is exact up to a common factor),
//! averaged over heads and min-max normalized over the image tokens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{exp_kernel_log, KernelParams};
use crate::batch::TokenBatch;
use crate::error::{Error, Result};
use crate::rope::{apply_rope, RopeParams};
use crate::tensor::{norm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    /// `κ(q, k_i) ‖v_i‖`
    Iwp,
    /// `κ(q, k_i)`
    Alignment,
    /// `√κ(k_i, k_i) ‖v_i‖`, the Frobenius norm of the rank-1 update
    DeltaWNorm,
    ValueNorm,
    KeyNorm,
    Random,
    Uniform,
}

impl ScorerKind {
    pub fn uses_query(self) -> bool {
        matches!(self, ScorerKind::Iwp | ScorerKind::Alignment)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    MeanText,
    MeanImage,
    LastText,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeConfig {
    pub scorer: ScorerKind,
    pub query_mode: QueryMode,
    /// RoPE for queries and keys; off by default for this metric.
    pub rope: RopeParams,
    /// Seed for the `random` scorer.
    pub seed: u64,
}

impl Default for MagnitudeConfig {
    fn default() -> Self {
        Self {
            scorer: ScorerKind::Iwp,
            query_mode: QueryMode::MeanText,
            rope: RopeParams::off(),
            seed: 0,
        }
    }
}

/// Normalized per-image-token scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
    /// `[H, N_img]` raw values before head averaging, scaled by one shared
    /// positive factor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_per_head: Option<Vec<Vec<f64>>>,
    /// Set when every raw value was equal and all scores were mapped to 0.5.
    pub degenerate: bool,
}

impl ScoreVector {
    /// Min-max normalizes `raw` onto `[0, 1]`.
    pub fn normalize(raw: &[f64]) -> Self {
        let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = max - min;
        if raw.is_empty() || !range.is_finite() || range <= 0.0 {
            return Self { scores: vec![0.5; raw.len()], raw_per_head: None, degenerate: true };
        }
        let scores = raw
            .iter()
            .map(|&r| ((r - min) / range).clamp(0.0, 1.0))
            .collect();
        Self { scores, raw_per_head: None, degenerate: false }
    }

    /// Uses already-normalized scores as they are.
    pub fn from_scores(scores: Vec<f64>) -> Result<Self> {
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Data(format!("score {s} outside [0, 1]")));
        }
        Ok(Self { scores, raw_per_head: None, degenerate: false })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

fn head_matrices(batch: &TokenBatch, h: usize, rope: &RopeParams) -> Result<(Matrix, Matrix)> {
    let q = apply_rope(&batch.head_queries(h), batch.positions(), rope)?;
    let k = apply_rope(&batch.head_keys(h), batch.positions(), rope)?;
    Ok((q, k))
}

fn mean_rows(m: &Matrix, rows: impl Iterator<Item = usize>) -> Vec<f64> {
    let mut acc = vec![0.0; m.cols()];
    let mut count = 0usize;
    for i in rows {
        for (a, x) in acc.iter_mut().zip(m.row(i)) {
            *a += x;
        }
        count += 1;
    }
    acc.iter_mut().for_each(|a| *a /= count as f64);
    acc
}

fn aggregate_rows(batch: &TokenBatch, queries: &Matrix, mode: QueryMode) -> Result<Vec<f64>> {
    let text = batch.n_img()..batch.n_tokens();
    match mode {
        QueryMode::MeanText | QueryMode::LastText if text.is_empty() => {
            Err(Error::Config("text query mode needs at least one text token".into()))
        }
        QueryMode::MeanText => Ok(mean_rows(queries, text)),
        QueryMode::LastText => Ok(queries.row(batch.n_tokens() - 1).to_vec()),
        QueryMode::MeanImage => Ok(mean_rows(queries, 0..batch.n_img())),
    }
}

/// Representative query of head `h` under `mode`. Queries are rotated first
/// only when `rope.rotate` is set.
pub fn aggregate_query(
    batch: &TokenBatch,
    mode: QueryMode,
    h: usize,
    rope: &RopeParams,
) -> Result<Vec<f64>> {
    let q = apply_rope(&batch.head_queries(h), batch.positions(), rope)?;
    aggregate_rows(batch, &q, mode)
}

/// Per-head log raw scores, `[H][N_img]`.
fn log_scores(batch: &TokenBatch, cfg: &MagnitudeConfig) -> Result<Vec<Vec<f64>>> {
    let params = KernelParams::new(batch.head_dim())?;
    let n_img = batch.n_img();
    let random: Vec<f64> = if cfg.scorer == ScorerKind::Random {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        (0..n_img).map(|_| rng.random::<f64>()).collect()
    } else {
        Vec::new()
    };

    let mut out = Vec::with_capacity(batch.heads());
    for h in 0..batch.heads() {
        let (queries, keys) = head_matrices(batch, h, &cfg.rope)?;
        let values = batch.head_values(h);
        let q = if cfg.scorer.uses_query() {
            aggregate_rows(batch, &queries, cfg.query_mode)?
        } else {
            Vec::new()
        };
        let row = (0..n_img)
            .map(|i| {
                let k = keys.row(i);
                let log_v = norm(values.row(i)).ln();
                match cfg.scorer {
                    ScorerKind::Iwp => exp_kernel_log(&q, k, &params) + log_v,
                    ScorerKind::Alignment => exp_kernel_log(&q, k, &params),
                    ScorerKind::DeltaWNorm => 0.5 * exp_kernel_log(k, k, &params) + log_v,
                    ScorerKind::ValueNorm => log_v,
                    ScorerKind::KeyNorm => norm(k).ln(),
                    ScorerKind::Random => random[i].ln(),
                    ScorerKind::Uniform => 0.0,
                }
            })
            .collect();
        out.push(row);
    }
    Ok(out)
}

pub fn magnitude_scores(batch: &TokenBatch, cfg: &MagnitudeConfig) -> Result<ScoreVector> {
    let logs = log_scores(batch, cfg)?;
    let shift = logs
        .iter()
        .flatten()
        .copied()
        .filter(|l| l.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    let shift = if shift.is_finite() { shift } else { 0.0 };
    let raw: Vec<Vec<f64>> = logs
        .iter()
        .map(|row| row.iter().map(|l| (l - shift).exp()).collect())
        .collect();
    let heads = raw.len() as f64;
    let mean: Vec<f64> = (0..batch.n_img())
        .map(|i| raw.iter().map(|row| row[i]).sum::<f64>() / heads)
        .collect();
    let mut scores = ScoreVector::normalize(&mean);
    scores.raw_per_head = Some(raw);
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    /// H=1 batch from explicit image/text rows.
    fn batch(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], n_img: usize) -> TokenBatch {
        let n = q.len();
        let d = q[0].len();
        let dv = v[0].len();
        TokenBatch::new(
            Tensor::new(vec![1, n, d], q.concat()).unwrap(),
            Tensor::new(vec![1, n, d], k.concat()).unwrap(),
            Tensor::new(vec![1, n, dv], v.concat()).unwrap(),
            None,
            n_img,
            n - n_img,
            None,
            0,
        )
        .unwrap()
    }

    #[test]
    fn single_text_token_modes_agree() {
        let b = batch(
            &[vec![1.0, 2.0], vec![3.0, 4.0], vec![0.5, -0.5]],
            &vec![vec![0.0; 2]; 3],
            &vec![vec![1.0]; 3],
            2,
        );
        let off = RopeParams::off();
        let mean = aggregate_query(&b, QueryMode::MeanText, 0, &off).unwrap();
        let last = aggregate_query(&b, QueryMode::LastText, 0, &off).unwrap();
        assert_eq!(mean, last);
        assert_eq!(mean, vec![0.5, -0.5]);
        assert_eq!(aggregate_query(&b, QueryMode::MeanImage, 0, &off).unwrap(), vec![2.0, 3.0]);
    }

    #[test]
    fn mean_text_of_opposite_and_basis_queries() {
        let b = batch(
            &[vec![9.0, 9.0], vec![1.0, -2.0], vec![-1.0, 2.0]],
            &vec![vec![0.0; 2]; 3],
            &vec![vec![1.0]; 3],
            1,
        );
        assert_eq!(aggregate_query(&b, QueryMode::MeanText, 0, &RopeParams::off()).unwrap(), vec![0.0, 0.0]);
        let b = batch(
            &[vec![9.0, 9.0], vec![1.0, 0.0], vec![0.0, 1.0]],
            &vec![vec![0.0; 2]; 3],
            &vec![vec![1.0]; 3],
            1,
        );
        assert_eq!(aggregate_query(&b, QueryMode::MeanText, 0, &RopeParams::off()).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn uniform_scorer_is_degenerate() {
        let b = batch(&vec![vec![1.0, 0.0]; 4], &vec![vec![0.3, 0.1]; 4], &vec![vec![1.0]; 4], 3);
        let cfg = MagnitudeConfig { scorer: ScorerKind::Uniform, ..Default::default() };
        let s = magnitude_scores(&b, &cfg).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.scores, vec![0.5; 3]);
    }

    #[test]
    fn value_norm_min_max() {
        let b = batch(
            &vec![vec![0.0, 0.0]; 4],
            &vec![vec![0.0, 0.0]; 4],
            &[vec![2.0, 0.0], vec![0.0, 4.0], vec![6.0, 0.0], vec![1.0, 1.0]],
            3,
        );
        let cfg = MagnitudeConfig { scorer: ScorerKind::ValueNorm, ..Default::default() };
        let s = magnitude_scores(&b, &cfg).unwrap();
        let want = [0.0, 0.5, 1.0];
        for (a, b) in s.scores.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(s.len(), 3);
    }

    #[test]
    fn iwp_scalar_example() {
        // q = e1, k1 = 2e1, k2 = 2e2, unit values: raw ratio e^1 / e^0
        let b = batch(
            &[vec![0.0; 4], vec![0.0; 4], vec![1.0, 0.0, 0.0, 0.0]],
            &[vec![2.0, 0.0, 0.0, 0.0], vec![0.0, 2.0, 0.0, 0.0], vec![0.0; 4]],
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
            2,
        );
        let s = magnitude_scores(&b, &MagnitudeConfig::default()).unwrap();
        let raw = &s.raw_per_head.as_ref().unwrap()[0];
        assert!((raw[0] / raw[1] - std::f64::consts::E).abs() < 1e-12);
        assert_eq!(s.scores, vec![1.0, 0.0]);
    }

    #[test]
    fn random_scorer_depends_only_on_seed() {
        let b = batch(&vec![vec![1.0, 0.0]; 6], &vec![vec![0.3, 0.1]; 6], &vec![vec![1.0]; 6], 5);
        let cfg = MagnitudeConfig { scorer: ScorerKind::Random, seed: 3, ..Default::default() };
        let a = magnitude_scores(&b, &cfg).unwrap();
        assert_eq!(a, magnitude_scores(&b, &cfg).unwrap());
        let other = MagnitudeConfig { seed: 4, ..cfg };
        assert_ne!(a.scores, magnitude_scores(&b, &other).unwrap().scores);
    }
}
