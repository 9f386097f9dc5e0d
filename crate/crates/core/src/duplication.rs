//! Information-duplication similarities between image tokens.
//!
//! In the dual-weight space the similarity of tokens `i` and `j` is the
//! cosine between their rank-1 updates,
//!
//! ```text
//! S_ij = cos(v_i, v_j) · exp(-‖k_i - k_j‖² / (2√d))
//! ```
//!
//! and the reported cell is `S_ij²` averaged over heads. The other spaces
//! are baselines that square a plain cosine in their own space.

use serde::{Deserialize, Serialize};

use crate::attention::{exp_kernel_log, gram, KernelParams};
use crate::batch::TokenBatch;
use crate::error::{Error, Result};
use crate::rope::{apply_rope, RopeParams};
use crate::tensor::{cosine, dot, norm, sq_dist, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SimilaritySpace {
    DualWeight,
    KernelizedKey,
    KeyCosine,
    ValueCosine,
    HiddenCosine,
}

/// Order of squaring and head averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum HeadReduction {
    /// mean over heads of `S²`
    MeanOfSquares,
    /// square of the head-mean of `S`
    SquareOfMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DuplicationConfig {
    pub space: SimilaritySpace,
    /// RoPE for keys; on by default for this metric.
    pub rope: RopeParams,
    pub reduction: HeadReduction,
}

impl Default for DuplicationConfig {
    fn default() -> Self {
        Self {
            space: SimilaritySpace::DualWeight,
            rope: RopeParams::on(),
            reduction: HeadReduction::MeanOfSquares,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityBlock {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    /// `[|rows|, |cols|]` squared, head-averaged similarities in `[0, 1]`.
    pub cells: Matrix,
    /// Cells where a zero-norm vector forced the cosine to 0.
    pub zero_norm_cells: usize,
}

/// Anything that can produce duplication blocks between token sets.
pub trait Duplication {
    fn block(&self, rows: &[usize], cols: &[usize]) -> Result<SimilarityBlock>;
}

/// `S_ij` through the factorized form: value cosine times the RBF kernel
/// of the keys.
pub fn dual_similarity_factorized(
    ki: &[f64],
    kj: &[f64],
    vi: &[f64],
    vj: &[f64],
    params: &KernelParams,
) -> f64 {
    cosine(vi, vj) * rbf_similarity(ki, kj, params)
}

/// `exp(-‖x - y‖² / (2√d))`, the cosine of two keys in the kernel's
/// feature space.
pub fn rbf_similarity(x: &[f64], y: &[f64], params: &KernelParams) -> f64 {
    (-sq_dist(x, y) / (2.0 * params.scale())).exp()
}

/// `S_ij` computed directly as `⟨ΔW_i, ΔW_j⟩_F / (‖ΔW_i‖_F ‖ΔW_j‖_F)` from
/// the Gram entries of the two rank-1 updates.
pub fn dual_similarity_direct(
    ki: &[f64],
    kj: &[f64],
    vi: &[f64],
    vj: &[f64],
    params: &KernelParams,
) -> Result<f64> {
    let keys = Matrix::from_rows(&[ki.to_vec(), kj.to_vec()]);
    let values = Matrix::from_rows(&[vi.to_vec(), vj.to_vec()]);
    let g = gram(&[0, 1], &[0, 1], &keys, &values, params)?;
    let (ii, jj, ij) = (g.inner(0, 0)?, g.inner(1, 1)?, g.inner(0, 1)?);
    let denom = (ii * jj).sqrt();
    Ok(if denom == 0.0 { 0.0 } else { ij / denom })
}

/// The RBF reduction written through log-kernels:
/// `exp(log κ(x,y) - ½ log κ(x,x) - ½ log κ(y,y))`.
pub fn normalized_kernel(x: &[f64], y: &[f64], params: &KernelParams) -> f64 {
    (exp_kernel_log(x, y, params)
        - 0.5 * exp_kernel_log(x, x, params)
        - 0.5 * exp_kernel_log(y, y, params))
    .exp()
}

/// Per-batch precomputation for repeated block queries.
pub struct DuplicationContext<'a> {
    batch: &'a TokenBatch,
    cfg: DuplicationConfig,
    params: KernelParams,
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
    value_norms: Vec<Vec<f64>>,
    key_norms: Vec<Vec<f64>>,
}

impl<'a> DuplicationContext<'a> {
    pub fn new(batch: &'a TokenBatch, cfg: DuplicationConfig) -> Result<Self> {
        if cfg.space == SimilaritySpace::HiddenCosine && batch.hidden().is_none() {
            return Err(Error::Config("hidden_cosine needs a batch with hidden states".into()));
        }
        let params = KernelParams::new(batch.head_dim())?;
        let mut keys = Vec::with_capacity(batch.heads());
        let mut values = Vec::with_capacity(batch.heads());
        for h in 0..batch.heads() {
            keys.push(apply_rope(&batch.head_keys(h), batch.positions(), &cfg.rope)?);
            values.push(batch.head_values(h));
        }
        let value_norms = values
            .iter()
            .map(|m| (0..m.rows()).map(|i| norm(m.row(i))).collect())
            .collect();
        let key_norms = keys
            .iter()
            .map(|m| (0..m.rows()).map(|i| norm(m.row(i))).collect())
            .collect();
        Ok(Self { batch, cfg, params, keys, values, value_norms, key_norms })
    }

    pub fn config(&self) -> &DuplicationConfig {
        &self.cfg
    }

    /// Signed similarity in head `h` before squaring. The flag reports a
    /// zero-norm vector.
    pub fn signed(&self, h: usize, i: usize, j: usize) -> (f64, bool) {
        let guarded = |a: &[f64], b: &[f64], na: f64, nb: f64| {
            if na == 0.0 || nb == 0.0 {
                (0.0, true)
            } else {
                (dot(a, b) / (na * nb), false)
            }
        };
        let (keys, values) = (&self.keys[h], &self.values[h]);
        let (vn, kn) = (&self.value_norms[h], &self.key_norms[h]);
        match self.cfg.space {
            SimilaritySpace::DualWeight => {
                let (c, zero) = guarded(values.row(i), values.row(j), vn[i], vn[j]);
                (c * rbf_similarity(keys.row(i), keys.row(j), &self.params), zero)
            }
            SimilaritySpace::KernelizedKey => {
                (rbf_similarity(keys.row(i), keys.row(j), &self.params), false)
            }
            SimilaritySpace::KeyCosine => guarded(keys.row(i), keys.row(j), kn[i], kn[j]),
            SimilaritySpace::ValueCosine => guarded(values.row(i), values.row(j), vn[i], vn[j]),
            SimilaritySpace::HiddenCosine => {
                let hid = self.batch.hidden().expect("checked in new");
                let (a, b) = (hid.row(i), hid.row(j));
                guarded(a, b, norm(a), norm(b))
            }
        }
    }

    fn cell(&self, i: usize, j: usize) -> (f64, bool) {
        let heads = if self.cfg.space == SimilaritySpace::HiddenCosine {
            1
        } else {
            self.batch.heads()
        };
        let mut any_zero = false;
        let mut acc = 0.0;
        for h in 0..heads {
            let (s, zero) = self.signed(h, i, j);
            any_zero |= zero;
            acc += match self.cfg.reduction {
                HeadReduction::MeanOfSquares => s * s,
                HeadReduction::SquareOfMean => s,
            };
        }
        let mean = acc / heads as f64;
        let value = match self.cfg.reduction {
            HeadReduction::MeanOfSquares => mean,
            HeadReduction::SquareOfMean => mean * mean,
        };
        (value.clamp(0.0, 1.0), any_zero)
    }
}

impl Duplication for DuplicationContext<'_> {
    fn block(&self, rows: &[usize], cols: &[usize]) -> Result<SimilarityBlock> {
        let n_img = self.batch.n_img();
        if let Some(bad) = rows.iter().chain(cols).find(|&&i| i >= n_img) {
            return Err(Error::Config(format!("token {bad} is not an image token")));
        }
        let mut cells = Matrix::zeros(rows.len(), cols.len());
        let mut zero_norm_cells = 0;
        for (r, &i) in rows.iter().enumerate() {
            for (c, &j) in cols.iter().enumerate() {
                let (v, zero) = self.cell(i, j);
                cells.set(r, c, v);
                zero_norm_cells += zero as usize;
            }
        }
        Ok(SimilarityBlock {
            rows: rows.to_vec(),
            cols: cols.to_vec(),
            cells,
            zero_norm_cells,
        })
    }
}

/// A fully materialized similarity matrix over image tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSimilarity(pub Matrix);

impl Duplication for DenseSimilarity {
    fn block(&self, rows: &[usize], cols: &[usize]) -> Result<SimilarityBlock> {
        let n = self.0.rows();
        if let Some(bad) = rows.iter().chain(cols).find(|&&i| i >= n) {
            return Err(Error::Config(format!("token {bad} out of range")));
        }
        let mut cells = Matrix::zeros(rows.len(), cols.len());
        for (r, &i) in rows.iter().enumerate() {
            for (c, &j) in cols.iter().enumerate() {
                cells.set(r, c, self.0.get(i, j));
            }
        }
        Ok(SimilarityBlock { rows: rows.to_vec(), cols: cols.to_vec(), cells, zero_norm_cells: 0 })
    }
}

pub fn duplication_block(
    batch: &TokenBatch,
    rows: &[usize],
    cols: &[usize],
    cfg: DuplicationConfig,
) -> Result<SimilarityBlock> {
    DuplicationContext::new(batch, cfg)?.block(rows, cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic_batch, SynthSpec};
    use crate::tensor::Tensor;

    fn batch(k: &[Vec<f64>], v: &[Vec<f64>], heads: usize) -> TokenBatch {
        let n = k.len() / heads;
        let d = k[0].len();
        let dv = v[0].len();
        TokenBatch::new(
            Tensor::new(vec![heads, n, d], vec![0.0; heads * n * d]).unwrap(),
            Tensor::new(vec![heads, n, d], k.concat()).unwrap(),
            Tensor::new(vec![heads, n, dv], v.concat()).unwrap(),
            None,
            n - 1,
            1,
            None,
            0,
        )
        .unwrap()
    }

    fn off() -> DuplicationConfig {
        DuplicationConfig { rope: RopeParams::off(), ..Default::default() }
    }

    #[test]
    fn self_similarity_is_one() {
        let b = generate_synthetic_batch(&SynthSpec::default()).unwrap().batch;
        let blk = duplication_block(&b, &[3, 10], &[3, 10], DuplicationConfig::default()).unwrap();
        assert!((blk.cells.get(0, 0) - 1.0).abs() < 1e-15);
        assert!((blk.cells.get(1, 1) - 1.0).abs() < 1e-15);
        assert_eq!(blk.cells.get(0, 1), blk.cells.get(1, 0));
    }

    #[test]
    fn antipodal_values_still_duplicate() {
        let b = batch(
            &[vec![0.5, 0.2], vec![0.5, 0.2], vec![0.0, 0.0]],
            &[vec![1.0, -2.0], vec![-1.0, 2.0], vec![1.0, 1.0]],
            1,
        );
        let blk = duplication_block(&b, &[0], &[1], off()).unwrap();
        let ctx = DuplicationContext::new(&b, off()).unwrap();
        assert!((ctx.signed(0, 0, 1).0 + 1.0).abs() < 1e-15);
        assert!((blk.cells.get(0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_values_never_duplicate() {
        let b = batch(
            &[vec![0.5, 0.2], vec![0.5, 0.2], vec![0.0, 0.0]],
            &[vec![1.0, 0.0], vec![0.0, 3.0], vec![1.0, 1.0]],
            1,
        );
        for space in [SimilaritySpace::DualWeight, SimilaritySpace::ValueCosine] {
            let cfg = DuplicationConfig { space, ..off() };
            assert_eq!(duplication_block(&b, &[0], &[1], cfg).unwrap().cells.get(0, 0), 0.0);
        }
    }

    #[test]
    fn zero_value_is_flagged_not_nan() {
        let b = batch(
            &[vec![0.5, 0.2], vec![0.1, 0.2], vec![0.0, 0.0]],
            &[vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0]],
            1,
        );
        let blk = duplication_block(&b, &[0, 1], &[0, 1], off()).unwrap();
        assert_eq!(blk.cells.get(0, 1), 0.0);
        assert_eq!(blk.cells.get(0, 0), 0.0);
        assert_eq!(blk.zero_norm_cells, 3);
    }

    #[test]
    fn hidden_space_requires_hidden() {
        let b = batch(&vec![vec![0.5, 0.2]; 3], &vec![vec![1.0, 0.0]; 3], 1);
        let cfg = DuplicationConfig { space: SimilaritySpace::HiddenCosine, ..off() };
        assert!(matches!(duplication_block(&b, &[0], &[1], cfg), Err(Error::Config(_))));
    }

    #[test]
    fn text_tokens_are_rejected() {
        let b = batch(&vec![vec![0.5, 0.2]; 3], &vec![vec![1.0, 0.0]; 3], 1);
        assert!(matches!(duplication_block(&b, &[0], &[2], off()), Err(Error::Config(_))));
    }

    #[test]
    fn factorized_matches_direct() {
        let b = generate_synthetic_batch(&SynthSpec { heads: 1, ..SynthSpec::default() }).unwrap().batch;
        let p = KernelParams::new(b.head_dim()).unwrap();
        let (k, v) = (b.head_keys(0), b.head_values(0));
        for (i, j) in [(0, 1), (2, 40), (7, 7), (13, 63)] {
            let f = dual_similarity_factorized(k.row(i), k.row(j), v.row(i), v.row(j), &p);
            let d = dual_similarity_direct(k.row(i), k.row(j), v.row(i), v.row(j), &p).unwrap();
            assert!((f - d).abs() < 1e-10);
        }
    }

    #[test]
    fn rbf_reduction_matches_normalized_kernel() {
        let p = KernelParams::new(4).unwrap();
        let x = [0.3, -1.0, 2.0, 0.1];
        let y = [1.1, 0.4, -0.7, 0.9];
        assert!((rbf_similarity(&x, &y, &p) - normalized_kernel(&x, &y, &p)).abs() < 1e-12);
    }

    #[test]
    fn square_of_mean_differs_from_mean_of_squares() {
        // head 0: identical tokens; head 1: antipodal values
        let b = batch(
            &[vec![0.1, 0.1], vec![0.1, 0.1], vec![0.0, 0.0], vec![0.1, 0.1], vec![0.1, 0.1], vec![0.0, 0.0]],
            &[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0], vec![1.0, 0.0]],
            2,
        );
        let mos = duplication_block(&b, &[0], &[1], off()).unwrap().cells.get(0, 0);
        let cfg = DuplicationConfig { reduction: HeadReduction::SquareOfMean, ..off() };
        let som = duplication_block(&b, &[0], &[1], cfg).unwrap().cells.get(0, 0);
        assert!((mos - 1.0).abs() < 1e-15);
        assert!(som.abs() < 1e-15);
    }
}
