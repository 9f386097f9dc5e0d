//! Reference attention kernels and dual-form algebra.
//!
//! Softmax attention is treated as a kernel machine with the exponential
//! kernel `κ(x, y) = exp(x·y / √d)`. Every kernel quantity is carried as its
//! logarithm and only exponentiated at the point of use; the feature map of
//! `κ` is never materialized, so dual-weight inner products go through
//! `⟨ΔW_i, ΔW_j⟩_F = (v_i·v_j) κ(k_i, k_j)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix, Tensor};

/// Largest log-kernel value that may be exponentiated.
pub const MAX_LOG_KERNEL: f64 = 700.0;

/// Relative tolerance below which a negative squared norm is treated as zero.
pub const RADICAND_CLAMP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelParams {
    /// Per-head dimension; the kernel temperature is `√head_dim`.
    pub head_dim: usize,
}

impl KernelParams {
    pub fn new(head_dim: usize) -> Result<Self> {
        if head_dim == 0 {
            return Err(Error::Config("head dim must be at least 1".into()));
        }
        Ok(Self { head_dim })
    }

    pub fn scale(&self) -> f64 {
        (self.head_dim as f64).sqrt()
    }
}

/// `log κ(x, y) = x·y / √d`.
pub fn exp_kernel_log(x: &[f64], y: &[f64], params: &KernelParams) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    dot(x, y) / params.scale()
}

/// Exponentiates a log-kernel value, refusing values past [`MAX_LOG_KERNEL`].
pub fn checked_exp(log_value: f64, row: usize, col: usize) -> Result<f64> {
    if log_value > MAX_LOG_KERNEL || log_value.is_nan() {
        return Err(Error::NumericRange { row, col, log_value });
    }
    Ok(log_value.exp())
}

fn check_inputs(q: &[f64], keys: &Matrix, values: &Matrix) -> Result<()> {
    if keys.rows() != values.rows() {
        return Err(Error::Consistency(format!(
            "{} keys but {} values",
            keys.rows(),
            values.rows()
        )));
    }
    if keys.cols() != q.len() {
        return Err(Error::Consistency(format!(
            "query dim {} vs key dim {}",
            q.len(),
            keys.cols()
        )));
    }
    if !q.iter().all(|v| v.is_finite()) || !keys.is_finite() || !values.is_finite() {
        return Err(Error::Data("non-finite attention input".into()));
    }
    Ok(())
}

/// Softmax attention for a single query, using a max-shifted softmax.
pub fn softmax_attention(
    q: &[f64],
    keys: &Matrix,
    values: &Matrix,
    params: &KernelParams,
) -> Result<Vec<f64>> {
    check_inputs(q, keys, values)?;
    if keys.rows() == 0 {
        return Err(Error::Degenerate("softmax over zero tokens".into()));
    }
    let logits: Vec<f64> = (0..keys.rows())
        .map(|i| exp_kernel_log(q, keys.row(i), params))
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();

    let mut out = vec![0.0; values.cols()];
    for (i, w) in weights.iter().enumerate() {
        let a = w / total;
        for (o, v) in out.iter_mut().zip(values.row(i)) {
            *o += a * v;
        }
    }
    Ok(out)
}

/// The same output written as `η_N(q) Σ κ(q, k_i) v_i` with
/// `η_N(q) = 1 / Σ κ(q, k_j)`, exponentiating each kernel value directly.
pub fn kernel_expansion_attention(
    q: &[f64],
    keys: &Matrix,
    values: &Matrix,
    params: &KernelParams,
) -> Result<Vec<f64>> {
    check_inputs(q, keys, values)?;
    let mut normalizer = 0.0;
    let mut acc = vec![0.0; values.cols()];
    for i in 0..keys.rows() {
        let kappa = checked_exp(exp_kernel_log(q, keys.row(i), params), usize::MAX, i)?;
        normalizer += kappa;
        for (o, v) in acc.iter_mut().zip(values.row(i)) {
            *o += kappa * v;
        }
    }
    if normalizer == 0.0 {
        return Err(Error::Degenerate("kernel normalizer is zero".into()));
    }
    Ok(acc.into_iter().map(|a| a / normalizer).collect())
}

/// Unnormalized linear attention `Σ (q·k_i) v_i`.
pub fn linear_attention_primal(q: &[f64], keys: &Matrix, values: &Matrix) -> Result<Vec<f64>> {
    check_inputs(q, keys, values)?;
    let mut out = vec![0.0; values.cols()];
    for i in 0..keys.rows() {
        let a = dot(q, keys.row(i));
        for (o, v) in out.iter_mut().zip(values.row(i)) {
            *o += a * v;
        }
    }
    Ok(out)
}

/// Accumulated dual weight `W = Σ k_iᵀ v_i` (shape `d × d_v`), one rank-1
/// outer product per token.
pub fn dual_weight_linear(keys: &Matrix, values: &Matrix) -> Result<Matrix> {
    if keys.rows() != values.rows() {
        return Err(Error::Consistency(format!(
            "{} keys but {} values",
            keys.rows(),
            values.rows()
        )));
    }
    let mut w = Matrix::zeros(keys.cols(), values.cols());
    for i in 0..keys.rows() {
        let (k, v) = (keys.row(i), values.row(i));
        for (a, ka) in k.iter().enumerate() {
            let row = w.row_mut(a);
            for (cell, vb) in row.iter_mut().zip(v) {
                *cell += ka * vb;
            }
        }
    }
    Ok(w)
}

/// Row vector times matrix, `q W`.
pub fn apply_dual_weight(q: &[f64], w: &Matrix) -> Vec<f64> {
    assert_eq!(q.len(), w.rows());
    let mut out = vec![0.0; w.cols()];
    for (a, qa) in q.iter().enumerate() {
        for (o, wab) in out.iter_mut().zip(w.row(a)) {
            *o += qa * wab;
        }
    }
    out
}

/// Gram block between two token selections of the implicit rank-1 updates.
#[derive(Debug, Clone, PartialEq)]
pub struct DualGram {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    /// `v_i · v_j`
    pub value_gram: Matrix,
    /// `k_i · k_j / √d`
    pub log_key_kernel: Matrix,
}

impl DualGram {
    /// `⟨ΔW_i, ΔW_j⟩_F` for block cell `(r, c)`.
    pub fn inner(&self, r: usize, c: usize) -> Result<f64> {
        let kappa = checked_exp(self.log_key_kernel.get(r, c), self.rows[r], self.cols[c])?;
        Ok(self.value_gram.get(r, c) * kappa)
    }

    /// Sum of every cell, in row-major order.
    pub fn total(&self) -> Result<f64> {
        let mut sum = 0.0;
        for r in 0..self.rows.len() {
            for c in 0..self.cols.len() {
                sum += self.inner(r, c)?;
            }
        }
        Ok(sum)
    }
}

pub fn gram(
    rows: &[usize],
    cols: &[usize],
    keys: &Matrix,
    values: &Matrix,
    params: &KernelParams,
) -> Result<DualGram> {
    let n = keys.rows();
    if values.rows() != n {
        return Err(Error::Consistency(format!("{n} keys but {} values", values.rows())));
    }
    if let Some(bad) = rows.iter().chain(cols).find(|&&i| i >= n) {
        return Err(Error::Config(format!("token index {bad} out of range for {n} tokens")));
    }
    let mut value_gram = Matrix::zeros(rows.len(), cols.len());
    let mut log_key_kernel = Matrix::zeros(rows.len(), cols.len());
    for (r, &i) in rows.iter().enumerate() {
        for (c, &j) in cols.iter().enumerate() {
            value_gram.set(r, c, dot(values.row(i), values.row(j)));
            log_key_kernel.set(r, c, exp_kernel_log(keys.row(i), keys.row(j), params));
        }
    }
    Ok(DualGram {
        rows: rows.to_vec(),
        cols: cols.to_vec(),
        value_gram,
        log_key_kernel,
    })
}

/// `‖ΔW_i‖_F = √κ(k_i, k_i) ‖v_i‖`, evaluated in log space.
pub fn rank_one_norm(key: &[f64], value: &[f64], params: &KernelParams) -> f64 {
    let v = dot(value, value).sqrt();
    if v == 0.0 {
        return 0.0;
    }
    (0.5 * exp_kernel_log(key, key, params) + v.ln()).exp()
}

/// Per-head relative error of keeping only a subset of the image tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualWeightError {
    pub per_head: Vec<f64>,
    pub mean: f64,
}

/// `‖W_S − W_N‖_F / ‖W_N‖_F` for a single head, where `W_A = Σ_{i∈A} ΔW_i`.
///
/// Because `S ⊆ N`, the residual `W_N − W_S` is the dual weight of the
/// removed tokens, so its norm is a Gram sum over those tokens only.
pub fn head_relative_error(
    kept: &[usize],
    all_img: &[usize],
    keys: &Matrix,
    values: &Matrix,
    params: &KernelParams,
) -> Result<f64> {
    if all_img.is_empty() {
        return Err(Error::Degenerate("no image tokens to preserve".into()));
    }
    let mut in_kept = vec![false; keys.rows()];
    for &k in kept {
        if k >= keys.rows() {
            return Err(Error::Config(format!("kept index {k} out of range")));
        }
        in_kept[k] = true;
    }
    let mut in_all = vec![false; keys.rows()];
    for &i in all_img {
        in_all[i] = true;
    }
    if let Some(k) = kept.iter().find(|&&k| !in_all[k]) {
        return Err(Error::Config(format!("kept index {k} is not an image token")));
    }
    let removed: Vec<usize> = all_img.iter().copied().filter(|&i| !in_kept[i]).collect();

    let full = gram(all_img, all_img, keys, values, params)?.total()?;
    if full.is_nan() || full <= 0.0 {
        return Err(Error::Degenerate("dual weight has zero norm".into()));
    }
    let residual = gram(&removed, &removed, keys, values, params)?.total()?;
    let ratio = residual / full;
    if ratio < 0.0 {
        if ratio > -RADICAND_CLAMP {
            return Ok(0.0);
        }
        return Err(Error::Degenerate(format!("negative squared residual {ratio:e}")));
    }
    Ok(ratio.sqrt())
}

/// Head-averaged dual-weight relative error over `[H, N, d]` keys and
/// `[H, N, d_v]` values.
pub fn dual_weight_relative_error(
    kept: &[usize],
    all_img: &[usize],
    keys: &Tensor,
    values: &Tensor,
    params: &KernelParams,
) -> Result<DualWeightError> {
    let heads = keys.shape()[0];
    let per_head = (0..heads)
        .map(|h| head_relative_error(kept, all_img, &keys.head(h), &values.head(h), params))
        .collect::<Result<Vec<_>>>()?;
    let mean = per_head.iter().sum::<f64>() / heads as f64;
    Ok(DualWeightError { per_head, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::norm;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        norm(&diff) / norm(b).max(f64::MIN_POSITIVE)
    }

    #[test]
    fn single_token_softmax_returns_value() {
        let k = Matrix::from_rows(&[vec![0.3, -2.0]]);
        let v = Matrix::from_rows(&[vec![1.25, -7.0, 3.0]]);
        let p = KernelParams::new(2).unwrap();
        assert_eq!(softmax_attention(&[5.0, 1.0], &k, &v, &p).unwrap(), v.row(0));
    }

    #[test]
    fn zero_query_averages_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = random_matrix(&mut rng, 5, 4);
        let v = random_matrix(&mut rng, 5, 3);
        let out = softmax_attention(&[0.0; 4], &k, &v, &KernelParams::new(4).unwrap()).unwrap();
        for (c, got) in out.iter().enumerate() {
            let mean = (0..5).map(|i| v.get(i, c)).sum::<f64>() / 5.0;
            assert!((got - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_matches_kernel_expansion_seed3() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = random_matrix(&mut rng, 8, 4);
        let v = random_matrix(&mut rng, 8, 4);
        let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = KernelParams::new(4).unwrap();
        let a = softmax_attention(&q, &k, &v, &p).unwrap();
        let b = kernel_expansion_attention(&q, &k, &v, &p).unwrap();
        assert!(rel_err(&a, &b) < 1e-12);
    }

    #[test]
    fn non_finite_input_rejected() {
        let k = Matrix::from_rows(&[vec![f64::NAN, 0.0]]);
        let v = Matrix::from_rows(&[vec![1.0]]);
        let p = KernelParams::new(2).unwrap();
        assert!(matches!(softmax_attention(&[0.0, 0.0], &k, &v, &p), Err(Error::Data(_))));
        assert!(matches!(linear_attention_primal(&[0.0, 0.0], &k, &v), Err(Error::Data(_))));
    }

    #[test]
    fn linear_attention_zero_cases() {
        let z = Matrix::zeros(3, 2);
        assert_eq!(linear_attention_primal(&[1.0, 2.0], &z, &z).unwrap(), vec![0.0, 0.0]);
        let k = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, -3.0]]);
        let v = Matrix::from_rows(&[vec![4.0, 5.0], vec![6.0, 7.0]]);
        assert_eq!(linear_attention_primal(&[2.0, 0.0], &k, &v).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn linear_primal_equals_dual() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = random_matrix(&mut rng, 9, 6);
        let v = random_matrix(&mut rng, 9, 3);
        let q: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let primal = linear_attention_primal(&q, &k, &v).unwrap();
        let dual = apply_dual_weight(&q, &dual_weight_linear(&k, &v).unwrap());
        assert!(rel_err(&primal, &dual) < 1e-12);
    }

    fn numeric_rank(w: &Matrix) -> usize {
        let m = nalgebra::DMatrix::from_row_slice(w.rows(), w.cols(), w.data());
        let sv = m.singular_values();
        let tol = sv.max() * 1e-10;
        sv.iter().filter(|&&s| s > tol).count()
    }

    #[test]
    fn dual_weight_rank_properties() {
        let k = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]);
        let v = Matrix::from_rows(&[vec![-1.0, 0.5]]);
        let w = dual_weight_linear(&k, &v).unwrap();
        assert_eq!(w.get(2, 0), -3.0);
        assert_eq!(numeric_rank(&w), 1);

        let k2 = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]);
        let v2 = Matrix::from_rows(&[vec![-1.0, 0.5], vec![1.0, -0.5]]);
        assert!(dual_weight_linear(&k2, &v2).unwrap().data().iter().all(|&x| x == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (d, dv) in [(8, 8), (3, 7), (6, 2)] {
            let k = random_matrix(&mut rng, 5, d);
            let v = random_matrix(&mut rng, 5, dv);
            let rank = numeric_rank(&dual_weight_linear(&k, &v).unwrap());
            assert!(rank <= 5.min(d).min(dv));
        }
    }

    #[test]
    fn exp_kernel_log_values() {
        let p = KernelParams::new(4).unwrap();
        assert_eq!(exp_kernel_log(&[0.0; 4], &[1.0, 2.0, 3.0, 4.0], &p), 0.0);
        assert_eq!(exp_kernel_log(&[1.0, 0.0, 0.0, 0.0], &[2.0, 0.0, 0.0, 0.0], &p), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            assert_eq!(exp_kernel_log(&x, &y, &p), exp_kernel_log(&y, &x, &p));
        }
    }

    #[test]
    fn gram_diagonal_is_squared_rank_one_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = random_matrix(&mut rng, 6, 4);
        let v = random_matrix(&mut rng, 6, 5);
        let p = KernelParams::new(4).unwrap();
        for i in 0..6 {
            let g = gram(&[i], &[i], &k, &v, &p).unwrap();
            let expect = rank_one_norm(k.row(i), v.row(i), &p).powi(2);
            assert!((g.inner(0, 0).unwrap() - expect).abs() / expect < 1e-12);
            assert!(g.value_gram.get(0, 0) >= 0.0);
        }
    }

    #[test]
    fn gram_orthogonal_values_and_symmetry() {
        let k = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5]]);
        let v = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]);
        let p = KernelParams::new(2).unwrap();
        let g = gram(&[0], &[1], &k, &v, &p).unwrap();
        assert_eq!(g.value_gram.get(0, 0), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let k = random_matrix(&mut rng, 4, 4);
        let v = random_matrix(&mut rng, 4, 4);
        let idx = [0, 1, 2, 3];
        let g = gram(&idx, &idx, &k, &v, &p).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((g.inner(i, j).unwrap() - g.inner(j, i).unwrap()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gram_overflow_names_pair() {
        let k = Matrix::from_rows(&[vec![40.0, 0.0], vec![40.0, 0.0]]);
        let v = Matrix::from_rows(&[vec![1.0], vec![1.0]]);
        let p = KernelParams::new(2).unwrap();
        let g = gram(&[0], &[1], &k, &v, &p).unwrap();
        match g.inner(0, 0) {
            Err(Error::NumericRange { row: 0, col: 1, .. }) => {}
            other => panic!("expected range error, got {other:?}"),
        }
    }

    /// Expands ‖W_S − W_N‖² = ‖W_S‖² − 2⟨W_S, W_N⟩ + ‖W_N‖² with plain
    /// nested loops.
    fn naive_relative_error(kept: &[usize], all: &[usize], k: &Matrix, v: &Matrix, d: usize) -> f64 {
        let cell = |i: usize, j: usize| {
            let vv: f64 = (0..v.cols()).map(|c| v.get(i, c) * v.get(j, c)).sum();
            let kk: f64 = (0..k.cols()).map(|c| k.get(i, c) * k.get(j, c)).sum();
            vv * (kk / (d as f64).sqrt()).exp()
        };
        let mut ss = 0.0;
        for &i in kept {
            for &j in kept {
                ss += cell(i, j);
            }
        }
        let mut sn = 0.0;
        for &i in kept {
            for &j in all {
                sn += cell(i, j);
            }
        }
        let mut nn = 0.0;
        for &i in all {
            for &j in all {
                nn += cell(i, j);
            }
        }
        ((ss - 2.0 * sn + nn).max(0.0) / nn).sqrt()
    }

    #[test]
    fn relative_error_edge_cases_and_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = random_matrix(&mut rng, 6, 4);
        let v = random_matrix(&mut rng, 6, 4);
        let p = KernelParams::new(4).unwrap();
        let all: Vec<usize> = (0..6).collect();
        assert_eq!(head_relative_error(&all, &all, &k, &v, &p).unwrap(), 0.0);
        assert_eq!(head_relative_error(&[], &all, &k, &v, &p).unwrap(), 1.0);
        let got = head_relative_error(&[0, 1, 2], &all, &k, &v, &p).unwrap();
        let want = naive_relative_error(&[0, 1, 2], &all, &k, &v, 4);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn relative_error_rejects_degenerate_and_foreign_indices() {
        let k = Matrix::zeros(3, 2);
        let v = Matrix::zeros(3, 2);
        let p = KernelParams::new(2).unwrap();
        assert!(matches!(head_relative_error(&[0], &[0, 1], &k, &v, &p), Err(Error::Degenerate(_))));
        let v = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        assert!(matches!(head_relative_error(&[2], &[0, 1], &k, &v, &p), Err(Error::Config(_))));
    }
}
