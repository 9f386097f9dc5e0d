//! Rotary position embedding with interleaved `(2j, 2j+1)` pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeParams {
    pub base: f64,
    pub rotate: bool,
}

impl RopeParams {
    pub fn on() -> Self {
        Self { base: DEFAULT_ROPE_BASE, rotate: true }
    }

    pub fn off() -> Self {
        Self { base: DEFAULT_ROPE_BASE, rotate: false }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !self.base.is_finite() || self.base <= 1.0 {
            return Err(Error::Config(format!("rope base must exceed 1, got {}", self.base)));
        }
        if self.rotate && !dim.is_multiple_of(2) {
            return Err(Error::Config(format!("rope needs an even head dim, got {dim}")));
        }
        Ok(())
    }
}

/// Rotates one row in place by the angles for `position`.
pub fn rotate_row(row: &mut [f64], position: usize, base: f64) {
    let d = row.len();
    for j in 0..d / 2 {
        let theta = position as f64 * base.powf(-(2.0 * j as f64) / d as f64);
        let (sin, cos) = theta.sin_cos();
        let (a, b) = (row[2 * j], row[2 * j + 1]);
        row[2 * j] = a * cos - b * sin;
        row[2 * j + 1] = a * sin + b * cos;
    }
}

/// Applies the inverse rotation, so `unrotate_row(rotate_row(x))` is `x`.
pub fn unrotate_row(row: &mut [f64], position: usize, base: f64) {
    let d = row.len();
    for j in 0..d / 2 {
        let theta = position as f64 * base.powf(-(2.0 * j as f64) / d as f64);
        let (sin, cos) = theta.sin_cos();
        let (a, b) = (row[2 * j], row[2 * j + 1]);
        row[2 * j] = a * cos + b * sin;
        row[2 * j + 1] = -a * sin + b * cos;
    }
}

/// Rotates every row of `mat` by its position. Returns a copy unchanged
/// when `params.rotate` is false.
pub fn apply_rope(mat: &Matrix, positions: &[usize], params: &RopeParams) -> Result<Matrix> {
    params.validate(mat.cols())?;
    if positions.len() != mat.rows() {
        return Err(Error::Config(format!(
            "{} positions for {} rows",
            positions.len(),
            mat.rows()
        )));
    }
    let mut out = mat.clone();
    if params.rotate {
        for (i, &p) in positions.iter().enumerate() {
            rotate_row(out.row_mut(i), p, params.base);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{dot, norm};

    #[test]
    fn position_zero_is_identity() {
        let m = Matrix::from_rows(&[vec![0.3, -1.2, 2.0, 0.5]]);
        assert_eq!(apply_rope(&m, &[0], &RopeParams::on()).unwrap(), m);
    }

    #[test]
    fn unit_vector_at_position_one() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0]]);
        let r = apply_rope(&m, &[1], &RopeParams::on()).unwrap();
        assert!((r.get(0, 0) - 1f64.cos()).abs() < 1e-15);
        assert!((r.get(0, 1) - 1f64.sin()).abs() < 1e-15);
        assert!((r.get(0, 0) - 0.5403).abs() < 1e-4);
        assert!((r.get(0, 1) - 0.8415).abs() < 1e-4);
    }

    #[test]
    fn odd_dim_is_config_error() {
        let m = Matrix::zeros(2, 3);
        assert!(matches!(apply_rope(&m, &[0, 1], &RopeParams::on()), Err(Error::Config(_))));
        // no rotation requested: odd dims are fine
        assert!(apply_rope(&m, &[0, 1], &RopeParams::off()).is_ok());
    }

    #[test]
    fn bad_base_rejected() {
        let p = RopeParams { base: 1.0, rotate: true };
        assert!(p.validate(4).is_err());
    }

    #[test]
    fn preserves_norms_and_equal_position_angles() {
        let rows = vec![vec![1.0, 2.0, -0.5, 0.25, 3.0, -1.0], vec![-0.7, 0.1, 0.9, 1.4, -2.2, 0.3]];
        let m = Matrix::from_rows(&rows);
        let r = apply_rope(&m, &[17, 17], &RopeParams::on()).unwrap();
        for i in 0..2 {
            assert!((norm(m.row(i)) - norm(r.row(i))).abs() < 1e-12);
        }
        assert!((dot(m.row(0), m.row(1)) - dot(r.row(0), r.row(1))).abs() < 1e-12);
    }

    #[test]
    fn unrotate_inverts() {
        let mut row = vec![0.2, -0.4, 1.5, 0.7];
        let orig = row.clone();
        rotate_row(&mut row, 41, DEFAULT_ROPE_BASE);
        unrotate_row(&mut row, 41, DEFAULT_ROPE_BASE);
        for (a, b) in row.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
