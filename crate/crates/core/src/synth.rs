//! Seeded synthetic batches with planted redundancy.
//!
//! Image tokens are grouped into clusters; each cluster shares a key and a
//! value centroid per head and its members are centroid plus isotropic
//! Gaussian noise, so within-cluster rank-1 updates are near duplicates.
//! Text tokens are drawn independently.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::batch::TokenBatch;
use crate::error::{Error, Result};
use crate::rope::{unrotate_row, DEFAULT_ROPE_BASE};
use crate::tensor::{norm, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub heads: usize,
    pub n_img: usize,
    pub n_text: usize,
    pub dim: usize,
    pub value_dim: usize,
    pub clusters: usize,
    pub noise: f64,
    /// Log-normal sigma of a per-token value amplitude; scales value
    /// length only, never direction.
    pub amplitude_spread: f64,
    /// Weight in `[0, 1]` pulling text queries toward the key centroid of
    /// one image cluster (the region the text is about).
    pub text_focus: f64,
    /// Upper bound on every generated key and query norm; `None` means `√(2d)`.
    pub key_norm_cap: Option<f64>,
    /// Plant clusters in the RoPE-rotated key frame (the frame attention
    /// sees) instead of the raw projection frame.
    pub rotated_frame: bool,
    pub layer: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            heads: 2,
            n_img: 64,
            n_text: 8,
            dim: 16,
            value_dim: 16,
            clusters: 4,
            noise: 0.05,
            amplitude_spread: 0.3,
            text_focus: 0.5,
            key_norm_cap: None,
            rotated_frame: true,
            layer: 4,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn norm_cap(&self) -> f64 {
        self.key_norm_cap.unwrap_or_else(|| (2.0 * self.dim as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.dim == 0 || self.value_dim == 0 {
            return fail("heads, dim and value dim must be positive".into());
        }
        if self.n_img == 0 || self.n_text == 0 {
            return fail("need at least one image and one text token".into());
        }
        if self.clusters == 0 || self.clusters > self.n_img {
            return fail(format!(
                "cluster count {} must lie in 1..={}",
                self.clusters, self.n_img
            ));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return fail(format!("cluster noise must be non-negative, got {}", self.noise));
        }
        if !self.amplitude_spread.is_finite() || self.amplitude_spread < 0.0 {
            return fail(format!(
                "amplitude spread must be non-negative, got {}",
                self.amplitude_spread
            ));
        }
        if !(0.0..=1.0).contains(&self.text_focus) {
            return fail(format!("text focus must lie in [0, 1], got {}", self.text_focus));
        }
        if !self.norm_cap().is_finite() || self.norm_cap() <= 0.0 {
            return fail(format!("key norm cap must be positive, got {}", self.norm_cap()));
        }
        if self.rotated_frame && !self.dim.is_multiple_of(2) {
            return fail(format!("rotated-frame planting needs an even dim, got {}", self.dim));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBatch {
    pub batch: TokenBatch,
    /// Ground-truth cluster of each image token.
    pub clusters: Vec<usize>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Gaussian direction scaled to `radius`.
fn on_sphere(rng: &mut ChaCha8Rng, n: usize, radius: f64) -> Vec<f64> {
    let mut v = gaussian(rng, n);
    let len = norm(&v);
    if len > 0.0 {
        v.iter_mut().for_each(|x| *x *= radius / len);
    }
    v
}

fn cap_norm(row: &mut [f64], cap: f64) {
    let n = norm(row);
    if n > cap {
        let s = cap / n;
        row.iter_mut().for_each(|x| *x *= s);
    }
}

pub fn generate_synthetic_batch(spec: &SynthSpec) -> Result<SyntheticBatch> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_img + spec.n_text;
    let (h_count, d, dv) = (spec.heads, spec.dim, spec.value_dim);
    let cap = spec.norm_cap();

    let mut clusters: Vec<usize> = (0..spec.n_img).map(|i| i % spec.clusters).collect();
    clusters.shuffle(&mut rng);
    let topic = clusters[0];
    let amplitudes: Vec<f64> = (0..n)
        .map(|_| (spec.amplitude_spread * normal(&mut rng)).exp())
        .collect();

    let mut queries = Vec::with_capacity(h_count * n * d);
    let mut keys = Vec::with_capacity(h_count * n * d);
    let mut values = Vec::with_capacity(h_count * n * dv);

    for _ in 0..h_count {
        let key_centroids: Vec<Vec<f64>> = (0..spec.clusters)
            .map(|_| on_sphere(&mut rng, d, (d as f64).sqrt()))
            .collect();
        let value_centroids: Vec<Vec<f64>> = (0..spec.clusters)
            .map(|_| on_sphere(&mut rng, dv, (dv as f64).sqrt()))
            .collect();

        for i in 0..n {
            let mut q = gaussian(&mut rng, d);
            if i >= spec.n_img {
                for (x, c) in q.iter_mut().zip(&key_centroids[topic]) {
                    *x = (1.0 - spec.text_focus) * *x + spec.text_focus * c;
                }
            }
            let (mut k, v) = if i < spec.n_img {
                let c = clusters[i];
                let k: Vec<f64> = key_centroids[c]
                    .iter()
                    .map(|x| x + spec.noise * normal(&mut rng))
                    .collect();
                let v: Vec<f64> = value_centroids[c]
                    .iter()
                    .map(|x| x + spec.noise * normal(&mut rng))
                    .collect();
                (k, v)
            } else {
                (gaussian(&mut rng, d), gaussian(&mut rng, dv))
            };
            cap_norm(&mut q, cap);
            cap_norm(&mut k, cap);
            if spec.rotated_frame && i < spec.n_img {
                unrotate_row(&mut k, i, DEFAULT_ROPE_BASE);
            }
            queries.extend(q);
            keys.extend(k);
            values.extend(v.into_iter().map(|x| x * amplitudes[i]));
        }
    }

    // hidden state: per-token concatenation of the head values
    let mut hidden = Vec::with_capacity(n * h_count * dv);
    for i in 0..n {
        for h in 0..h_count {
            let start = (h * n + i) * dv;
            hidden.extend_from_slice(&values[start..start + dv]);
        }
    }

    let batch = TokenBatch::new(
        Tensor::new(vec![h_count, n, d], queries)?,
        Tensor::new(vec![h_count, n, d], keys)?,
        Tensor::new(vec![h_count, n, dv], values)?,
        Some(Tensor::new(vec![n, h_count * dv], hidden)?),
        spec.n_img,
        spec.n_text,
        None,
        spec.layer,
    )?;
    Ok(SyntheticBatch { batch, clusters })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rope::rotate_row;
    use crate::tensor::cosine;

    #[test]
    fn zero_noise_single_cluster_gives_identical_keys() {
        let spec = SynthSpec {
            clusters: 1,
            noise: 0.0,
            rotated_frame: false,
            n_img: 10,
            ..SynthSpec::default()
        };
        let b = generate_synthetic_batch(&spec).unwrap().batch;
        for h in 0..b.heads() {
            for i in 1..b.n_img() {
                assert_eq!(b.keys().row3(h, i), b.keys().row3(h, 0));
            }
        }
    }

    #[test]
    fn zero_noise_single_cluster_rotated_frame_identical_after_rope() {
        let spec = SynthSpec { clusters: 1, noise: 0.0, n_img: 10, ..SynthSpec::default() };
        let b = generate_synthetic_batch(&spec).unwrap().batch;
        let mut first = b.keys().row3(0, 0).to_vec();
        rotate_row(&mut first, 0, DEFAULT_ROPE_BASE);
        for i in 1..b.n_img() {
            let mut k = b.keys().row3(0, i).to_vec();
            rotate_row(&mut k, i, DEFAULT_ROPE_BASE);
            for (a, b) in k.iter().zip(&first) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SynthSpec::default();
        assert_eq!(generate_synthetic_batch(&spec).unwrap(), generate_synthetic_batch(&spec).unwrap());
        let other = SynthSpec { seed: 8, ..spec.clone() };
        assert_ne!(generate_synthetic_batch(&spec).unwrap(), generate_synthetic_batch(&other).unwrap());
    }

    #[test]
    fn too_many_clusters_rejected() {
        let spec = SynthSpec { clusters: 100, ..SynthSpec::default() };
        assert!(matches!(generate_synthetic_batch(&spec), Err(Error::Config(_))));
    }

    /// Mean pairwise cosine of rotated keys inside vs across planted clusters.
    #[test]
    fn within_cluster_keys_are_more_similar() {
        for rotated_frame in [true, false] {
            let spec = SynthSpec { rotated_frame, ..SynthSpec::default() };
            let s = generate_synthetic_batch(&spec).unwrap();
            let b = &s.batch;
            let (mut within, mut nw, mut across, mut na) = (0.0, 0usize, 0.0, 0usize);
            for h in 0..b.heads() {
                let rows: Vec<Vec<f64>> = (0..b.n_img())
                    .map(|i| {
                        let mut k = b.keys().row3(h, i).to_vec();
                        if rotated_frame {
                            rotate_row(&mut k, i, DEFAULT_ROPE_BASE);
                        }
                        k
                    })
                    .collect();
                for i in 0..b.n_img() {
                    for j in i + 1..b.n_img() {
                        let c = cosine(&rows[i], &rows[j]);
                        if s.clusters[i] == s.clusters[j] {
                            within += c;
                            nw += 1;
                        } else {
                            across += c;
                            na += 1;
                        }
                    }
                }
            }
            assert!(within / nw as f64 > across / na as f64);
        }
    }

    #[test]
    fn keys_respect_norm_cap() {
        let spec = SynthSpec { key_norm_cap: Some(1.5), ..SynthSpec::default() };
        let b = generate_synthetic_batch(&spec).unwrap().batch;
        for h in 0..b.heads() {
            for i in 0..b.n_tokens() {
                assert!(norm(b.keys().row3(h, i)) <= 1.5 + 1e-12);
            }
        }
    }
}
