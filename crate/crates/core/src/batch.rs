//! Token batches and their JSON manifests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npy::{read_npy, write_npy};
use crate::tensor::{Matrix, Tensor};

pub const BATCH_SCHEMA: &str = "dualprune.batch/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

/// One layer's token sequence: per-head projections of `n_img` image tokens
/// followed by `n_text` text tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    queries: Tensor,
    keys: Tensor,
    values: Tensor,
    hidden: Option<Tensor>,
    n_img: usize,
    n_text: usize,
    positions: Vec<usize>,
    layer: usize,
}

impl TokenBatch {
    /// Validates and assembles a batch. `queries`/`keys` are `[H, N, d]`,
    /// `values` is `[H, N, d_v]` and `hidden`, when present, is `[N, d_model]`.
    /// Missing positions default to `0..N`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        queries: Tensor,
        keys: Tensor,
        values: Tensor,
        hidden: Option<Tensor>,
        n_img: usize,
        n_text: usize,
        positions: Option<Vec<usize>>,
        layer: usize,
    ) -> Result<Self> {
        for (name, t) in [("queries", &queries), ("keys", &keys), ("values", &values)] {
            if t.ndim() != 3 {
                return Err(Error::Consistency(format!(
                    "{name} must be [H, N, d], got shape {:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Data(format!("{name} holds non-finite values")));
            }
        }
        let (qs, ks, vs) = (queries.shape(), keys.shape(), values.shape());
        if qs != ks {
            return Err(Error::Consistency(format!("queries {qs:?} vs keys {ks:?}")));
        }
        if vs[0] != ks[0] || vs[1] != ks[1] {
            return Err(Error::Consistency(format!(
                "values {vs:?} disagree with keys {ks:?} on heads or tokens"
            )));
        }
        let n = ks[1];
        if ks[0] == 0 || ks[2] == 0 || vs[2] == 0 {
            return Err(Error::Consistency("heads and head dims must be nonzero".into()));
        }
        if let Some(h) = &hidden {
            if h.ndim() != 2 || h.shape()[0] != n {
                return Err(Error::Consistency(format!(
                    "hidden must be [{n}, d_model], got {:?}",
                    h.shape()
                )));
            }
            if !h.is_finite() {
                return Err(Error::Data("hidden holds non-finite values".into()));
            }
        }
        if n_img == 0 || n_text == 0 {
            return Err(Error::Consistency(format!(
                "need at least one image and one text token, got {n_img} and {n_text}"
            )));
        }
        if n_img + n_text != n {
            return Err(Error::Consistency(format!(
                "n_img {n_img} + n_text {n_text} != {n} tokens"
            )));
        }
        let positions = positions.unwrap_or_else(|| (0..n).collect());
        if positions.len() != n {
            return Err(Error::Consistency(format!(
                "{} positions for {n} tokens",
                positions.len()
            )));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Consistency("positions must be strictly increasing".into()));
        }
        Ok(Self {
            queries,
            keys,
            values,
            hidden,
            n_img,
            n_text,
            positions,
            layer,
        })
    }

    pub fn queries(&self) -> &Tensor {
        &self.queries
    }

    pub fn keys(&self) -> &Tensor {
        &self.keys
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn hidden(&self) -> Option<&Tensor> {
        self.hidden.as_ref()
    }

    pub fn heads(&self) -> usize {
        self.keys.shape()[0]
    }

    pub fn n_tokens(&self) -> usize {
        self.keys.shape()[1]
    }

    pub fn head_dim(&self) -> usize {
        self.keys.shape()[2]
    }

    pub fn value_dim(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn n_img(&self) -> usize {
        self.n_img
    }

    pub fn n_text(&self) -> usize {
        self.n_text
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn modality(&self, i: usize) -> Modality {
        if i < self.n_img {
            Modality::Image
        } else {
            Modality::Text
        }
    }

    pub fn image_indices(&self) -> Vec<usize> {
        (0..self.n_img).collect()
    }

    pub fn text_indices(&self) -> Vec<usize> {
        (self.n_img..self.n_tokens()).collect()
    }

    pub fn head_queries(&self, h: usize) -> Matrix {
        self.queries.head(h)
    }

    pub fn head_keys(&self, h: usize) -> Matrix {
        self.keys.head(h)
    }

    pub fn head_values(&self, h: usize) -> Matrix {
        self.values.head(h)
    }
}

/// On-disk description of a batch; tensor paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub queries: PathBuf,
    pub keys: PathBuf,
    pub values: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<PathBuf>,
    pub n_img: usize,
    pub n_text: usize,
    pub layer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positions: Option<Vec<usize>>,
    /// Ground-truth cluster of each image token, for synthetic batches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_clusters: Option<Vec<usize>>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Consistency(format!("{}: {e}", path.display())))?;
        if manifest.schema != BATCH_SCHEMA {
            return Err(Error::Consistency(format!(
                "{}: schema '{}' (expected '{BATCH_SCHEMA}')",
                path.display(),
                manifest.schema
            )));
        }
        Ok(manifest)
    }

    /// Loads the tensors the manifest names, resolving paths against `base`.
    pub fn load(&self, base: &Path) -> Result<TokenBatch> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let batch = TokenBatch::new(
            read_npy(resolve(&self.queries))?,
            read_npy(resolve(&self.keys))?,
            read_npy(resolve(&self.values))?,
            self.hidden.as_deref().map(|p| read_npy(resolve(p))).transpose()?,
            self.n_img,
            self.n_text,
            self.positions.clone(),
            self.layer,
        )?;
        if let Some(c) = &self.image_clusters {
            if c.len() != self.n_img {
                return Err(Error::Consistency(format!(
                    "{} cluster labels for {} image tokens",
                    c.len(),
                    self.n_img
                )));
            }
        }
        Ok(batch)
    }
}

/// Reads a manifest and the batch it describes.
pub fn load_batch_with_manifest(path: impl AsRef<Path>) -> Result<(Manifest, TokenBatch)> {
    let path = path.as_ref();
    let manifest = Manifest::read(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let batch = manifest.load(base)?;
    Ok((manifest, batch))
}

pub fn load_batch(path: impl AsRef<Path>) -> Result<TokenBatch> {
    load_batch_with_manifest(path).map(|(_, b)| b)
}

/// Writes every tensor of `batch` into `dir` plus a `manifest.json`, and
/// returns the manifest path.
pub fn save_batch(
    dir: impl AsRef<Path>,
    batch: &TokenBatch,
    image_clusters: Option<&[usize]>,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_npy(dir.join("queries.npy"), batch.queries())?;
    write_npy(dir.join("keys.npy"), batch.keys())?;
    write_npy(dir.join("values.npy"), batch.values())?;
    if let Some(h) = batch.hidden() {
        write_npy(dir.join("hidden.npy"), h)?;
    }
    let manifest = Manifest {
        schema: BATCH_SCHEMA.to_string(),
        queries: "queries.npy".into(),
        keys: "keys.npy".into(),
        values: "values.npy".into(),
        hidden: batch.hidden().map(|_| "hidden.npy".into()),
        n_img: batch.n_img(),
        n_text: batch.n_text(),
        layer: batch.layer(),
        positions: Some(batch.positions().to_vec()),
        image_clusters: image_clusters.map(<[usize]>::to_vec),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
