//! Dual-form token pruning for softmax attention.
//!
//! Every token of an attention layer contributes a rank-1 update
//! `φ(k_i)ᵀ v_i` to an implicit dual weight matrix. Pruning keeps the image
//! tokens whose updates are large (information magnitude) and not already
//! covered by other kept updates (information duplication), selected with
//! progressive chunked maximal marginal relevance.

pub mod attention;
pub mod batch;
pub mod duplication;
pub mod error;
pub mod eval;
pub mod magnitude;
pub mod npy;
pub mod report;
pub mod rope;
pub mod selection;
pub mod synth;
pub mod tensor;
pub mod verify;

pub use batch::{load_batch, save_batch, Manifest, Modality, TokenBatch};
pub use duplication::{duplication_block, Duplication, DuplicationConfig, SimilarityBlock, SimilaritySpace};
pub use error::{Error, Result};
pub use magnitude::{magnitude_scores, MagnitudeConfig, QueryMode, ScoreVector, ScorerKind};
pub use rope::RopeParams;
pub use selection::{pc_mmr, PenaltyForm, PruneConfig, SelectionResult};
pub use synth::{generate_synthetic_batch, SynthSpec};
pub use tensor::Tensor;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
