//! Hierarchical visual token compression.
//!
//! A study of `T` slices with `N` tokens each becomes `N + T·(K+M)` tokens:
//!
//! * **global**: every slice goes through a token-wise MoE, then the refined
//!   slices are averaged into one `[N, d]` matrix;
//! * **local**: each slice keeps its `K` most CLS-attended tokens plus `M`
//!   contextual tokens pooled from the remainder by key similarity.
//!
//! The global rows followed by the per-slice local rows form the vision
//! sequence, which is projected to the language model width.
//!
//! Reductions accumulate in f64 and round to f32 once. Slices are processed
//! in parallel but each slice's arithmetic is sequential, so output bytes do
//! not depend on the thread schedule.

pub mod local;
pub mod moe;
pub mod params;
pub mod projection;

use ndarray::{concatenate, Array2, Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_io::VolumeFeatures;

pub use local::{assign_to_targets, merge_contextual, score_dominant, select_dominant};
pub use moe::{aggregate_global, moe_gate, moe_refine_slice, Activation, ExpertMlp, MoeParams};
pub use params::{load_params, save_params};
pub use projection::{Projection, DEFAULT_PROJECTED_DIM};

/// Dominant tokens kept per slice.
pub const DEFAULT_DOMINANT: usize = 54;
/// Contextual tokens produced per slice.
pub const DEFAULT_CONTEXTUAL: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompressionError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("volume has no slices")]
    EmptyVolume,
    #[error("cannot select {k} dominant tokens from {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("cannot form {m} contextual tokens from {available} remaining")]
    MTooLarge { m: usize, available: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, CompressionError>;

/// Tie-breaking rule for every top-k style selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    LowestIndex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionConfig {
    /// `K`
    pub dominant: usize,
    /// `M`
    pub contextual: usize,
    /// Which encoder layer the ingested attention came from.
    #[serde(default)]
    pub attn_layer_note: String,
    #[serde(default)]
    pub tie_break: TieBreak,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            dominant: DEFAULT_DOMINANT,
            contextual: DEFAULT_CONTEXTUAL,
            attn_layer_note: "as ingested".into(),
            tie_break: TieBreak::LowestIndex,
        }
    }
}

impl CompressionConfig {
    pub fn new(dominant: usize, contextual: usize) -> Self {
        Self { dominant, contextual, ..Self::default() }
    }

    pub fn tokens_per_slice(&self) -> usize {
        self.dominant + self.contextual
    }

    pub fn validate_for(&self, tokens_per_slice: usize) -> Result<()> {
        if self.dominant < 1 {
            return Err(CompressionError::InvalidConfig("K must be at least 1".into()));
        }
        if self.dominant > tokens_per_slice {
            return Err(CompressionError::KTooLarge { k: self.dominant, n: tokens_per_slice });
        }
        if self.tokens_per_slice() > tokens_per_slice {
            return Err(CompressionError::MTooLarge {
                m: self.contextual,
                available: tokens_per_slice - self.dominant,
            });
        }
        Ok(())
    }
}

/// Output of [`compress_volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedVision {
    /// `[N, d]` slice-averaged MoE tokens.
    pub global: Array2<f32>,
    /// `[T, K+M, d]`
    pub locals: Array3<f32>,
    /// `[L, d]`, global rows then local rows in slice order.
    pub vision: Array2<f32>,
    /// `[L, d']`
    pub projected: Array2<f32>,
}

impl CompressedVision {
    /// Sequence length `L = N + T·(K+M)`.
    pub fn len(&self) -> usize {
        self.vision.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn projected_dim(&self) -> usize {
        self.projected.ncols()
    }
}

/// Indices of the `k` largest values, largest first; equal values keep
/// ascending index order. NaN sorts below every number.
pub(crate) fn top_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let key = |v: f64| if v.is_nan() { f64::NEG_INFINITY } else { v };
    idx.sort_by(|&a, &b| key(values[b]).total_cmp(&key(values[a])).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// `[K+M, d]` local tokens of slice `t`: dominant rows in ascending token
/// order, then contextual rows in target order.
pub fn compress_slice(t: usize, vf: &VolumeFeatures, cfg: &CompressionConfig) -> Result<Array2<f32>> {
    let dims = vf.dims();
    if t >= dims.slices {
        return Err(CompressionError::DimMismatch(format!(
            "slice {t} out of range for {} slices",
            dims.slices
        )));
    }
    cfg.validate_for(dims.tokens)?;
    let tokens = vf.slice_tokens(t);
    let keys = vf.slice_keys(t);
    let scores = score_dominant(vf.slice_cls_attn(t));

    let dominant = select_dominant(&scores, cfg.dominant, cfg.tie_break)?;
    let mut is_dominant = vec![false; dims.tokens];
    for &i in &dominant {
        is_dominant[i] = true;
    }
    let rest: Vec<usize> = (0..dims.tokens).filter(|i| !is_dominant[*i]).collect();
    let rest_scores: Vec<f64> = rest.iter().map(|&i| scores[i]).collect();

    let contextual = merge_contextual(
        tokens.select(Axis(0), &rest).view(),
        keys.select(Axis(0), &rest).view(),
        &rest_scores,
        cfg.contextual,
    )?;
    let dominant_rows = tokens.select(Axis(0), &dominant);
    concatenate(Axis(0), &[dominant_rows.view(), contextual.view()])
        .map_err(|e| CompressionError::DimMismatch(e.to_string()))
}

/// Global and local pathways, concatenation and projection for a whole study.
pub fn compress_volume(
    vf: &VolumeFeatures,
    moe: &MoeParams,
    cfg: &CompressionConfig,
    proj: &Projection,
) -> Result<CompressedVision> {
    let dims = vf.dims();
    moe.validate()?;
    proj.validate()?;
    if moe.dim() != dims.dim || proj.input_dim() != dims.dim {
        return Err(CompressionError::DimMismatch(format!(
            "token width {}, MoE width {}, projection input {}",
            dims.dim,
            moe.dim(),
            proj.input_dim()
        )));
    }
    cfg.validate_for(dims.tokens)?;

    let refined = (0..dims.slices)
        .into_par_iter()
        .map(|t| moe_refine_slice(vf.slice_tokens(t), moe))
        .collect::<Result<Vec<_>>>()?;
    let global = aggregate_global(&refined)?;

    let local_slices = (0..dims.slices)
        .into_par_iter()
        .map(|t| compress_slice(t, vf, cfg))
        .collect::<Result<Vec<_>>>()?;

    let per_slice = cfg.tokens_per_slice();
    let mut locals = Array3::<f32>::zeros((dims.slices, per_slice, dims.dim));
    for (mut dst, src) in locals.outer_iter_mut().zip(&local_slices) {
        dst.assign(src);
    }

    let mut parts = vec![global.view()];
    parts.extend(local_slices.iter().map(|s| s.view()));
    let vision = concatenate(Axis(0), &parts).map_err(|e| CompressionError::DimMismatch(e.to_string()))?;
    let projected = proj.project(vision.view())?;

    Ok(CompressedVision { global, locals, vision, projected })
}

/// `N + T·(K+M)`.
pub fn total_tokens(n: usize, t: usize, k: usize, m: usize) -> usize {
    n + t * (k + m)
}

/// Fraction of tokens removed relative to the uncompressed `T·N`.
///
/// When the global tokens make the sequence longer than the input (for
/// example `K+M = N`) the ratio would be negative; it is reported as 0 and a
/// warning is logged.
pub fn compression_ratio(n: usize, t: usize, k: usize, m: usize) -> f64 {
    let raw = (t * n) as f64;
    if raw == 0.0 {
        tracing::warn!(n, t, "empty input; compression ratio reported as 0");
        return 0.0;
    }
    let ratio = 1.0 - total_tokens(n, t, k, m) as f64 / raw;
    if ratio < 0.0 {
        tracing::warn!(n, t, k, m, ratio, "compressed sequence is longer than the input; ratio clamped to 0");
        return 0.0;
    }
    ratio
}
