//! Per-study visual features: the frozen vision encoder's output for one CT
//! volume, read from and written to `CTFV` files.
//!
//! Layout (little-endian, no padding):
//!
//! ```text
//! "CTFV" | u32 version=1 | u32 T | u32 N | u32 d | u32 H | u32 d_k
//! f32 tokens[T][N][d] | f32 cls_attn[T][H][N] | f32 keys[T][N][d_k]
//! ```
//!
//! Only the CLS row of each head's attention map is stored, since dominant
//! token scoring reads nothing else.

use std::fs;
use std::path::Path;

use ndarray::{Array3, ArrayView2};

use crate::container::{f32_bytes, write_atomic, ContainerReader, ContainerWriter, FormatError, Result};
use crate::rng::SplitMix64;

pub const CTFV_MAGIC: &[u8; 4] = b"CTFV";

/// Slice count used for full-size studies.
pub const DEFAULT_SLICES: usize = 240;
/// Patch tokens per slice produced by the encoder.
pub const DEFAULT_TOKENS_PER_SLICE: usize = 256;
/// Encoder token width.
pub const DEFAULT_TOKEN_DIM: usize = 1024;

/// Header dimensions of a feature volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct VolumeDims {
    pub slices: usize,
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
    pub key_dim: usize,
}

impl VolumeDims {
    pub fn new(slices: usize, tokens: usize, dim: usize, heads: usize, key_dim: usize) -> Self {
        Self { slices, tokens, dim, heads, key_dim }
    }

    pub fn validate(&self) -> Result<()> {
        let Self { slices, tokens, dim, heads, key_dim } = *self;
        if slices < 1 || tokens < 2 || dim < 1 || heads < 1 || key_dim < 1 {
            return Err(FormatError::InvalidDims(format!(
                "need T>=1, N>=2, d>=1, H>=1, d_k>=1; got T={slices} N={tokens} d={dim} H={heads} d_k={key_dim}"
            )));
        }
        for v in [slices, tokens, dim, heads, key_dim] {
            if u32::try_from(v).is_err() {
                return Err(FormatError::InvalidDims(format!("{v} does not fit in u32")));
            }
        }
        Ok(())
    }

    /// Payload size in bytes implied by these dimensions.
    pub fn payload_bytes(&self) -> Result<u64> {
        let tokens = f32_bytes(&[self.slices, self.tokens, self.dim])?;
        let attn = f32_bytes(&[self.slices, self.heads, self.tokens])?;
        let keys = f32_bytes(&[self.slices, self.tokens, self.key_dim])?;
        tokens
            .checked_add(attn)
            .and_then(|s| s.checked_add(keys))
            .ok_or_else(|| FormatError::InvalidDims(format!("{self:?} overflows")))
    }
}

/// Visual tokens, CLS attention rows and attention keys for one study.
///
/// Immutable after construction; share behind an `Arc`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeFeatures {
    pub study_id: String,
    /// `[T, N, d]`
    tokens: Array3<f32>,
    /// `[T, H, N]`, nonnegative
    cls_attn: Array3<f32>,
    /// `[T, N, d_k]`
    keys: Array3<f32>,
}

impl VolumeFeatures {
    pub fn new(
        study_id: impl Into<String>,
        tokens: Array3<f32>,
        cls_attn: Array3<f32>,
        keys: Array3<f32>,
    ) -> Result<Self> {
        let vf = Self { study_id: study_id.into(), tokens, cls_attn, keys };
        vf.validate()?;
        Ok(vf)
    }

    pub fn dims(&self) -> VolumeDims {
        let (t, n, d) = self.tokens.dim();
        VolumeDims::new(t, n, d, self.cls_attn.dim().1, self.keys.dim().2)
    }

    pub fn validate(&self) -> Result<()> {
        let (t, n, _) = self.tokens.dim();
        let (ta, h, na) = self.cls_attn.dim();
        let (tk, nk, _) = self.keys.dim();
        if (ta, na) != (t, n) || (tk, nk) != (t, n) {
            return Err(FormatError::InvalidDims(format!(
                "inconsistent tensors: tokens {:?}, cls_attn {:?}, keys {:?}",
                self.tokens.dim(),
                (ta, h, na),
                self.keys.dim()
            )));
        }
        self.dims().validate()?;
        if let Some(bad) = self.cls_attn.iter().find(|v| v.is_nan() || **v < 0.0) {
            return Err(FormatError::Invariant(format!("cls_attn entry {bad} is not >= 0")));
        }
        Ok(())
    }

    pub fn tokens(&self) -> &Array3<f32> {
        &self.tokens
    }

    pub fn cls_attn(&self) -> &Array3<f32> {
        &self.cls_attn
    }

    pub fn keys(&self) -> &Array3<f32> {
        &self.keys
    }

    /// `[N, d]` token matrix of slice `t`.
    pub fn slice_tokens(&self, t: usize) -> ArrayView2<'_, f32> {
        self.tokens.index_axis(ndarray::Axis(0), t)
    }

    /// `[H, N]` CLS attention rows of slice `t`.
    pub fn slice_cls_attn(&self, t: usize) -> ArrayView2<'_, f32> {
        self.cls_attn.index_axis(ndarray::Axis(0), t)
    }

    /// `[N, d_k]` keys of slice `t`.
    pub fn slice_keys(&self, t: usize) -> ArrayView2<'_, f32> {
        self.keys.index_axis(ndarray::Axis(0), t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let d = self.dims();
        let mut w = ContainerWriter::new(CTFV_MAGIC);
        for v in [d.slices, d.tokens, d.dim, d.heads, d.key_dim] {
            w.put_u32(v as u32);
        }
        // Standard-layout iteration is row-major, matching the file order.
        w.put_f32s(self.tokens.iter());
        w.put_f32s(self.cls_attn.iter());
        w.put_f32s(self.keys.iter());
        Ok(w.finish())
    }

    pub fn from_bytes(study_id: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        let mut r = ContainerReader::open(bytes, CTFV_MAGIC)?;
        let mut hdr = [0usize; 5];
        for h in hdr.iter_mut() {
            *h = r.u32()? as usize;
        }
        let dims = VolumeDims::new(hdr[0], hdr[1], hdr[2], hdr[3], hdr[4]);
        dims.validate()?;
        if r.remaining() % 4 != 0 {
            return Err(FormatError::TruncatedPayload {
                offset: bytes.len(),
                needed: 4 - r.remaining() % 4,
            });
        }
        r.expect_remaining(dims.payload_bytes()?)?;

        let VolumeDims { slices: t, tokens: n, dim: d, heads: h, key_dim: dk } = dims;
        let tokens = r.f32s(t * n * d)?;
        let cls_attn = r.f32s(t * h * n)?;
        let keys = r.f32s(t * n * dk)?;
        r.finish()?;

        let shape_err = |e: ndarray::ShapeError| FormatError::InvalidDims(e.to_string());
        Self::new(
            study_id,
            Array3::from_shape_vec((t, n, d), tokens).map_err(shape_err)?,
            Array3::from_shape_vec((t, h, n), cls_attn).map_err(shape_err)?,
            Array3::from_shape_vec((t, n, dk), keys).map_err(shape_err)?,
        )
    }
}

/// Reads a `CTFV` file. The study id is the file stem.
pub fn load_volume(path: impl AsRef<Path>) -> Result<VolumeFeatures> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let study_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("study")
        .to_string();
    VolumeFeatures::from_bytes(study_id, &bytes)
}

pub fn save_volume(vf: &VolumeFeatures, path: impl AsRef<Path>) -> Result<()> {
    let bytes = vf.to_bytes()?;
    write_atomic(path.as_ref(), &bytes)
}

// Stream ids for the synthetic generator.
const STREAM_TOKENS: u64 = 1;
const STREAM_ATTN: u64 = 2;
const STREAM_KEYS: u64 = 3;

/// Deterministic stand-in for encoder output.
///
/// Tokens and keys are uniform in `[-1, 1)`. Each head's CLS row is a
/// normalized vector of `u^4` weights (`u` uniform), which gives the heavy
/// head/tail split that dominant token selection expects. Values depend only
/// on `(seed, dims)`.
pub fn generate_synthetic_volume(seed: u64, dims: VolumeDims) -> Result<VolumeFeatures> {
    dims.validate()?;
    dims.payload_bytes()?;
    let VolumeDims { slices: t, tokens: n, dim: d, heads: h, key_dim: dk } = dims;

    let mut rng = SplitMix64::with_stream(seed, STREAM_TOKENS);
    let tokens = Array3::from_shape_simple_fn((t, n, d), || rng.uniform(-1.0, 1.0) as f32);

    let mut rng = SplitMix64::with_stream(seed, STREAM_KEYS);
    let keys = Array3::from_shape_simple_fn((t, n, dk), || rng.uniform(-1.0, 1.0) as f32);

    let mut rng = SplitMix64::with_stream(seed, STREAM_ATTN);
    let mut cls_attn = Array3::<f32>::zeros((t, h, n));
    let mut row = vec![0f64; n];
    for mut head in cls_attn.lanes_mut(ndarray::Axis(2)) {
        let mut total = 0.0;
        for w in row.iter_mut() {
            *w = rng.next_f64().powi(4);
            total += *w;
        }
        let total = if total > 0.0 { total } else { 1.0 };
        for (dst, w) in head.iter_mut().zip(&row) {
            *dst = (w / total) as f32;
        }
    }

    VolumeFeatures::new(format!("synthetic-{seed}"), tokens, cls_attn, keys)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VolumeDims {
        VolumeDims::new(2, 4, 8, 2, 8)
    }

    #[test]
    fn synthetic_is_deterministic_and_valid() {
        let a = generate_synthetic_volume(0, small()).unwrap();
        let b = generate_synthetic_volume(0, small()).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        assert_eq!(a.dims(), small());
        let c = generate_synthetic_volume(1, small()).unwrap();
        assert_ne!(a.tokens(), c.tokens());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let v = generate_synthetic_volume(3, VolumeDims::new(3, 16, 4, 4, 4)).unwrap();
        for row in v.cls_attn().lanes(ndarray::Axis(2)) {
            let s: f64 = row.iter().map(|x| *x as f64).sum();
            assert!((s - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|x| *x >= 0.0));
        }
    }

    #[test]
    fn invalid_dims_rejected() {
        for dims in [
            VolumeDims::new(0, 4, 8, 2, 8),
            VolumeDims::new(2, 1, 8, 2, 8),
            VolumeDims::new(2, 4, 0, 2, 8),
        ] {
            assert!(matches!(
                generate_synthetic_volume(0, dims),
                Err(FormatError::InvalidDims(_))
            ));
        }
    }

    #[test]
    fn empty_study_cannot_be_written() {
        let vf = VolumeFeatures {
            study_id: "empty".into(),
            tokens: Array3::zeros((0, 4, 8)),
            cls_attn: Array3::zeros((0, 2, 4)),
            keys: Array3::zeros((0, 4, 8)),
        };
        assert!(matches!(vf.to_bytes(), Err(FormatError::InvalidDims(_))));
    }

    #[test]
    fn negative_attention_rejected() {
        let mut attn = Array3::<f32>::zeros((1, 1, 2));
        attn[[0, 0, 1]] = -0.1;
        let err = VolumeFeatures::new(
            "x",
            Array3::zeros((1, 2, 1)),
            attn,
            Array3::zeros((1, 2, 1)),
        )
        .unwrap_err();
        assert!(matches!(err, FormatError::Invariant(_)));
    }

    #[test]
    fn short_payload_is_dimension_mismatch() {
        let one = generate_synthetic_volume(5, VolumeDims::new(1, 4, 8, 2, 8)).unwrap();
        let mut bytes = one.to_bytes().unwrap();
        // Claim two slices while carrying the payload for one.
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            VolumeFeatures::from_bytes("x", &bytes),
            Err(FormatError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn partial_float_is_truncation() {
        let v = generate_synthetic_volume(5, small()).unwrap();
        let bytes = v.to_bytes().unwrap();
        assert!(matches!(
            VolumeFeatures::from_bytes("x", &bytes[..bytes.len() - 1]),
            Err(FormatError::TruncatedPayload { .. })
        ));
        assert!(matches!(
            VolumeFeatures::from_bytes("x", &bytes[..14]),
            Err(FormatError::TruncatedPayload { .. })
        ));
    }
}
