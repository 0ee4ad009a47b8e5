//! Low-rank adapters, one per anatomical region.
//!
//! An adapter stores `B: [d1, r]` and `A: [r, d2]`; applied to a frozen
//! `W0: [d1, d2]` it gives `h = W0 x + (alpha / r) · B (A x)`. Dropout is a
//! training-time setting and is kept only as metadata.
//!
//! `CTLA` layout:
//!
//! ```text
//! "CTLA" | u32 version=1 | u32 len | region (UTF-8) | u32 d1 | u32 d2 | u32 r | f32 alpha
//! f32 B[d1][r] | f32 A[r][d2]
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::Serialize;
use thiserror::Error;

use crate::container::{write_atomic, ContainerReader, ContainerWriter, FormatError};
use crate::region::{canonicalize_region, RegionId};
use crate::rng::SplitMix64;

pub const CTLA_MAGIC: &[u8; 4] = b"CTLA";

pub const DEFAULT_RANK: usize = 16;
pub const DEFAULT_ALPHA: f32 = 16.0;
/// Applied to adapters loaded from `CTLA` files, which do not carry dropout.
pub const DEFAULT_DROPOUT: f32 = 0.05;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid adapter: {0}")]
    Invalid(String),
    #[error("no adapter registered for region {0:?}")]
    AdapterMissing(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

pub type Result<T> = std::result::Result<T, AdapterError>;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub region: RegionId,
    pub alpha: f32,
    pub dropout: f32,
    /// `[d1, r]`
    pub b: Array2<f32>,
    /// `[r, d2]`
    pub a: Array2<f32>,
}

impl LoraAdapter {
    pub fn new(region: RegionId, alpha: f32, dropout: f32, b: Array2<f32>, a: Array2<f32>) -> Result<Self> {
        let ad = Self { region, alpha, dropout, b, a };
        ad.validate()?;
        Ok(ad)
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.b.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.ncols()
    }

    /// `alpha / r`
    pub fn scale(&self) -> f64 {
        self.alpha as f64 / self.rank() as f64
    }

    /// Identifier sent to backends with region-tool requests.
    pub fn adapter_id(&self) -> String {
        format!("lora-{}", self.region.canonical_name())
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rank();
        if self.b.ncols() != r {
            return Err(AdapterError::DimMismatch(format!(
                "B is {:?} but A is {:?}",
                self.b.dim(),
                self.a.dim()
            )));
        }
        if r == 0 || r > self.out_dim().min(self.in_dim()) {
            return Err(AdapterError::Invalid(format!(
                "rank {r} must be in 1..=min({}, {})",
                self.out_dim(),
                self.in_dim()
            )));
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(AdapterError::Invalid(format!("alpha {} must be positive", self.alpha)));
        }
        Ok(())
    }

    /// Random `A` and `B` from `N(0, 1/fan_in)`. Real training starts `B` at
    /// zero; random `B` keeps the update visible in tests.
    pub fn seeded(region: RegionId, seed: u64, d1: usize, d2: usize, rank: usize, alpha: f32) -> Result<Self> {
        let mut rng = SplitMix64::with_stream(seed, 0x4C6F5241 ^ region.index() as u64);
        let mut gauss = |rows: usize, cols: usize| {
            let scale = 1.0 / (cols as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || (rng.normal() * scale) as f32)
        };
        let a = gauss(rank, d2);
        let b = gauss(d1, rank);
        Self::new(region, alpha, DEFAULT_DROPOUT, b, a)
    }

    /// `ΔW = (alpha / r) · B A`, in f64.
    pub fn delta_weight(&self) -> Array2<f64> {
        let (d1, d2) = (self.out_dim(), self.in_dim());
        let scale = self.scale();
        let mut out = Array2::<f64>::zeros((d1, d2));
        for i in 0..d1 {
            for j in 0..d2 {
                let mut acc = 0.0f64;
                for k in 0..self.rank() {
                    acc += self.b[[i, k]] as f64 * self.a[[k, j]] as f64;
                }
                out[[i, j]] = scale * acc;
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut w = ContainerWriter::new(CTLA_MAGIC);
        w.put_str(self.region.canonical_name())?;
        for v in [self.out_dim(), self.in_dim(), self.rank()] {
            w.put_u32(u32::try_from(v).map_err(|_| AdapterError::Invalid(format!("{v} exceeds u32")))?);
        }
        w.put_f32(self.alpha);
        w.put_f32s(self.b.iter());
        w.put_f32s(self.a.iter());
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ContainerReader::open(bytes, CTLA_MAGIC)?;
        let name = r.string()?;
        let region = canonicalize_region(&name)
            .map_err(|e| FormatError::InvalidField(e.to_string()))?;
        let d1 = r.u32()? as usize;
        let d2 = r.u32()? as usize;
        let rank = r.u32()? as usize;
        let alpha = r.f32()?;
        if d1 == 0 || d2 == 0 || rank == 0 {
            return Err(FormatError::InvalidDims(format!("d1={d1} d2={d2} r={rank}")).into());
        }
        let expected = crate::container::f32_bytes(&[d1, rank])? + crate::container::f32_bytes(&[rank, d2])?;
        r.expect_remaining(expected)?;
        let b = r.f32s(d1 * rank)?;
        let a = r.f32s(rank * d2)?;
        r.finish()?;
        let shape = |e: ndarray::ShapeError| AdapterError::DimMismatch(e.to_string());
        Self::new(
            region,
            alpha,
            DEFAULT_DROPOUT,
            Array2::from_shape_vec((d1, rank), b).map_err(shape)?,
            Array2::from_shape_vec((rank, d2), a).map_err(shape)?,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(write_atomic(path.as_ref(), &self.to_bytes()?)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(FormatError::from)?)
    }
}

fn check_dims(w0: ArrayView2<'_, f32>, ad: &LoraAdapter) -> Result<()> {
    if w0.dim() != (ad.out_dim(), ad.in_dim()) {
        return Err(AdapterError::DimMismatch(format!(
            "W0 is {:?}, adapter expects ({}, {})",
            w0.dim(),
            ad.out_dim(),
            ad.in_dim()
        )));
    }
    Ok(())
}

/// `W0 x + (alpha / r) · B (A x)` without forming `B A`.
pub fn lora_apply(w0: ArrayView2<'_, f32>, ad: &LoraAdapter, x: ArrayView1<'_, f32>) -> Result<Vec<f64>> {
    check_dims(w0, ad)?;
    if x.len() != ad.in_dim() {
        return Err(AdapterError::DimMismatch(format!("x has {} entries, expected {}", x.len(), ad.in_dim())));
    }
    let ax: Vec<f64> = ad
        .a
        .outer_iter()
        .map(|row| row.iter().zip(x.iter()).map(|(a, v)| *a as f64 * *v as f64).sum())
        .collect();
    let scale = ad.scale();
    Ok(w0
        .outer_iter()
        .zip(ad.b.outer_iter())
        .map(|(w_row, b_row)| {
            let base: f64 = w_row.iter().zip(x.iter()).map(|(w, v)| *w as f64 * *v as f64).sum();
            let update: f64 = b_row.iter().zip(&ax).map(|(b, v)| *b as f64 * v).sum();
            base + scale * update
        })
        .collect())
}

/// `W0 + (alpha / r) · B A`.
pub fn lora_merge(w0: ArrayView2<'_, f32>, ad: &LoraAdapter) -> Result<Array2<f32>> {
    check_dims(w0, ad)?;
    let delta = ad.delta_weight();
    Ok(Array2::from_shape_fn(w0.dim(), |(i, j)| (w0[[i, j]] as f64 + delta[[i, j]]) as f32))
}

/// One adapter selection, as recorded by the registry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AdapterActivation {
    pub seq: u64,
    pub region: RegionId,
}

/// Region → adapter map with an append-only activation log.
#[derive(Debug, Default)]
pub struct AdapterRegistry {
    adapters: BTreeMap<RegionId, Arc<LoraAdapter>>,
    log: Mutex<Vec<AdapterActivation>>,
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// One seeded adapter for each of the ten regions.
    pub fn seeded(seed: u64, d1: usize, d2: usize, rank: usize, alpha: f32) -> Result<Self> {
        let mut reg = Self::new();
        for region in RegionId::ALL {
            reg.insert(LoraAdapter::seeded(region, seed, d1, d2, rank, alpha)?);
        }
        Ok(reg)
    }

    /// Loads every `*.ctla` file in `dir`. A region may appear only once.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let mut reg = Self::new();
        let mut paths: Vec<_> = fs::read_dir(dir.as_ref())
            .map_err(FormatError::from)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "ctla"))
            .collect();
        paths.sort();
        for p in paths {
            let ad = LoraAdapter::load(&p)?;
            if reg.adapters.contains_key(&ad.region) {
                return Err(AdapterError::Invalid(format!(
                    "second adapter for {} in {}",
                    ad.region,
                    p.display()
                )));
            }
            reg.insert(ad);
        }
        Ok(reg)
    }

    /// Replaces any adapter already registered for the region.
    pub fn insert(&mut self, adapter: LoraAdapter) {
        self.adapters.insert(adapter.region, Arc::new(adapter));
    }

    pub fn missing_regions(&self) -> Vec<RegionId> {
        RegionId::ALL.into_iter().filter(|r| !self.adapters.contains_key(r)).collect()
    }

    pub fn get(&self, region: RegionId) -> Option<&Arc<LoraAdapter>> {
        self.adapters.get(&region)
    }

    /// Returns the region's adapter and records the activation.
    pub fn select_adapter(&self, region: RegionId) -> Result<Arc<LoraAdapter>> {
        let ad = self
            .adapters
            .get(&region)
            .cloned()
            .ok_or_else(|| AdapterError::AdapterMissing(region.canonical_name().into()))?;
        let mut log = self.log.lock().expect("activation log poisoned");
        let seq = log.len() as u64;
        log.push(AdapterActivation { seq, region });
        Ok(ad)
    }

    /// Like [`select_adapter`](Self::select_adapter) for a raw region name.
    pub fn select_by_name(&self, name: &str) -> Result<Arc<LoraAdapter>> {
        let region = canonicalize_region(name).map_err(|_| AdapterError::AdapterMissing(name.into()))?;
        self.select_adapter(region)
    }

    pub fn activations(&self) -> Vec<AdapterActivation> {
        self.log.lock().expect("activation log poisoned").clone()
    }

    pub fn activation_count(&self) -> usize {
        self.log.lock().expect("activation log poisoned").len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_b_is_base_model() {
        let w0 = array![[1.0f32, 2.0], [3.0, 4.0]];
        let ad = LoraAdapter::new(RegionId::Lung, 16.0, 0.05, Array2::zeros((2, 1)), array![[1.0f32, 1.0]]).unwrap();
        let y = lora_apply(w0.view(), &ad, array![1.0f32, -1.0].view()).unwrap();
        assert_eq!(y, vec![-1.0, -1.0]);
        assert_eq!(lora_merge(w0.view(), &ad).unwrap(), w0);
    }

    #[test]
    fn rank_one_closed_form() {
        let w0 = Array2::<f32>::zeros((2, 2));
        let ad = LoraAdapter::new(RegionId::Heart, 1.0, 0.0, array![[1.0f32], [0.0]], array![[1.0f32, 0.0]]).unwrap();
        let y = lora_apply(w0.view(), &ad, array![3.5f32, 7.0].view()).unwrap();
        assert_eq!(y, vec![3.5, 0.0]);
    }

    #[test]
    fn invalid_adapters() {
        let bad_rank = LoraAdapter::new(RegionId::Lung, 1.0, 0.0, Array2::zeros((2, 3)), Array2::zeros((3, 2)));
        assert!(matches!(bad_rank, Err(AdapterError::Invalid(_))));
        let bad_alpha = LoraAdapter::new(RegionId::Lung, 0.0, 0.0, Array2::zeros((2, 1)), Array2::zeros((1, 2)));
        assert!(matches!(bad_alpha, Err(AdapterError::Invalid(_))));
        let mismatch = LoraAdapter::new(RegionId::Lung, 1.0, 0.0, Array2::zeros((2, 2)), Array2::zeros((1, 2)));
        assert!(matches!(mismatch, Err(AdapterError::DimMismatch(_))));
    }

    #[test]
    fn registry_lookup_logs_activation() {
        let reg = AdapterRegistry::seeded(1, 4, 4, 2, 16.0).unwrap();
        assert!(reg.missing_regions().is_empty());
        let ad = reg.select_adapter(RegionId::Heart).unwrap();
        assert_eq!(ad.region, RegionId::Heart);
        assert_eq!(reg.activations(), vec![AdapterActivation { seq: 0, region: RegionId::Heart }]);
        assert!(matches!(reg.select_by_name("spleen"), Err(AdapterError::AdapterMissing(_))));
        assert_eq!(reg.activation_count(), 1);
    }

    #[test]
    fn missing_region_flagged() {
        let mut reg = AdapterRegistry::new();
        reg.insert(LoraAdapter::seeded(RegionId::Lung, 0, 3, 3, 1, 1.0).unwrap());
        assert_eq!(reg.missing_regions().len(), 9);
        assert!(matches!(reg.select_adapter(RegionId::Breast), Err(AdapterError::AdapterMissing(_))));
        assert_eq!(reg.activation_count(), 0);
    }

    #[test]
    fn ctla_bytes_roundtrip() {
        let ad = LoraAdapter::seeded(RegionId::TracheaBronchi, 3, 5, 4, 2, 16.0).unwrap();
        let bytes = ad.to_bytes().unwrap();
        let back = LoraAdapter::from_bytes(&bytes).unwrap();
        assert_eq!(back, ad);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}
