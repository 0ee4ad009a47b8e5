//! Exemplar store: anatomy-decomposed historical reports keyed by the
//! embedding of their concatenated findings, searched by exact cosine scan.
//!
//! CTES layout (little-endian): magic `CTES`, u32 version, u32 dim, u32
//! count, `count·dim` f32 keys, then per record ten findings and the report
//! as u32-length-prefixed UTF-8.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MemoryError, Result};
use crate::container::{write_atomic, ContainerReader, ContainerWriter, FormatError};
use crate::region::RegionId;

pub const CTES_MAGIC: &[u8; 4] = b"CTES";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarRecord {
    pub key: Vec<f32>,
    /// One statement per region, in reporting order.
    pub findings: Vec<String>,
    pub report: String,
}

impl ExemplarRecord {
    pub fn finding(&self, region: RegionId) -> &str {
        &self.findings[region.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExemplarStore {
    dim: usize,
    records: Vec<ExemplarRecord>,
}

impl ExemplarStore {
    pub fn new(dim: usize) -> Self {
        Self { dim, records: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ExemplarRecord] {
        &self.records
    }

    pub fn get(&self, i: usize) -> Option<&ExemplarRecord> {
        self.records.get(i)
    }

    pub fn push(&mut self, rec: ExemplarRecord) -> Result<()> {
        if rec.key.len() != self.dim {
            return Err(MemoryError::DimMismatch { expected: self.dim, actual: rec.key.len() });
        }
        if rec.findings.len() != RegionId::ALL.len() {
            return Err(MemoryError::WrongCount(rec.findings.len()));
        }
        if rec.key.iter().any(|v| !v.is_finite()) {
            return Err(MemoryError::InvalidRecord("non-finite key".into()));
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ContainerWriter::new(CTES_MAGIC);
        let dim = u32::try_from(self.dim).map_err(|_| FormatError::InvalidDims("dim exceeds u32".into()))?;
        let count = u32::try_from(self.len()).map_err(|_| FormatError::InvalidDims("count exceeds u32".into()))?;
        w.put_u32(dim);
        w.put_u32(count);
        for r in &self.records {
            w.put_f32s(&r.key);
        }
        for r in &self.records {
            for f in &r.findings {
                w.put_str(f)?;
            }
            w.put_str(&r.report)?;
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ContainerReader::open(bytes, CTES_MAGIC)?;
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let key_floats = dim
            .checked_mul(count)
            .ok_or_else(|| FormatError::InvalidDims(format!("{count} keys of dim {dim}")))?;
        // Each record also needs at least 11 length prefixes.
        let min_bytes = (key_floats as u64) * 4 + (count as u64) * 11 * 4;
        let remaining = r.remaining() as u64;
        if remaining < min_bytes {
            let needed = (min_bytes - remaining) as usize;
            return Err(FormatError::TruncatedPayload { offset: r.position(), needed }.into());
        }
        let mut keys = Vec::with_capacity(count);
        for _ in 0..count {
            keys.push(r.f32s(dim)?);
        }
        let mut store = Self::new(dim);
        for key in keys {
            let findings = (0..RegionId::ALL.len()).map(|_| r.string()).collect::<std::result::Result<Vec<_>, _>>()?;
            let report = r.string()?;
            store.push(ExemplarRecord { key, findings, report })?;
        }
        r.finish()?;
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(FormatError::from)?;
        Self::from_bytes(&bytes)
    }
}

/// `uᵀv / (‖u‖·‖v‖)` in f64, clamped to `[-1, 1]`.
pub fn cosine_sim(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(MemoryError::DimMismatch { expected: u.len(), actual: v.len() });
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (a, b) in u.iter().zip(v) {
        let (a, b) = (*a as f64, *b as f64);
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(MemoryError::ZeroVector);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    /// Insertion index in the store.
    pub index: usize,
    pub similarity: f64,
}

/// Exact top-`k` records by cosine similarity, most similar first; equal
/// similarities keep insertion order. Records with zero keys are skipped, and
/// a zero query retrieves nothing.
pub fn retrieve_topk(query: &[f32], store: &ExemplarStore, k: usize) -> Result<Vec<Retrieved>> {
    if query.len() != store.dim() {
        return Err(MemoryError::DimMismatch { expected: store.dim(), actual: query.len() });
    }
    if k == 0 || store.is_empty() {
        if k > 0 {
            tracing::warn!("exemplar store is empty; no exemplars retrieved");
        }
        return Ok(Vec::new());
    }
    let mut scored = Vec::with_capacity(store.len());
    for (index, rec) in store.records().iter().enumerate() {
        match cosine_sim(query, &rec.key) {
            Ok(similarity) => scored.push(Retrieved { index, similarity }),
            Err(MemoryError::ZeroVector) if query.iter().all(|v| *v == 0.0) => {
                tracing::warn!("zero query vector; no exemplars retrieved");
                return Ok(Vec::new());
            }
            Err(MemoryError::ZeroVector) => {}
            Err(e) => return Err(e),
        }
    }
    scored.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then(a.index.cmp(&b.index)));
    if scored.len() < k {
        tracing::warn!(requested = k, available = scored.len(), "fewer exemplars than requested");
    }
    scored.truncate(k);
    Ok(scored)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(key: Vec<f32>, tag: &str) -> ExemplarRecord {
        ExemplarRecord {
            key,
            findings: RegionId::ALL.iter().map(|r| format!("{tag} {r}")).collect(),
            report: format!("report {tag}"),
        }
    }

    #[test]
    fn cosine_closed_forms() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);
        assert!(matches!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(MemoryError::ZeroVector)));
    }

    #[test]
    fn ties_keep_insertion_order() {
        let mut s = ExemplarStore::new(2);
        s.push(record(vec![0.0, 1.0], "a")).unwrap();
        s.push(record(vec![1.0, 0.0], "b")).unwrap();
        s.push(record(vec![2.0, 0.0], "c")).unwrap();
        s.push(record(vec![0.0, 0.0], "zero")).unwrap();
        let got = retrieve_topk(&[1.0, 0.0], &s, 10).unwrap();
        assert_eq!(got.iter().map(|r| r.index).collect::<Vec<_>>(), vec![1, 2, 0]);
        assert!(retrieve_topk(&[0.0, 0.0], &s, 2).unwrap().is_empty());
    }

    #[test]
    fn ctes_roundtrip_and_rejects() {
        let mut s = ExemplarStore::new(3);
        s.push(record(vec![0.5, -1.0, f32::MIN_POSITIVE], "x")).unwrap();
        s.push(record(vec![1.0, 2.0, 3.0], "ünïcode")).unwrap();
        let bytes = s.to_bytes().unwrap();
        let back = ExemplarStore::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ExemplarStore::from_bytes(&extra).is_err());
        assert!(ExemplarStore::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn push_validates() {
        let mut s = ExemplarStore::new(2);
        assert!(matches!(s.push(record(vec![1.0], "a")), Err(MemoryError::DimMismatch { .. })));
        let mut r = record(vec![1.0, 0.0], "a");
        r.findings.pop();
        assert!(matches!(s.push(r), Err(MemoryError::WrongCount(9))));
    }
}
