//! Brute-force oracles and fixtures shared by the integration tests and the
//! acceptance runner. Nothing here calls into the code it checks.

#![allow(dead_code)]

use std::collections::BTreeMap;

use ctagent_core::compression::CompressionConfig;
use ctagent_core::evaluation::AbnormalityLexicon;
use ctagent_core::feature_io::{generate_synthetic_volume, VolumeDims, VolumeFeatures};
use ctagent_core::memory::{build_corpus, RegionSplitter};
use ctagent_core::orchestration::{Engine, EngineSettings};
use ctagent_core::rng::SplitMix64;
use ctagent_core::backend::{synthetic_report, MockEmbedder, MOCK_EMBEDDING_DIM};
use ctagent_core::RegionId;
use nalgebra::{DMatrix, DVector};
use ndarray::Array3;

/// `|a - b| <= tol * max(1, |b|)`
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

/// Repeated linear scan for the maximum; the first index wins ties.
/// Returned in pick order.
pub fn oracle_top(scores: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; scores.len()];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..scores.len() {
            if taken[i] {
                continue;
            }
            if best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("k exceeds len");
        taken[b] = true;
        out.push(b);
    }
    out
}

/// Independent reimplementation of per-slice local compression.
pub struct LocalOracle {
    pub scores: Vec<f64>,
    pub dominant: Vec<usize>,
    /// Original token indices of the contextual targets, ascending.
    pub targets: Vec<usize>,
    /// For each non-dominant non-target token (ascending), its target position.
    pub assignment: Vec<usize>,
    /// `[K+M][d]`
    pub rows: Vec<Vec<f64>>,
}

pub fn oracle_local(vf: &VolumeFeatures, t: usize, k: usize, m: usize) -> LocalOracle {
    let dims = vf.dims();
    let (n, d, h, dk) = (dims.tokens, dims.dim, dims.heads, dims.key_dim);
    let attn = vf.cls_attn();
    let tok = vf.tokens();
    let keys = vf.keys();
    let scores: Vec<f64> = (0..n).map(|i| (0..h).map(|hh| attn[[t, hh, i]] as f64).sum()).collect();

    let mut dominant = oracle_top(&scores, k);
    dominant.sort();
    let rest: Vec<usize> = (0..n).filter(|i| !dominant.contains(i)).collect();
    let rest_scores: Vec<f64> = rest.iter().map(|&i| scores[i]).collect();
    let mut tpos = oracle_top(&rest_scores, m);
    tpos.sort();
    let targets: Vec<usize> = tpos.iter().map(|&p| rest[p]).collect();
    let members: Vec<usize> = rest.iter().copied().filter(|i| !targets.contains(i)).collect();

    let dot = |a: usize, b: usize| (0..dk).map(|c| keys[[t, a, c]] as f64 * keys[[t, b, c]] as f64).sum::<f64>();
    let mut assignment = Vec::new();
    let mut groups: Vec<Vec<usize>> = targets.iter().map(|&x| vec![x]).collect();
    if m > 0 {
        for &mem in &members {
            let mut best = 0;
            for j in 1..targets.len() {
                if dot(mem, targets[j]) > dot(mem, targets[best]) {
                    best = j;
                }
            }
            assignment.push(best);
            groups[best].push(mem);
        }
    }

    let row = |i: usize| (0..d).map(|c| tok[[t, i, c]] as f64).collect::<Vec<_>>();
    let mut rows: Vec<Vec<f64>> = dominant.iter().map(|&i| row(i)).collect();
    for g in &groups {
        let mut mean = vec![0.0; d];
        for &i in g {
            for (c, v) in mean.iter_mut().enumerate() {
                *v += tok[[t, i, c]] as f64;
            }
        }
        rows.push(mean.into_iter().map(|v| v / g.len() as f64).collect());
    }
    LocalOracle { scores, dominant, targets, assignment, rows }
}

/// Small random volume. Attention and keys are drawn from a few levels so
/// score and assignment ties are common.
pub fn random_volume(rng: &mut SplitMix64, max_t: usize, max_n: usize, max_d: usize) -> VolumeFeatures {
    let t = 1 + rng.below(max_t as u64) as usize;
    let n = 2 + rng.below(max_n as u64 - 1) as usize;
    let d = 1 + rng.below(max_d as u64) as usize;
    let h = 1 + rng.below(3) as usize;
    let dk = 1 + rng.below(4) as usize;
    let coarse = rng.below(2) == 0;
    let tokens = Array3::from_shape_simple_fn((t, n, d), || rng.uniform(-1.0, 1.0) as f32);
    let cls = Array3::from_shape_simple_fn((t, h, n), || {
        if coarse {
            rng.below(4) as f32 * 0.25
        } else {
            rng.next_f64() as f32
        }
    });
    let keys = Array3::from_shape_simple_fn((t, n, dk), || {
        if coarse {
            rng.below(3) as f32 - 1.0
        } else {
            rng.uniform(-1.0, 1.0) as f32
        }
    });
    VolumeFeatures::new("rand", tokens, cls, keys).expect("valid random volume")
}

pub fn to_dmatrix(a: &ndarray::Array2<f32>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]] as f64)
}

pub fn to_dvector(v: &[f32]) -> DVector<f64> {
    DVector::from_iterator(v.len(), v.iter().map(|x| *x as f64))
}

/// Full-scan cosine ranking with a stable sort; zero-norm keys skipped.
pub fn oracle_rank(query: &[f32], keys: &[Vec<f32>], k: usize) -> Vec<(usize, f64)> {
    let norm = |v: &[f32]| v.iter().map(|x| *x as f64 * *x as f64).sum::<f64>().sqrt();
    let qn = norm(query);
    let mut all: Vec<(usize, f64)> = keys
        .iter()
        .enumerate()
        .filter(|(_, key)| norm(key) > 0.0)
        .map(|(i, key)| {
            let dot: f64 = query.iter().zip(key).map(|(a, b)| *a as f64 * *b as f64).sum();
            (i, (dot / (qn * norm(key))).clamp(-1.0, 1.0))
        })
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    all.truncate(k);
    all
}

/// Questions with the single region each should be routed to.
pub const QA_FIXTURE: &[(&str, RegionId)] = &[
    ("Is there fluid around the heart?", RegionId::Heart),
    ("Is the heart enlarged?", RegionId::Heart),
    ("Are there any nodules in the lungs?", RegionId::Lung),
    ("Is there emphysema?", RegionId::Lung),
    ("Is there ground glass opacity?", RegionId::Lung),
    ("Is the trachea patent?", RegionId::TracheaBronchi),
    ("Is there bronchial wall thickening?", RegionId::TracheaBronchi),
    ("Is the thyroid gland normal?", RegionId::Thyroid),
    ("Are there enlarged lymph nodes in the mediastinum?", RegionId::Mediastinum),
    ("What is the size of the mediastinal lymph node?", RegionId::Mediastinum),
    ("Is there a pleural effusion?", RegionId::Pleura),
    ("Where is the pleural thickening located?", RegionId::Pleura),
    ("Is there a hiatal hernia?", RegionId::Esophagus),
    ("Is the esophagus dilated?", RegionId::Esophagus),
    ("Is there a lesion in the liver?", RegionId::Abdomen),
    ("Any abnormality in the upper abdomen?", RegionId::Abdomen),
    ("Are there degenerative changes in the vertebrae?", RegionId::Bone),
    ("Is there a rib fracture?", RegionId::Bone),
    ("Is there a mass in the breast?", RegionId::Breast),
    ("Are the breasts normal?", RegionId::Breast),
];

pub fn small_settings() -> EngineSettings {
    EngineSettings { compression: CompressionConfig::new(4, 2), projected_dim: 16, ..Default::default() }
}

/// Mock engine with one synthetic study and an exemplar corpus built from
/// `corpus_size` synthetic reports.
pub fn mock_engine(study_id: &str, corpus_size: u64) -> Engine {
    let engine = Engine::mock(small_settings()).expect("mock engine");
    let mut vf = generate_synthetic_volume(11, VolumeDims::new(4, 16, 8, 2, 4)).expect("synthetic volume");
    vf.study_id = study_id.to_string();
    engine.add_study(vf).expect("add study");
    if corpus_size > 0 {
        let reports: Vec<String> = (0..corpus_size).map(synthetic_report).collect();
        let (store, stats) =
            build_corpus(&reports, &RegionSplitter::new(), &MockEmbedder::default(), MOCK_EMBEDDING_DIM);
        assert_eq!(stats.accepted as u64, corpus_size);
        engine.replace_store(store);
    }
    engine
}

/// Small hand-checkable lexicon; aliases chosen to collide with the normal
/// template sentences so negation handling is exercised.
pub fn fixture_lexicon() -> AbnormalityLexicon {
    let raw = include_str!("../fixtures/lexicon.json");
    let map: BTreeMap<String, Vec<String>> = serde_json::from_str(raw).expect("fixture lexicon json");
    AbnormalityLexicon::new(map).expect("fixture lexicon")
}
