mod common;

use common::oracle_rank;
use ctagent_core::backend::{synthetic_report, MockEmbedder, MOCK_EMBEDDING_DIM};
use ctagent_core::memory::{
    build_corpus, encode_findings, retrieve_topk, ExemplarRecord, ExemplarStore, RegionSplitter,
};
use ctagent_core::rng::SplitMix64;
use ctagent_core::RegionId;

fn record(key: Vec<f32>) -> ExemplarRecord {
    ExemplarRecord { key, findings: vec![String::new(); 10], report: String::new() }
}

/// Random keys where about a fifth of records duplicate an earlier key.
fn random_store(rng: &mut SplitMix64, size: usize, dim: usize) -> ExemplarStore {
    let mut store = ExemplarStore::new(dim);
    let mut keys: Vec<Vec<f32>> = Vec::with_capacity(size);
    for _ in 0..size {
        let key = if !keys.is_empty() && rng.below(5) == 0 {
            keys[rng.below(keys.len() as u64) as usize].clone()
        } else {
            (0..dim).map(|_| rng.uniform(-1.0, 1.0) as f32).collect()
        };
        keys.push(key.clone());
        store.push(record(key)).unwrap();
    }
    store
}

#[test]
fn topk_matches_full_scan_with_ties() {
    let mut rng = SplitMix64::new(10);
    for &size in &[1usize, 2, 17, 250, 2_000, 10_000] {
        let store = random_store(&mut rng, size, 8);
        let keys: Vec<Vec<f32>> = store.records().iter().map(|r| r.key.clone()).collect();
        for _ in 0..5 {
            let from_store = rng.below(2) == 0;
            let query: Vec<f32> = if from_store {
                keys[rng.below(size as u64) as usize].clone()
            } else {
                (0..8).map(|_| rng.uniform(-1.0, 1.0) as f32).collect()
            };
            for k in [1usize, 3, 10, size + 5] {
                let got: Vec<(usize, f64)> =
                    retrieve_topk(&query, &store, k).unwrap().iter().map(|r| (r.index, r.similarity)).collect();
                let want = oracle_rank(&query, &keys, k);
                assert_eq!(got.len(), want.len());
                for (g, w) in got.iter().zip(&want) {
                    assert_eq!(g.0, w.0, "size {size} k {k}");
                    assert!((g.1 - w.1).abs() <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn self_retrieval_is_exact_and_first() {
    let mut rng = SplitMix64::new(11);
    let store = random_store(&mut rng, 10_000, 16);
    for _ in 0..200 {
        let i = rng.below(10_000) as usize;
        let q = store.records()[i].key.clone();
        let hits = retrieve_topk(&q, &store, 3).unwrap();
        assert!((hits[0].similarity - 1.0).abs() <= 1e-9);
        let first_copy = store.records().iter().position(|r| r.key == q).unwrap();
        assert_eq!(hits[0].index, first_copy);
    }
}

#[test]
fn zero_vectors_degrade_gracefully() {
    let mut store = ExemplarStore::new(3);
    store.push(record(vec![0.0, 0.0, 0.0])).unwrap();
    store.push(record(vec![1.0, 0.0, 0.0])).unwrap();
    let hits = retrieve_topk(&[1.0, 1.0, 0.0], &store, 3).unwrap();
    assert_eq!(hits.len(), 1);
    assert_eq!(hits[0].index, 1);
    assert!(retrieve_topk(&[0.0, 0.0, 0.0], &store, 3).unwrap().is_empty());
    assert!(retrieve_topk(&[1.0, 0.0], &store, 3).is_err());
}

#[test]
fn corpus_reports_retrieve_themselves() {
    let reports: Vec<String> = (0..40).map(synthetic_report).collect();
    let emb = MockEmbedder::default();
    let (store, stats) = build_corpus(&reports, &RegionSplitter::new(), &emb, MOCK_EMBEDDING_DIM);
    assert_eq!(stats.accepted, 40);
    assert_eq!(stats.filled_regions, 0, "every synthetic report names all ten regions");
    for (i, rec) in store.records().iter().enumerate() {
        let findings: Vec<&str> = RegionId::ALL.iter().map(|r| rec.finding(*r)).collect();
        let key = encode_findings(&findings, &emb).unwrap();
        let hits = retrieve_topk(&key, &store, 3).unwrap();
        assert!((hits[0].similarity - 1.0).abs() < 1e-6);
        // Identical synthetic reports are possible; the match must be one of them.
        assert_eq!(store.records()[hits[0].index].report, reports[i]);
    }
}
