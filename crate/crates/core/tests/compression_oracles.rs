mod common;

use common::{close, oracle_local, random_volume, to_dmatrix};
use ctagent_core::compression::moe::moe_refine_token;
use ctagent_core::compression::{
    aggregate_global, assign_to_targets, compress_slice, compress_volume, compression_ratio, moe_gate,
    score_dominant, select_dominant, total_tokens, CompressionConfig, MoeParams, Projection, TieBreak,
};
use ctagent_core::rng::SplitMix64;
use ndarray::{Array1, Array2, Axis};

#[test]
fn token_budget_matches_default_configuration() {
    assert_eq!(total_tokens(256, 240, 54, 10), 15_616);
    let ratio = compression_ratio(256, 240, 54, 10);
    assert!((ratio - 0.7458).abs() < 1e-4, "{ratio}");
    assert!((ratio - 0.75).abs() < 0.01);
    assert_eq!(CompressionConfig::default().tokens_per_slice(), 64);
}

#[test]
fn local_pathway_matches_brute_force() {
    let mut rng = SplitMix64::new(2024);
    for case in 0..300 {
        let vf = random_volume(&mut rng, 4, 24, 8);
        let dims = vf.dims();
        let k = 1 + rng.below(dims.tokens as u64) as usize;
        let m = rng.below((dims.tokens - k) as u64 + 1) as usize;
        let cfg = CompressionConfig::new(k, m);
        for t in 0..dims.slices {
            let o = oracle_local(&vf, t, k, m);
            let scores = score_dominant(vf.slice_cls_attn(t));
            assert_eq!(scores, o.scores, "case {case}");
            assert_eq!(select_dominant(&scores, k, TieBreak::LowestIndex).unwrap(), o.dominant, "case {case}");
            if m > 0 {
                let members: Vec<usize> = (0..dims.tokens)
                    .filter(|i| !o.dominant.contains(i) && !o.targets.contains(i))
                    .collect();
                let keys = vf.slice_keys(t);
                let got = assign_to_targets(
                    keys.select(Axis(0), &members).view(),
                    keys.select(Axis(0), &o.targets).view(),
                );
                assert_eq!(got, o.assignment, "case {case}");
            }
            let rows = compress_slice(t, &vf, &cfg).unwrap();
            assert_eq!(rows.nrows(), k + m);
            for (r, want) in rows.outer_iter().zip(&o.rows) {
                for (a, b) in r.iter().zip(want) {
                    assert!(close(*a as f64, *b, 1e-6), "case {case}: {a} vs {b}");
                }
            }
        }
    }
}

#[test]
fn identity_moe_global_pathway_is_slice_mean() {
    let mut rng = SplitMix64::new(9);
    for _ in 0..50 {
        let vf = random_volume(&mut rng, 6, 12, 6);
        let d = vf.dims();
        let moe = MoeParams::identity(d.dim, 3, 3);
        let proj = Projection::identity_padded(d.dim, d.dim + 2);
        let cfg = CompressionConfig::new(1, 0);
        let cv = compress_volume(&vf, &moe, &cfg, &proj).unwrap();
        let mean = vf.tokens().mean_axis(Axis(0)).unwrap();
        for (a, b) in cv.global.iter().zip(mean.iter()) {
            assert!(close(*a as f64, *b as f64, 1e-6));
        }
        assert_eq!(cv.len(), total_tokens(d.tokens, d.slices, 1, 0));
        assert_eq!(cv.projected.ncols(), d.dim + 2);
    }
}

#[test]
fn aggregate_and_projection_match_nalgebra() {
    let mut rng = SplitMix64::new(77);
    for _ in 0..200 {
        let t = 1 + rng.below(8) as usize;
        let n = 1 + rng.below(32) as usize;
        let d = 1 + rng.below(16) as usize;
        let slices: Vec<Array2<f32>> = (0..t)
            .map(|_| Array2::from_shape_simple_fn((n, d), || rng.uniform(-3.0, 3.0) as f32))
            .collect();
        let got = aggregate_global(&slices).unwrap();
        let mut want = nalgebra::DMatrix::<f64>::zeros(n, d);
        for s in &slices {
            want += to_dmatrix(s);
        }
        want /= t as f64;
        for i in 0..n {
            for j in 0..d {
                assert!(close(got[[i, j]] as f64, want[(i, j)], 1e-6));
            }
        }

        let d_out = 1 + rng.below(12) as usize;
        let w = Array2::from_shape_simple_fn((d, d_out), || rng.uniform(-1.0, 1.0) as f32);
        let b = Array1::from_shape_simple_fn(d_out, || rng.uniform(-1.0, 1.0) as f32);
        let proj = Projection::new(w.clone(), b.clone()).unwrap();
        let got = proj.project(slices[0].view()).unwrap();
        let mut want = to_dmatrix(&slices[0]) * to_dmatrix(&w);
        for mut row in want.row_iter_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += b[j] as f64;
            }
        }
        for i in 0..n {
            for j in 0..d_out {
                assert!(close(got[[i, j]] as f64, want[(i, j)], 1e-6));
            }
        }
    }
}

#[test]
fn moe_gate_normalizes_and_identity_experts_are_invariant() {
    let mut rng = SplitMix64::new(3);
    for _ in 0..2_000 {
        let d = 1 + rng.below(16) as usize;
        let e = 1 + rng.below(8) as usize;
        let mut p = MoeParams::identity(d, e, e);
        let scale = rng.uniform(0.1, 50.0);
        p.gate_w.mapv_inplace(|_| (rng.normal() * scale) as f32);
        p.gate_b.mapv_inplace(|_| (rng.normal() * scale) as f32);
        let z = Array1::from_shape_simple_fn(d, || rng.uniform(-2.0, 2.0) as f32);
        let g = moe_gate(z.view(), &p).unwrap();
        assert!((g.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        assert!(g.iter().all(|v| *v >= 0.0));
        let out = moe_refine_token(z.view(), &p).unwrap();
        for (a, b) in out.iter().zip(z.iter()) {
            assert!(close(*a, *b as f64, 1e-9));
        }
    }
}
