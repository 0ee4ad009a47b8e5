//! Production-size study through save, load and local compression.

use ctagent_core::compression::{compress_slice, CompressionConfig, DEFAULT_PROJECTED_DIM};
use ctagent_core::feature_io::{
    generate_synthetic_volume, load_volume, save_volume, VolumeDims, DEFAULT_SLICES, DEFAULT_TOKENS_PER_SLICE,
    DEFAULT_TOKEN_DIM,
};

#[test]
fn default_constants() {
    assert_eq!((DEFAULT_SLICES, DEFAULT_TOKENS_PER_SLICE, DEFAULT_TOKEN_DIM), (240, 256, 1024));
    assert_eq!(DEFAULT_PROJECTED_DIM, 4096);
    let cfg = CompressionConfig::default();
    assert_eq!((cfg.dominant, cfg.contextual), (54, 10));
}

#[test]
fn full_size_volume_round_trips() {
    let dims = VolumeDims::new(DEFAULT_SLICES, DEFAULT_TOKENS_PER_SLICE, DEFAULT_TOKEN_DIM, 1, 16);
    let vf = generate_synthetic_volume(1, dims).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("full.ctfv");
    save_volume(&vf, &path).unwrap();
    let expected = 8 + 5 * 4 + dims.payload_bytes().unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), expected);

    let back = load_volume(&path).unwrap();
    assert_eq!(back.dims(), dims);
    assert!(back.tokens() == vf.tokens());
    let cfg = CompressionConfig::default();
    for t in [0, DEFAULT_SLICES - 1] {
        assert_eq!(compress_slice(t, &back, &cfg).unwrap().dim(), (64, DEFAULT_TOKEN_DIM));
    }
}
