//! Behavioral tests of continuous-coordinate decoding: hand-computed toy
//! cases, order/chunk invariance, piecewise structure, and cross-resolution
//! consistency at shared query points.

use ifa_core::config::{HeadConfig, PeConfig};
use ifa_core::head::HeadError;
use ifa_core::{
    FeatureGrid, IfaHead, ParamStore, PeMode, Pyramid, QueryCoord, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn head_cfg(levels: Vec<u32>, proj_dim: usize, mlp: Vec<usize>) -> HeadConfig {
    HeadConfig {
        levels,
        proj_dim,
        mlp_widths: mlp,
        chunk_size: 64,
    }
}

fn pe_cfg(mode: PeMode, total_dim: usize) -> PeConfig {
    PeConfig {
        mode,
        total_dim,
        learned: mode.learned(),
        share_across_levels: true,
    }
}

fn random_pyramid(seed: u64, channels: usize, dims: &[(u32, usize, usize)]) -> Pyramid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grids = dims
        .iter()
        .map(|&(level, h, w)| {
            let data: Vec<f64> = (0..channels * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            FeatureGrid::new(level, Tensor::new(vec![channels, h, w], data)).unwrap()
        })
        .collect();
    Pyramid::new(grids)
}

fn set(store: &mut ParamStore, name: &str, data: Vec<f64>) {
    let id = store.lookup(name).unwrap();
    let p = store.get_mut(id);
    assert_eq!(p.value.data.len(), data.len(), "{name}");
    p.value.data = data;
}

/// One level, one channel, identity projection, no position encoding, and a
/// single linear layer: logits = W * code + b, checkable by hand.
#[test]
fn toy_single_level_hand_computed() {
    let cfg = head_cfg(vec![2], 1, vec![]);
    let pe = pe_cfg(PeMode::None, 0);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let head = IfaHead::init(&mut store, &mut rng, &cfg, &pe, &[1], 2);
    set(&mut store, "head.proj0.w", vec![1.0]);
    set(&mut store, "head.proj0.b", vec![0.0]);
    set(&mut store, "head.mlp0.w", vec![2.0, -1.0]);
    set(&mut store, "head.mlp0.b", vec![0.5, 0.25]);

    let grid = FeatureGrid::new(
        2,
        Tensor::new(vec![1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]),
    )
    .unwrap();
    let pyr = Pyramid::new(vec![grid]);
    // query in the top-left quadrant -> code 0.1; bottom-right -> 0.4
    let queries = vec![
        QueryCoord { x: 0.2, y: 0.2 },
        QueryCoord { x: 0.9, y: 0.8 },
    ];
    let out = head.decode(&store, &pyr, &queries).unwrap();
    let expect = [
        [2.0 * 0.1 + 0.5, -1.0 * 0.1 + 0.25],
        [2.0 * 0.4 + 0.5, -1.0 * 0.4 + 0.25],
    ];
    for q in 0..2 {
        for c in 0..2 {
            assert!((out.data[q * 2 + c] - expect[q][c]).abs() < 1e-12);
        }
    }
}

#[test]
fn decode_is_chunk_invariant() {
    let cfg_small = head_cfg(vec![2, 3], 4, vec![8]);
    let pe = pe_cfg(PeMode::SineCosineLearned, 8);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let head = IfaHead::init(&mut store, &mut rng, &cfg_small, &pe, &[3, 3], 5);
    let pyr = random_pyramid(1, 3, &[(2, 4, 4), (3, 2, 2)]);
    let queries: Vec<QueryCoord> = (0..37)
        .map(|i| QueryCoord {
            x: (i as f64 * 0.618) % 1.0,
            y: (i as f64 * 0.382) % 1.0,
        })
        .collect();
    let a = head.decode(&store, &pyr, &queries).unwrap();
    let mut head2 = head.clone();
    head2.cfg.chunk_size = 1;
    let b = head2.decode(&store, &pyr, &queries).unwrap();
    head2.cfg.chunk_size = 10_000;
    let c = head2.decode(&store, &pyr, &queries).unwrap();
    assert_eq!(a.data, b.data);
    assert_eq!(a.data, c.data);
}

#[test]
fn decode_commutes_with_query_permutation() {
    let cfg = head_cfg(vec![2, 3], 4, vec![8]);
    let pe = pe_cfg(PeMode::SineCosineLearned, 8);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let head = IfaHead::init(&mut store, &mut rng, &cfg, &pe, &[2, 2], 3);
    let pyr = random_pyramid(2, 2, &[(2, 4, 4), (3, 2, 2)]);
    let queries: Vec<QueryCoord> = (0..20)
        .map(|i| QueryCoord {
            x: (i as f64 + 0.5) / 20.0,
            y: ((i * 7 % 20) as f64 + 0.5) / 20.0,
        })
        .collect();
    let reversed: Vec<QueryCoord> = queries.iter().rev().copied().collect();
    let fwd = head.decode(&store, &pyr, &queries).unwrap();
    let rev = head.decode(&store, &pyr, &reversed).unwrap();
    let n = 3;
    for q in 0..queries.len() {
        let r = queries.len() - 1 - q;
        assert_eq!(fwd.data[q * n..q * n + n], rev.data[r * n..r * n + n]);
    }
}

/// Without position encodings the decoder sees only the nearest codes, so
/// the output is constant within the intersection of nearest-cell regions
/// and jumps only across cell boundaries.
#[test]
fn no_encoding_means_piecewise_constant() {
    let cfg = head_cfg(vec![2], 3, vec![6]);
    let pe = pe_cfg(PeMode::None, 0);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let head = IfaHead::init(&mut store, &mut rng, &cfg, &pe, &[2], 4);
    let pyr = random_pyramid(3, 2, &[(2, 2, 2)]);
    // all within the top-left cell of the 2x2 grid
    let inside = vec![
        QueryCoord { x: 0.10, y: 0.10 },
        QueryCoord { x: 0.30, y: 0.05 },
        QueryCoord { x: 0.45, y: 0.45 },
    ];
    let out = head.decode(&store, &pyr, &inside).unwrap();
    assert_eq!(out.data[0..4], out.data[4..8]);
    assert_eq!(out.data[0..4], out.data[8..12]);
    // crossing into the next cell changes the logits
    let other = head
        .decode(&store, &pyr, &[QueryCoord { x: 0.55, y: 0.45 }])
        .unwrap();
    assert_ne!(out.data[0..4], other.data[0..4]);
}

/// With position encodings enabled, moving within one cell changes the
/// output: the delta is part of the input.
#[test]
fn encoding_breaks_within_cell_constancy() {
    let cfg = head_cfg(vec![2], 3, vec![6]);
    let pe = pe_cfg(PeMode::SineCosineLearned, 8);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let head = IfaHead::init(&mut store, &mut rng, &cfg, &pe, &[2], 4);
    let pyr = random_pyramid(4, 2, &[(2, 2, 2)]);
    let a = head
        .decode(&store, &pyr, &[QueryCoord { x: 0.10, y: 0.10 }])
        .unwrap();
    let b = head
        .decode(&store, &pyr, &[QueryCoord { x: 0.30, y: 0.05 }])
        .unwrap();
    assert_ne!(a.data, b.data);
}

/// Decoding the same continuous coordinate is bit-identical regardless of
/// which output raster it came from: the stride-free contract.
#[test]
fn shared_coordinates_agree_across_resolutions() {
    let cfg = head_cfg(vec![2, 3], 4, vec![8, 8]);
    let pe = pe_cfg(PeMode::SineCosineLearned, 12);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let head = IfaHead::init(&mut store, &mut rng, &cfg, &pe, &[3, 3], 5);
    let pyr = random_pyramid(5, 3, &[(2, 8, 8), (3, 4, 4)]);
    let (h, w) = (6, 6);
    let coarse = head.decode_map(&store, &pyr, h, w).unwrap();
    let fine = head.decode_map(&store, &pyr, 3 * h, 3 * w).unwrap();
    let n = 5;
    // center of coarse cell (r, c) coincides with fine cell (3r+1, 3c+1)
    for r in 0..h {
        for c in 0..w {
            for k in 0..n {
                let a = coarse.data[k * h * w + r * w + c];
                let b = fine.data[k * 9 * h * w + (3 * r + 1) * 3 * w + (3 * c + 1)];
                assert_eq!(a.to_bits(), b.to_bits(), "class {k} at ({r},{c})");
            }
        }
    }
}

#[test]
fn level_mismatch_and_bad_queries_rejected() {
    let cfg = head_cfg(vec![2, 3], 4, vec![8]);
    let pe = pe_cfg(PeMode::SineCosineLearned, 8);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let head = IfaHead::init(&mut store, &mut rng, &cfg, &pe, &[2, 2], 3);
    let one_level = random_pyramid(6, 2, &[(2, 4, 4)]);
    let q = vec![QueryCoord { x: 0.5, y: 0.5 }];
    assert!(matches!(
        head.decode(&store, &one_level, &q),
        Err(HeadError::LevelMismatch { .. })
    ));
    let pyr = random_pyramid(6, 2, &[(2, 4, 4), (3, 2, 2)]);
    assert!(matches!(
        head.decode(&store, &pyr, &[]),
        Err(HeadError::EmptyQueries)
    ));
    assert!(head
        .decode(&store, &pyr, &[QueryCoord { x: 1.5, y: 0.5 }])
        .is_err());
}
