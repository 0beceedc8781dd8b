mod common;

use common::*;
use jnet_core::jnet::{DownsampleKind, NetworkSpec, Variant};
use jnet_core::netops::{
    conv2d, conv2d_backward, depthwise3x3, depthwise3x3_backward, pixel_shuffle, pixel_unshuffle, BlockKind,
    ConvGeometry,
};
use jnet_core::{FeatureMap, SeededRng};
use rand::Rng;

#[test]
fn layer_norm_matches_finite_differences() {
    for seed in 0..3 {
        let e = layer_norm_error(seed);
        assert!(e < 1e-4, "seed {seed}: {e}");
    }
}

#[test]
fn simple_gate_matches_finite_differences() {
    assert!(simple_gate_error(1) < 1e-4);
}

#[test]
fn sca_matches_finite_differences() {
    for seed in 0..3 {
        let e = sca_error(seed);
        assert!(e < 1e-4, "seed {seed}: {e}");
    }
}

#[test]
fn baseline_block_matches_finite_differences() {
    let e = baseline_block_error(7);
    assert!(e < 1e-4, "{e}");
}

#[test]
fn conv_matches_finite_differences() {
    let mut rng = SeededRng::new(3);
    for g in [ConvGeometry::same(3, 4, 3), ConvGeometry::pointwise(5, 2), ConvGeometry { cin: 2, cout: 3, kernel: 2, stride: 2, pad: 0 }] {
        let x = random_map(&mut rng, 2, g.cin, 6, 4);
        let w: Vec<f64> = (0..g.weight_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..g.cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = conv2d(&x, &w, Some(&b), &g).unwrap();
        let (n, c, h, wd) = y.shape();
        let dy = random_map(&mut rng, n, c, h, wd);
        let (mut dw, mut db) = (vec![0.0; w.len()], vec![0.0; b.len()]);
        let dx = conv2d_backward(&x, &w, &g, &dy, &mut dw, Some(&mut db));

        let mut xs = x.data().to_vec();
        let idx: Vec<usize> = (0..xs.len()).collect();
        let ndx = central_diff(&mut xs, &idx, |v| {
            let xv = FeatureMap::from_nhwc(2, g.cin, 6, 4, v.to_vec()).unwrap();
            dot(&conv2d(&xv, &w, Some(&b), &g).unwrap(), &dy)
        });
        assert!(rel_err(dx.data(), &ndx) < 1e-6);
        let mut ws = w.clone();
        let widx: Vec<usize> = (0..ws.len()).collect();
        let ndw = central_diff(&mut ws, &widx, |v| dot(&conv2d(&x, v, Some(&b), &g).unwrap(), &dy));
        assert!(rel_err(&dw, &ndw) < 1e-6);
        let mut bs = b.clone();
        let bidx: Vec<usize> = (0..bs.len()).collect();
        let ndb = central_diff(&mut bs, &bidx, |v| dot(&conv2d(&x, &w, Some(v), &g).unwrap(), &dy));
        assert!(rel_err(&db, &ndb) < 1e-6);
    }
}

#[test]
fn depthwise_matches_finite_differences() {
    let mut rng = SeededRng::new(4);
    let x = random_map(&mut rng, 2, 3, 5, 4);
    let w: Vec<f64> = (0..27).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let dy = random_map(&mut rng, 2, 3, 5, 4);
    let (mut dw, mut db) = (vec![0.0; 27], vec![0.0; 3]);
    let dx = depthwise3x3_backward(&x, &w, &dy, &mut dw, &mut db);
    let mut xs = x.data().to_vec();
    let idx: Vec<usize> = (0..xs.len()).collect();
    let ndx = central_diff(&mut xs, &idx, |v| {
        dot(&depthwise3x3(&FeatureMap::from_nhwc(2, 3, 5, 4, v.to_vec()).unwrap(), &w, &b).unwrap(), &dy)
    });
    assert!(rel_err(dx.data(), &ndx) < 1e-6);
    let mut ws = w.clone();
    let ndw = central_diff(&mut ws, &(0..27).collect::<Vec<_>>(), |v| dot(&depthwise3x3(&x, v, &b).unwrap(), &dy));
    assert!(rel_err(&dw, &ndw) < 1e-6);
    let mut bs = b.clone();
    let ndb = central_diff(&mut bs, &[0, 1, 2], |v| dot(&depthwise3x3(&x, &w, v).unwrap(), &dy));
    assert!(rel_err(&db, &ndb) < 1e-6);
}

#[test]
fn shuffle_adjoint() {
    // pixel_unshuffle is the transpose of pixel_shuffle: <PS x, y> = <x, PU y>.
    let mut rng = SeededRng::new(5);
    let x = random_map(&mut rng, 2, 8, 3, 2);
    let y = random_map(&mut rng, 2, 2, 6, 4);
    let lhs = dot(&pixel_shuffle(&x, 2).unwrap(), &y);
    let rhs = dot(&x, &pixel_unshuffle(&y, 2).unwrap());
    assert!((lhs - rhs).abs() < 1e-12);
}

#[test]
fn tiny_jnet_matches_finite_differences() {
    let e = network_error(&tiny_jnet(), 11, 6, 8, 12);
    assert!(e < 1e-3, "{e}");
}

#[test]
fn other_variants_match_finite_differences() {
    let specs = [
        NetworkSpec { variant: Variant::UnetPs, downsample: DownsampleKind::MaxPool, residual_scale: true, ..tiny_jnet() },
        NetworkSpec { variant: Variant::FlatUnet, global_residual: true, ..tiny_jnet() },
        NetworkSpec { block_type: BlockKind::Naive, in_channels: 1, out_channels: 1, ..tiny_jnet() },
    ];
    for spec in specs {
        let e = network_error(&spec, 12, 4, 6, 8);
        assert!(e < 1e-3, "{:?}: {e}", spec.variant);
    }
}


