//! Finite-difference gradient checks shared by the integration suites.
#![allow(dead_code)]

use jnet_core::jnet::{Network, NetworkSpec, Variant};
use jnet_core::netops::{
    layer_norm, layer_norm_backward, sca, sca_backward, simple_gate, simple_gate_backward, BaselineBlock,
    Initializer, ParamStore,
};
use jnet_core::{BitDepth, FeatureMap, ImageTensor, SeededRng};
use rand::Rng;

pub const STEP: f64 = 1e-4;

pub fn random_map(rng: &mut SeededRng, n: usize, c: usize, h: usize, w: usize) -> FeatureMap<f64> {
    FeatureMap::from_fn(n, c, h, w, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

fn random_vec(rng: &mut SeededRng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn dot(a: &FeatureMap<f64>, b: &FeatureMap<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`; infinite when both vanish, since a check
/// against an all-zero gradient proves nothing.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        return f64::INFINITY;
    }
    norm(&diff) / scale
}

/// Central differences of `f` with respect to `values[i]` for each `i` in `at`.
pub fn central_diff(values: &mut [f64], at: &[usize], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    at.iter()
        .map(|&i| {
            let orig = values[i];
            values[i] = orig + STEP;
            let plus = f(values);
            values[i] = orig - STEP;
            let minus = f(values);
            values[i] = orig;
            (plus - minus) / (2.0 * STEP)
        })
        .collect()
}

/// Up to `k` evenly spread indices in `0..len`.
pub fn sample_indices(len: usize, k: usize) -> Vec<usize> {
    if len <= k {
        return (0..len).collect();
    }
    (0..k).map(|i| i * (len - 1) / (k - 1)).collect()
}

fn with_data(x: &FeatureMap<f64>, data: &[f64]) -> FeatureMap<f64> {
    let (n, c, h, w) = x.shape();
    FeatureMap::from_nhwc(n, c, h, w, data.to_vec()).unwrap()
}

pub fn layer_norm_error(seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let x = random_map(&mut rng, 2, 6, 3, 4);
    let gain = random_vec(&mut rng, 6, 0.5, 1.5);
    let bias = random_vec(&mut rng, 6, -0.5, 0.5);
    let dy = random_map(&mut rng, 2, 6, 3, 4);
    let (_, cache) = layer_norm(&x, &gain, &bias).unwrap();
    let (mut dg, mut db) = (vec![0.0; 6], vec![0.0; 6]);
    let dx = layer_norm_backward(&cache, &gain, &dy, &mut dg, &mut db);

    let loss = |x: &FeatureMap<f64>, g: &[f64], b: &[f64]| dot(&layer_norm(x, g, b).unwrap().0, &dy);
    let mut xs = x.data().to_vec();
    let idx: Vec<usize> = (0..xs.len()).collect();
    let ndx = central_diff(&mut xs, &idx, |v| loss(&with_data(&x, v), &gain, &bias));
    let mut gs = gain.clone();
    let ndg = central_diff(&mut gs, &[0, 1, 2, 3, 4, 5], |v| loss(&x, v, &bias));
    let mut bs = bias.clone();
    let ndb = central_diff(&mut bs, &[0, 1, 2, 3, 4, 5], |v| loss(&x, &gain, v));
    rel_err(dx.data(), &ndx).max(rel_err(&dg, &ndg)).max(rel_err(&db, &ndb))
}

pub fn simple_gate_error(seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let x = random_map(&mut rng, 2, 8, 3, 3);
    let dy = random_map(&mut rng, 2, 4, 3, 3);
    let dx = simple_gate_backward(&x, &dy);
    let mut xs = x.data().to_vec();
    let idx: Vec<usize> = (0..xs.len()).collect();
    let ndx = central_diff(&mut xs, &idx, |v| dot(&simple_gate(&with_data(&x, v)).unwrap(), &dy));
    rel_err(dx.data(), &ndx)
}

pub fn sca_error(seed: u64) -> f64 {
    let c = 5;
    let mut rng = SeededRng::new(seed);
    let x = random_map(&mut rng, 2, c, 3, 4);
    let weight = random_vec(&mut rng, c * c, -1.0, 1.0);
    let bias = random_vec(&mut rng, c, -1.0, 1.0);
    let dy = random_map(&mut rng, 2, c, 3, 4);
    let (_, cache) = sca(&x, &weight, Some(&bias)).unwrap();
    let (mut dw, mut db) = (vec![0.0; c * c], vec![0.0; c]);
    let dx = sca_backward(&x, &weight, &cache, &dy, &mut dw, Some(&mut db));

    let loss = |x: &FeatureMap<f64>, w: &[f64], b: &[f64]| dot(&sca(x, w, Some(b)).unwrap().0, &dy);
    let mut xs = x.data().to_vec();
    let idx: Vec<usize> = (0..xs.len()).collect();
    let ndx = central_diff(&mut xs, &idx, |v| loss(&with_data(&x, v), &weight, &bias));
    let mut ws = weight.clone();
    let widx: Vec<usize> = (0..c * c).collect();
    let ndw = central_diff(&mut ws, &widx, |v| loss(&x, v, &bias));
    let mut bs = bias.clone();
    let bidx: Vec<usize> = (0..c).collect();
    let ndb = central_diff(&mut bs, &bidx, |v| loss(&x, &weight, v));
    rel_err(dx.data(), &ndx).max(rel_err(&dw, &ndw)).max(rel_err(&db, &ndb))
}

/// Overwrites every parameter with a random value so that no branch is
/// silenced by zero initialization.
fn randomize(store: &mut ParamStore<f64>, rng: &mut SeededRng) {
    for p in store.params_mut() {
        let gainlike = p.name.ends_with(".gain");
        for v in p.data.iter_mut() {
            *v = if gainlike { rng.gen_range(0.5..1.5) } else { rng.gen_range(-0.5..0.5) };
        }
    }
}

/// Input and parameter gradient error of one baseline block, with and
/// without residual scales.
pub fn baseline_block_error(seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for residual_scale in [false, true] {
        let mut rng = SeededRng::new(seed);
        let mut store = ParamStore::<f64>::new();
        let block = BaselineBlock::register(&mut Initializer::new(&mut store, &mut rng), "b", 4, residual_scale);
        randomize(&mut store, &mut rng);
        let x = random_map(&mut rng, 2, 4, 4, 3);
        let dy = random_map(&mut rng, 2, 4, 4, 3);
        let (_, cache) = block.forward(&store, &x).unwrap();
        let mut grads = store.zero_grads();
        let dx = block.backward(&store, &mut grads, &cache, &dy);

        let mut xs = x.data().to_vec();
        let idx: Vec<usize> = (0..xs.len()).collect();
        let ndx = central_diff(&mut xs, &idx, |v| dot(&block.forward(&store, &with_data(&x, v)).unwrap().0, &dy));
        worst = worst.max(rel_err(dx.data(), &ndx));

        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for k in 0..store.len() {
            let len = store.params()[k].data.len();
            let idx: Vec<usize> = (0..len).collect();
            let mut probe = store.clone();
            let mut vals = probe.params()[k].data.clone();
            let nd = central_diff(&mut vals, &idx, |v| {
                probe.params_mut()[k].data.copy_from_slice(v);
                dot(&block.forward(&probe, &x).unwrap().0, &dy)
            });
            analytic.extend_from_slice(&grads[k]);
            numeric.extend(nd);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Parameter gradient error of a whole network, sampling at most `per_array`
/// coordinates per parameter array.
pub fn network_error(spec: &NetworkSpec, seed: u64, h: usize, w: usize, per_array: usize) -> f64 {
    let net = Network::layout(spec).unwrap();
    let mut rng = SeededRng::new(seed);
    let mut store: ParamStore<f64> = net.init_params(&mut rng);
    randomize(&mut store, &mut rng);
    let x = random_map(&mut rng, 2, spec.in_channels, h, w).map(|v| 0.5 + 0.5 * v);
    let (y, cache) = net.forward_train(&store, &x).unwrap();
    let (n, c, oh, ow) = y.shape();
    let dy = random_map(&mut rng, n, c, oh, ow);
    let mut grads = store.zero_grads();
    net.backward(&store, &mut grads, &cache, &dy);

    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for k in 0..store.len() {
        let idx = sample_indices(store.params()[k].data.len(), per_array);
        let mut probe = store.clone();
        let mut vals = probe.params()[k].data.clone();
        let nd = central_diff(&mut vals, &idx, |v| {
            probe.params_mut()[k].data.copy_from_slice(v);
            dot(&net.forward(&probe, &x).unwrap(), &dy)
        });
        analytic.extend(idx.iter().map(|&i| grads[k][i]));
        numeric.extend(nd);
    }
    rel_err(&analytic, &numeric)
}

pub fn tiny_jnet() -> NetworkSpec {
    NetworkSpec { variant: Variant::Jnet, width: 8, encoder_levels: 1, blocks_per_stage: 1, ..NetworkSpec::default() }
}

/// A piecewise-smooth RGB scene: a colour gradient overlaid with random
/// hard-edged rectangles, discs and bars plus a faint oriented texture.
pub fn synthetic_scene(seed: u64, h: usize, w: usize) -> ImageTensor {
    let mut rng = SeededRng::new(seed);
    let color = |rng: &mut SeededRng| [rng.gen_range(0.05..0.95f32), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
    let base = color(&mut rng);
    let tilt = [rng.gen_range(-0.3..0.3f32), rng.gen_range(-0.3..0.3f32)];
    let mut img = ImageTensor::from_fn(3, h, w, |c, y, x| {
        base[c] + tilt[0] * (y as f32 / h as f32 - 0.5) + tilt[1] * (x as f32 / w as f32 - 0.5)
    });
    let shapes = rng.gen_range(6..12);
    for _ in 0..shapes {
        let col = color(&mut rng);
        let cy = rng.gen_range(0.0..h as f32);
        let cx = rng.gen_range(0.0..w as f32);
        let ry = rng.gen_range(2.0..h as f32 / 3.0);
        let rx = rng.gen_range(2.0..w as f32 / 3.0);
        let kind = rng.gen_range(0..3);
        let angle: f32 = rng.gen_range(0.0..std::f32::consts::PI);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f32 - cy, x as f32 - cx);
                let inside = match kind {
                    0 => dy.abs() < ry && dx.abs() < rx,
                    1 => (dy / ry).powi(2) + (dx / rx).powi(2) < 1.0,
                    _ => (dy * angle.cos() - dx * angle.sin()).abs() < ry.min(rx) / 3.0,
                };
                if inside {
                    for (c, &v) in col.iter().enumerate() {
                        img.set(c, y, x, v);
                    }
                }
            }
        }
    }
    let (fy, fx, phase) = (rng.gen_range(0.2..1.2f32), rng.gen_range(0.2..1.2f32), rng.gen_range(0.0..6.3f32));
    let tex = ImageTensor::from_fn(3, h, w, |_, y, x| 0.03 * (fy * y as f32 + fx * x as f32 + phase).sin());
    let data = img.data().iter().zip(tex.data()).map(|(a, b)| a + b).collect();
    ImageTensor::from_vec(3, h, w, data).unwrap().clamp01()
}

/// Writes `count` scenes as 8-bit PNGs named `scene_NNN.png`.
pub fn write_scenes(dir: &std::path::Path, first_seed: u64, count: usize, h: usize, w: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..count {
        let img = synthetic_scene(first_seed + i as u64, h, w);
        img.save(&dir.join(format!("scene_{i:03}.png")), BitDepth::Eight).unwrap();
    }
}
