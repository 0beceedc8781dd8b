//! Acceptance suite. Runs every criterion in order and prints one
//! PASS/FAIL line each; exits non-zero if any fails.
//!
//! Pass criterion numbers to run a subset: `cargo test --test acceptance -- 1 9`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use common::*;
use jnet_core::datapipe::{scan_dir, Corpus, ValidationSet};
use jnet_core::degradation::{blur, make_gaussian_kernel, DegradationConfig, KernelPolicy};
use jnet_core::evalkit::{bicubic_resize, lucy_richardson, psnr, Direction, LucyRichardson};
use jnet_core::image::reflect_index;
use jnet_core::jnet::{super_resolve, Network, NetworkSpec, Variant};
use jnet_core::netops::{pixel_shuffle, pixel_unshuffle, BaselineBlock, Initializer, ParamStore};
use jnet_core::trainer::{decode_checkpoint, encode_checkpoint, read_log, TrainConfig, Trainer, CHECKPOINT_FILE, METRICS_FILE};
use jnet_core::{FeatureMap, ImageTensor, SeededRng};
use rand::Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn desk_spec(variant: Variant) -> NetworkSpec {
    NetworkSpec { variant, width: 32, encoder_levels: 2, ..NetworkSpec::default() }
}

/// Reference blur: direct 2-D correlation with an independently computed
/// normalized Gaussian and mirrored borders.
fn naive_blur(img: &ImageTensor, sigma: f64, size: usize) -> Vec<f64> {
    let half = (size / 2) as isize;
    let mut k = vec![0.0; size * size];
    for i in 0..size {
        for j in 0..size {
            let (dy, dx) = (i as f64 - half as f64, j as f64 - half as f64);
            k[i * size + j] = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let (c, h, w) = img.shape();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for i in 0..size {
                    for j in 0..size {
                        let yy = reflect_index(y as isize + i as isize - half, h);
                        let xx = reflect_index(x as isize + j as isize - half, w);
                        acc += k[i * size + j] * img.get(ch, yy, xx) as f64;
                    }
                }
                out[(ch * h + y) * w + x] = acc;
            }
        }
    }
    out
}

fn criterion_1() -> Outcome {
    let mut rng = SeededRng::new(1);
    let mut worst: f64 = 0.0;
    for sigma in [0.5, 1.0, 2.0, 5.0] {
        // The three-sigma extent exceeds a 16-pixel image at σ = 5; use the
        // largest odd size that fits.
        let size = KernelPolicy::ThreeSigma.size_for(sigma).min(15);
        let kernel = make_gaussian_kernel(sigma, size).map_err(|e| e.to_string())?;
        for _ in 0..50 {
            let img = ImageTensor::from_fn(3, 16, 16, |_, _, _| rng.gen());
            let fast = blur(&img, &kernel).map_err(|e| e.to_string())?;
            let slow = naive_blur(&img, sigma, size);
            let diff = fast.data().iter().zip(&slow).map(|(&a, &b)| (a as f64 - b).abs()).fold(0.0, f64::max);
            worst = worst.max(diff);
        }
    }
    ensure!(worst < 1e-6, "max abs diff {worst:e}");
    Ok(format!("200 blurs, max abs diff {worst:.2e}"))
}

fn criterion_2() -> Outcome {
    let mut rng = SeededRng::new(2);
    let mut worst_sum: f64 = 0.0;
    for _ in 0..100 {
        let sigma: f64 = rng.gen_range(0.1..=10.0);
        let k = make_gaussian_kernel(sigma, KernelPolicy::ThreeSigma.size_for(sigma)).map_err(|e| e.to_string())?;
        let n = k.size();
        let total: f64 = k.weights().iter().sum();
        worst_sum = worst_sum.max((total - 1.0).abs());
        ensure!((total - 1.0).abs() < 1e-9, "σ={sigma}: sum {total}");
        let center = k.weight(n / 2, n / 2);
        for r in 0..n {
            for c in 0..n {
                let v = k.weight(r, c);
                for u in [k.weight(n - 1 - r, c), k.weight(r, n - 1 - c), k.weight(c, r), k.weight(n - 1 - c, n - 1 - r)] {
                    ensure!((u - v).abs() <= 1e-15, "σ={sigma}: asymmetric at ({r},{c})");
                }
                ensure!(v <= center, "σ={sigma}: ({r},{c}) exceeds centre");
            }
        }
    }
    Ok(format!("100 kernels, worst |sum - 1| {worst_sum:.1e}"))
}

fn criterion_3() -> Outcome {
    let ops = [
        ("layer_norm", layer_norm_error(0)),
        ("simple_gate", simple_gate_error(0)),
        ("sca", sca_error(0)),
        ("baseline block", baseline_block_error(0)),
    ];
    for (name, e) in ops {
        ensure!(e < 1e-4, "{name}: relative error {e:e}");
    }
    let net = network_error(&tiny_jnet(), 0, 6, 8, 12);
    ensure!(net < 1e-3, "tiny J-Net: relative error {net:e}");
    let worst_op = ops.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(format!("ops ≤ {worst_op:.1e}, tiny J-Net {net:.1e}"))
}

fn criterion_4() -> Outcome {
    let mut rng = SeededRng::new(4);
    for variant in [Variant::FlatUnet, Variant::UnetPs, Variant::Jnet] {
        let spec = NetworkSpec { variant, width: 8, encoder_levels: 3, blocks_per_stage: 1, ..NetworkSpec::default() };
        let net = Network::layout(&spec).map_err(|e| e.to_string())?;
        let params: ParamStore<f32> = net.init_params(&mut rng);
        for (h, w) in [(48, 48), (40, 48), (96, 64)] {
            let x = FeatureMap::<f32>::from_fn(1, 3, h, w, |_, _, _, _| rng.gen());
            let y = net.forward(&params, &x).map_err(|e| e.to_string())?;
            ensure!(y.shape() == (1, 3, 2 * h, 2 * w), "{}: {h}x{w} -> {:?}", variant.as_str(), y.shape());
        }
    }
    for r in [2, 3] {
        let x = FeatureMap::<f32>::from_fn(2, 4 * r * r, 5, 3, |_, _, _, _| rng.gen());
        let back = pixel_unshuffle(&pixel_shuffle(&x, r).map_err(|e| e.to_string())?, r).map_err(|e| e.to_string())?;
        ensure!(back == x, "pixel shuffle round trip failed for r={r}");
        let y = FeatureMap::<f32>::from_fn(2, 3, 4 * r, 2 * r, |_, _, _, _| rng.gen());
        let back = pixel_shuffle(&pixel_unshuffle(&y, r).map_err(|e| e.to_string())?, r).map_err(|e| e.to_string())?;
        ensure!(back == y, "pixel unshuffle round trip failed for r={r}");
    }
    Ok("3 variants x 3 sizes emit 2x dims; shuffle round-trips exactly".into())
}

fn criterion_5() -> Outcome {
    let mut rng = SeededRng::new(5);
    let mut store = ParamStore::<f32>::new();
    let block = BaselineBlock::register(&mut Initializer::zeroed(&mut store), "b", 16, false);
    for p in store.params_mut() {
        if p.name.contains(".ln") || p.name.contains(".sca") {
            p.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
    }
    for _ in 0..20 {
        let x = FeatureMap::<f32>::from_fn(2, 16, 6, 5, |_, _, _, _| rng.gen_range(-2.0..2.0));
        let (y, _) = block.forward(&store, &x).map_err(|e| e.to_string())?;
        ensure!(y.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()), "output differs from input");
    }
    Ok("20 inputs returned bit-exactly".into())
}

fn criterion_6() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_scenes(dir.path(), 1000, 1, 32, 32);
    let corpus = scan_dir(dir.path()).map_err(|e| e.to_string())?;
    let spec = desk_spec(Variant::Jnet);
    // One fixed patch and an essentially fixed noiseless degradation.
    let deg = DegradationConfig { alpha: 1.0, beta: 1.01, noise_max: 0.0, ..DegradationConfig::default() };
    let cfg = TrainConfig { total_iters: 500, patch_size: 32, augment: false, val_interval: 0, ..TrainConfig::desk() };
    let out = Trainer::new(&corpus, &spec, &cfg, &deg).and_then(|mut t| t.run(false, None)).map_err(|e| e.to_string())?;
    let patch = ValidationSet::build(&corpus, &deg, 0, 3, None, 1).map_err(|e| e.to_string())?;
    let net = Network::layout(&spec).map_err(|e| e.to_string())?;
    let sr = super_resolve(&net, &out.state.params, &patch.pairs[0].lr).map_err(|e| e.to_string())?;
    let p = psnr(&sr, &patch.pairs[0].hr, 1.0).map_err(|e| e.to_string())?;
    ensure!(p > 40.0, "training-patch PSNR {p:.2} dB");
    Ok(format!("training-patch PSNR {p:.2} dB after 500 iterations"))
}

fn bicubic_psnr(val: &ValidationSet) -> f64 {
    let total: f64 = val
        .pairs
        .iter()
        .map(|p| psnr(&bicubic_resize(&p.lr, 2, Direction::Up).unwrap(), &p.hr, 1.0).unwrap())
        .sum();
    total / val.len() as f64
}

fn train_and_validate(corpus: &Corpus, val: &ValidationSet, spec: &NetworkSpec, cfg: &TrainConfig, deg: &DegradationConfig) -> Result<f64, String> {
    let out = Trainer::new(corpus, spec, cfg, deg)
        .and_then(|t| t.with_validation(val).run(false, None))
        .map_err(|e| e.to_string())?;
    out.log.last().and_then(|r| r.val_psnr).ok_or_else(|| "no final validation".to_string())
}

struct SplitDirs {
    _tmp: tempfile::TempDir,
    train: Corpus,
    val: Corpus,
}

fn scene_splits(train: usize, val: usize, side: usize) -> Result<SplitDirs, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_scenes(&tmp.path().join("train"), 0, train, side, side);
    write_scenes(&tmp.path().join("val"), 500, val, side, side);
    let mut train = scan_dir(&tmp.path().join("train")).map_err(|e| e.to_string())?;
    train.preload().map_err(|e| e.to_string())?;
    let val = scan_dir(&tmp.path().join("val")).map_err(|e| e.to_string())?;
    Ok(SplitDirs { _tmp: tmp, train, val })
}

fn criterion_7() -> Outcome {
    let data = scene_splits(32, 8, 64)?;
    let deg = DegradationConfig::default();
    let val = ValidationSet::build(&data.val, &deg, 77, 3, None, 1).map_err(|e| e.to_string())?;
    let bicubic = bicubic_psnr(&val);
    let (mut jnet, mut flat) = (Vec::new(), Vec::new());
    for seed in [0, 1, 2] {
        let cfg = TrainConfig { seed, val_interval: 0, ..TrainConfig::desk() };
        jnet.push(train_and_validate(&data.train, &val, &desk_spec(Variant::Jnet), &cfg, &deg)?);
        flat.push(train_and_validate(&data.train, &val, &desk_spec(Variant::FlatUnet), &cfg, &deg)?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mj, mf) = (mean(&jnet), mean(&flat));
    let detail = format!("J-Net {mj:.3} dB, flat U-Net {mf:.3} dB, bicubic {bicubic:.3} dB (seeds: {jnet:.3?} vs {flat:.3?})");
    ensure!(mj >= mf, "ordering violated: {detail}");
    ensure!(mj - bicubic >= 1.0, "J-Net gains only {:.3} dB over bicubic: {detail}", mj - bicubic);
    Ok(detail)
}

fn criterion_8() -> Outcome {
    let data = scene_splits(32, 8, 64)?;
    let cfg = TrainConfig { total_iters: 2_000, seed: 8, val_interval: 0, ..TrainConfig::desk() };
    let mut scores = Vec::new();
    for (alpha, beta) in [(0.1, 1.0), (0.0, 10.0)] {
        // Each model is scored on validation data degraded with its own range.
        let deg = DegradationConfig { alpha, beta, ..DegradationConfig::default() };
        let val = ValidationSet::build(&data.val, &deg, 8, 3, None, 1).map_err(|e| e.to_string())?;
        scores.push(train_and_validate(&data.train, &val, &desk_spec(Variant::Jnet), &cfg, &deg)?);
    }
    let detail = format!("(0.1, 1): {:.3} dB, (0, 10): {:.3} dB", scores[0], scores[1]);
    ensure!(scores[0] >= scores[1], "ordering violated: {detail}");
    Ok(detail)
}

fn criterion_9() -> Outcome {
    let mut rng = SeededRng::new(9);
    let hr = ImageTensor::from_fn(3, 24, 20, |_, _, _| rng.gen_range(0.1..0.9));
    let shifted = ImageTensor::from_vec(3, 24, 20, hr.data().iter().map(|&v| (v as f64 + 1.0 / 255.0) as f32).collect()).unwrap();
    let a = psnr(&shifted, &hr, 1.0).map_err(|e| e.to_string())?;
    // 20·log10(255) for a one-level difference everywhere.
    let expect = 20.0 * 255f64.log10();
    ensure!((a - 48.131).abs() < 1e-3 && (a - expect).abs() < 1e-3, "Δ=1/255 gives {a}");
    let b = psnr(&ImageTensor::filled(3, 8, 8, 1.0), &ImageTensor::zeros(3, 8, 8), 1.0).map_err(|e| e.to_string())?;
    ensure!(b.abs() < 1e-3, "Δ=peak gives {b}");
    Ok(format!("Δ=1/255 → {a:.4} dB, Δ=peak → {b:.4} dB"))
}

fn criterion_10() -> Outcome {
    let (h, w) = (32, 48);
    let truth = ImageTensor::from_fn(1, h, w, |_, _, x| if (20..28).contains(&x) { 1.0 } else { 0.1 });
    let psf = make_gaussian_kernel(2.0, KernelPolicy::ThreeSigma.size_for(2.0)).map_err(|e| e.to_string())?;
    let observed = blur(&truth, &psf).map_err(|e| e.to_string())?;
    let mse = |a: &ImageTensor| a.data().iter().zip(truth.data()).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.data().len() as f64;
    let mut last = None;
    for (i, u) in LucyRichardson::new(&observed, &psf, 30).map_err(|e| e.to_string())?.enumerate() {
        ensure!(u.data().iter().all(|&v| v >= 0.0), "negative value at iterate {}", i + 1);
        last = Some(u);
    }
    let restored = last.ok_or("no iterates")?;
    let (before, after) = (mse(&observed), mse(&restored));
    ensure!(after < before, "MSE {after:e} not below {before:e}");

    let delta = make_gaussian_kernel(0.1, 3).map_err(|e| e.to_string())?;
    let img = ImageTensor::from_fn(1, 16, 16, |_, y, x| 0.2 + 0.6 * (((x + 2 * y) % 7) as f32 / 6.0));
    let out = lucy_richardson(&img, &delta, 10).map_err(|e| e.to_string())?;
    let diff = out.max_abs_diff(&img);
    ensure!(diff < 1e-3, "near-delta PSF changed the image by {diff}");
    Ok(format!("bar MSE {before:.2e} → {after:.2e}; near-delta diff {diff:.1e}"))
}

fn run_desk(data: &Path, corpus: &Corpus, val: &ValidationSet, out: &str, iters: u64, stop: Option<u64>, resume: bool) -> Result<(), String> {
    let deg = DegradationConfig::default();
    let cfg = TrainConfig { total_iters: iters, seed: 11, log_interval: 5, val_interval: 10, checkpoint_interval: 10, ..TrainConfig::desk() };
    Trainer::new(corpus, &desk_spec(Variant::Jnet), &cfg, &deg)
        .and_then(|t| t.with_validation(val).with_output_dir(data.join(out)).run(resume, stop))
        .map(|_| ())
        .map_err(|e| e.to_string())
}

fn criterion_11() -> Outcome {
    let data = scene_splits(4, 2, 48)?;
    let root = data._tmp.path();
    let val = ValidationSet::build(&data.val, &DegradationConfig::default(), 11, 3, None, 1).map_err(|e| e.to_string())?;
    let read = |dir: &str, file: &str| std::fs::read(root.join(dir).join(file)).map_err(|e| e.to_string());

    run_desk(root, &data.train, &val, "a", 40, None, false)?;
    run_desk(root, &data.train, &val, "b", 40, None, false)?;
    ensure!(read("a", METRICS_FILE)? == read("b", METRICS_FILE)?, "metric logs differ between identical runs");
    let records = read_log(&root.join("a").join(METRICS_FILE)).map_err(|e| e.to_string())?;
    ensure!(records.len() == 8 && records.iter().filter(|r| r.val_psnr.is_some()).count() == 4, "unexpected log {records:?}");

    let bytes = read("a", CHECKPOINT_FILE)?;
    let state = decode_checkpoint(&bytes).map_err(|e| e.to_string())?;
    ensure!(encode_checkpoint(&state).map_err(|e| e.to_string())? == bytes, "checkpoint does not round-trip");

    run_desk(root, &data.train, &val, "c", 40, Some(25), false)?;
    run_desk(root, &data.train, &val, "c", 40, None, true)?;
    ensure!(read("a", METRICS_FILE)? == read("c", METRICS_FILE)?, "resumed log differs");
    ensure!(read("a", CHECKPOINT_FILE)? == read("c", CHECKPOINT_FILE)?, "resumed final state differs");
    Ok("identical logs; checkpoint round-trips; kill at 25 + resume from 20 matches".into())
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 11] = [
        (1, "degradation oracle", criterion_1),
        (2, "kernel properties", criterion_2),
        (3, "gradient correctness", criterion_3),
        (4, "shape contract", criterion_4),
        (5, "identity residual", criterion_5),
        (6, "overfit smoke test", criterion_6),
        (7, "trend: J-Net vs flat U-Net vs bicubic", criterion_7),
        (8, "trend: sigma range", criterion_8),
        (9, "PSNR closed form", criterion_9),
        (10, "Lucy-Richardson", criterion_10),
        (11, "reproducibility", criterion_11),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  criterion {id:>2} {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  criterion {id:>2} {name} ({secs:.1}s): {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
