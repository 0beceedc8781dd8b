//! PSNR, bicubic resampling, Lucy–Richardson deconvolution and side-by-side
//! method comparison.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::degradation::{blur_plane, GaussianKernel, KernelPolicy};
use crate::error::{Error, Result};
use crate::image::{reflect_index, ImageTensor};
use crate::jnet::{super_resolve, Network, NetworkParams};

/// Peak signal-to-noise ratio in dB over all channels jointly.
/// Identical images give `f64::INFINITY`.
pub fn psnr(a: &ImageTensor, b: &ImageTensor, peak: f64) -> Result<f64> {
    psnr_cropped(a, b, peak, 0)
}

/// PSNR ignoring `border` pixels on every side.
pub fn psnr_cropped(a: &ImageTensor, b: &ImageTensor, peak: f64, border: usize) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!("psnr of {:?} vs {:?}", a.shape(), b.shape())));
    }
    if !(peak > 0.0) {
        return Err(Error::invalid("psnr peak must be positive"));
    }
    let (c, h, w) = a.shape();
    if 2 * border >= h.min(w) {
        return Err(Error::invalid(format!("border {border} leaves nothing of a {h}x{w} image")));
    }
    let mut sum = 0f64;
    let mut count = 0usize;
    for ch in 0..c {
        for y in border..h - border {
            for x in border..w - border {
                let d = a.get(ch, y, x) as f64 - b.get(ch, y, x) as f64;
                sum += d * d;
                count += 1;
            }
        }
    }
    let mse = sum / count as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Up,
    Down,
}

const CUBIC_A: f64 = -0.5;

fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        (CUBIC_A + 2.0) * x * x * x - (CUBIC_A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        CUBIC_A * (x * x * x - 5.0 * x * x + 8.0 * x - 4.0)
    } else {
        0.0
    }
}

/// Sparse resampling matrix: for each output sample, (source index, weight) pairs.
fn resample_taps(n_in: usize, scale: usize, dir: Direction) -> Vec<Vec<(usize, f64)>> {
    let s = scale as f64;
    match dir {
        Direction::Up => (0..n_in * scale)
            .map(|o| {
                // output sample o sits at input coordinate o/s, so every
                // s-th output lands exactly on an input sample
                let pos = o as f64 / s;
                let base = pos.floor() as isize;
                (base - 1..=base + 2)
                    .map(|i| (reflect_index(i, n_in), cubic(pos - i as f64)))
                    .filter(|&(_, w)| w != 0.0)
                    .collect()
            })
            .collect(),
        Direction::Down => (0..n_in / scale)
            .map(|o| {
                let center = (o * scale) as isize;
                let reach = 2 * scale as isize;
                let taps: Vec<(usize, f64)> = (center - reach + 1..center + reach)
                    .map(|i| (reflect_index(i, n_in), cubic((i - center) as f64 / s)))
                    .collect();
                let total: f64 = taps.iter().map(|t| t.1).sum();
                taps.into_iter().map(|(i, w)| (i, w / total)).collect()
            })
            .collect(),
    }
}

/// Cubic-convolution resize (`a = −0.5`) with reflect borders. Output
/// sample `i` is aligned with input sample `i/scale` (up) or `i·scale`
/// (down), the same grid as direct decimation. Downscaling widens the
/// kernel by `scale` to low-pass before subsampling.
pub fn bicubic_resize(image: &ImageTensor, scale: usize, direction: Direction) -> Result<ImageTensor> {
    if scale == 0 {
        return Err(Error::invalid("scale must be >= 1"));
    }
    if scale == 1 {
        return Ok(image.clone());
    }
    let (c, h, w) = image.shape();
    if direction == Direction::Down && (h % scale != 0 || w % scale != 0) {
        return Err(Error::invalid(format!("{h}x{w} image is not divisible by {scale}")));
    }
    let xt = resample_taps(w, scale, direction);
    let yt = resample_taps(h, scale, direction);
    let (ho, wo) = (yt.len(), xt.len());
    let mut out = ImageTensor::zeros(c, ho, wo);
    let mut rows = vec![0f64; h * wo];
    for ch in 0..c {
        let src = image.plane(ch);
        for y in 0..h {
            let line = &src[y * w..(y + 1) * w];
            for (x, taps) in xt.iter().enumerate() {
                rows[y * wo + x] = taps.iter().map(|&(i, wt)| wt * line[i] as f64).sum();
            }
        }
        let dst = out.plane_mut(ch);
        for (y, taps) in yt.iter().enumerate() {
            for x in 0..wo {
                let v: f64 = taps.iter().map(|&(i, wt)| wt * rows[i * wo + x]).sum();
                dst[y * wo + x] = v as f32;
            }
        }
    }
    Ok(out)
}

const LR_EPS: f64 = 1e-12;

/// Lucy–Richardson iterates, yielded one per step.
///
/// `u₀` is the observation; each step applies
/// `u ← u · (psf* ⊛ (observed / (psf ⊛ u + ε)))` channel by channel.
pub struct LucyRichardson {
    observed: Vec<Vec<f64>>,
    estimate: Vec<Vec<f64>>,
    taps: Vec<f64>,
    shape: (usize, usize, usize),
    remaining: usize,
}

impl LucyRichardson {
    pub fn new(observed: &ImageTensor, psf: &GaussianKernel, iters: usize) -> Result<Self> {
        if iters == 0 {
            return Err(Error::invalid("lucy-richardson needs at least one iteration"));
        }
        if observed.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::invalid("lucy-richardson input must be finite and non-negative"));
        }
        let (c, h, w) = observed.shape();
        if psf.size() > h.min(w) {
            return Err(Error::invalid(format!("psf of size {} exceeds {h}x{w} image", psf.size())));
        }
        let planes: Vec<Vec<f64>> = (0..c).map(|ch| observed.plane(ch).iter().map(|&v| v as f64).collect()).collect();
        Ok(Self {
            estimate: planes.clone(),
            observed: planes,
            taps: psf.profile().to_vec(),
            shape: (c, h, w),
            remaining: iters,
        })
    }

    fn current(&self) -> ImageTensor {
        let (c, h, w) = self.shape;
        let data = self.estimate.iter().flatten().map(|&v| v as f32).collect();
        ImageTensor::from_vec(c, h, w, data).expect("shape")
    }
}

impl Iterator for LucyRichardson {
    type Item = ImageTensor;

    fn next(&mut self) -> Option<ImageTensor> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let (_, h, w) = self.shape;
        for (u, obs) in self.estimate.iter_mut().zip(&self.observed) {
            let predicted = blur_plane(u, h, w, &self.taps);
            let ratio: Vec<f64> = obs.iter().zip(&predicted).map(|(&o, &p)| o / (p + LR_EPS)).collect();
            // the Gaussian is symmetric, so its adjoint is itself
            let correction = blur_plane(&ratio, h, w, &self.taps);
            u.iter_mut().zip(correction).for_each(|(v, k)| *v *= k);
        }
        Some(self.current())
    }
}

/// Runs `iters` Lucy–Richardson steps and returns the final estimate.
pub fn lucy_richardson(observed: &ImageTensor, psf: &GaussianKernel, iters: usize) -> Result<ImageTensor> {
    Ok(LucyRichardson::new(observed, psf, iters)?.last().expect("iters >= 1"))
}

/// An image with the file name it is matched by.
#[derive(Debug, Clone)]
pub struct NamedImage {
    pub name: String,
    pub image: ImageTensor,
}

/// A way of turning an LR image into an SR image.
#[derive(Debug, Clone)]
pub enum Method {
    Bicubic,
    /// Deconvolve in LR space, then bicubic upscale.
    LucyRichardson { sigma: f64, iters: usize },
    Model { label: String, network: Network, params: NetworkParams<f32> },
    /// Precomputed SR images in `dir`, matched by file name.
    External { label: String, dir: PathBuf },
    /// Returns the ground truth; for sanity checks.
    Passthrough,
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Bicubic => "bicubic".into(),
            Method::LucyRichardson { .. } => "lucy-richardson".into(),
            Method::Model { label, .. } | Method::External { label, .. } => label.clone(),
            Method::Passthrough => "passthrough".into(),
        }
    }

    pub fn detail(&self) -> String {
        match self {
            Method::Bicubic => "cubic convolution a=-0.5".into(),
            Method::LucyRichardson { sigma, iters } => format!("psf sigma={sigma} iters={iters}, then bicubic"),
            Method::Model { network, params, .. } => {
                let spec = toml::to_string(network.spec()).unwrap_or_default();
                format!("spec sha256={} params={}", short_hash(spec.as_bytes()), params.count())
            }
            Method::External { dir, .. } => format!("dir={}", dir.display()),
            Method::Passthrough => "ground truth".into(),
        }
    }

    fn apply(&self, name: &str, lr: &ImageTensor, hr: &ImageTensor, scale: usize) -> Result<ImageTensor> {
        let sr = match self {
            Method::Bicubic => bicubic_resize(lr, scale, Direction::Up)?,
            Method::LucyRichardson { sigma, iters } => {
                let side = lr.height().min(lr.width());
                let fit = if side % 2 == 1 { side } else { side - 1 };
                let psf = GaussianKernel::new(*sigma, KernelPolicy::ThreeSigma.size_for(*sigma).min(fit.max(3)))?;
                bicubic_resize(&lucy_richardson(lr, &psf, *iters)?, scale, Direction::Up)?
            }
            Method::Model { network, params, .. } => {
                if network.spec().scale != scale {
                    return Err(Error::invalid(format!(
                        "model scale {} does not match data scale {scale}",
                        network.spec().scale
                    )));
                }
                super_resolve(network, params, lr)?
            }
            Method::External { dir, .. } => {
                let path = dir.join(name);
                if !path.is_file() {
                    return Err(Error::Missing(path.display().to_string()));
                }
                ImageTensor::load(&path)?
            }
            Method::Passthrough => hr.clone(),
        };
        let sr = sr.with_channels(hr.channels())?;
        if sr.shape() != hr.shape() {
            return Err(Error::invalid(format!(
                "{}: output {:?} does not match ground truth {:?} for {name}",
                self.label(),
                sr.shape(),
                hr.shape()
            )));
        }
        Ok(sr.clamp01())
    }
}

/// Identifies the evaluation inputs; equal for every method run on them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub inputs_sha256: String,
    pub degradation: Option<String>,
    pub seed: Option<u64>,
    pub crop_border: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub name: String,
    #[serde(with = "db")]
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub method_detail: String,
    pub per_image: Vec<ImageScore>,
    #[serde(with = "db")]
    pub mean_psnr: f64,
    pub fingerprint: Fingerprint,
}

/// Decibel values with `"inf"` standing in for an exact match.
mod db {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Raw::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Raw::Text(t) => Err(D::Error::custom(format!("bad dB value `{t}`"))),
        }
    }
}

pub fn format_db(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

impl EvalReport {
    pub fn new(method: String, method_detail: String, per_image: Vec<ImageScore>, fingerprint: Fingerprint) -> Self {
        let mean_psnr = if per_image.is_empty() {
            f64::NAN
        } else {
            per_image.iter().map(|s| s.psnr).sum::<f64>() / per_image.len() as f64
        };
        Self { method, method_detail, per_image, mean_psnr, fingerprint }
    }
}

/// Options shared by every method in a comparison.
#[derive(Debug, Clone, Default)]
pub struct CompareOptions {
    pub crop_border: usize,
    pub degradation: Option<String>,
    pub seed: Option<u64>,
}

fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().take(8).fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn inputs_hash(lr: &[NamedImage], hr: &[NamedImage]) -> String {
    let mut hasher = Sha256::new();
    for set in [lr, hr] {
        for item in set {
            hasher.update(item.name.as_bytes());
            let (c, h, w) = item.image.shape();
            for d in [c, h, w] {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in item.image.data() {
                hasher.update(v.to_le_bytes());
            }
        }
    }
    hasher.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Evaluates every method on the same aligned LR/HR pairs.
pub fn compare_methods(lr_set: &[NamedImage], hr_set: &[NamedImage], methods: &[Method], opts: &CompareOptions) -> Result<Vec<EvalReport>> {
    if lr_set.is_empty() || lr_set.len() != hr_set.len() {
        return Err(Error::invalid(format!("{} LR images vs {} HR images", lr_set.len(), hr_set.len())));
    }
    let mut scale = None;
    for (lr, hr) in lr_set.iter().zip(hr_set) {
        if lr.name != hr.name {
            return Err(Error::invalid(format!("LR `{}` paired with HR `{}`", lr.name, hr.name)));
        }
        let s = hr.image.height() / lr.image.height();
        if s == 0 || hr.image.height() != s * lr.image.height() || hr.image.width() != s * lr.image.width() || scale.is_some_and(|t| t != s) {
            return Err(Error::invalid(format!("`{}`: HR dims are not a consistent multiple of LR dims", lr.name)));
        }
        scale = Some(s);
    }
    let scale = scale.expect("non-empty");
    let fingerprint = Fingerprint {
        inputs_sha256: inputs_hash(lr_set, hr_set),
        degradation: opts.degradation.clone(),
        seed: opts.seed,
        crop_border: opts.crop_border,
    };
    methods
        .iter()
        .map(|m| {
            let scores = lr_set
                .iter()
                .zip(hr_set)
                .map(|(lr, hr)| {
                    let sr = m.apply(&lr.name, &lr.image, &hr.image, scale)?;
                    Ok(ImageScore { name: lr.name.clone(), psnr: psnr_cropped(&sr, &hr.image, 1.0, opts.crop_border)? })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(EvalReport::new(m.label(), m.detail(), scores, fingerprint.clone()))
        })
        .collect()
}

/// One row per method: name, mean PSNR, image count.
pub fn summary_table(reports: &[EvalReport]) -> String {
    let width = reports.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:<width$}  {:>10}  {:>6}\n", "method", "PSNR (dB)", "images");
    for r in reports {
        let _ = writeln!(out, "{:<width$}  {:>10}  {:>6}", r.method, format_db(r.mean_psnr), r.per_image.len());
    }
    out
}

/// Tab-separated per-image listing for every report.
pub fn tabular(reports: &[EvalReport]) -> String {
    let mut out = String::from("method\timage\tpsnr_db\n");
    for r in reports {
        for s in &r.per_image {
            let _ = writeln!(out, "{}\t{}\t{}", r.method, s.name, format_db(s.psnr));
        }
        let _ = writeln!(out, "{}\tMEAN\t{}", r.method, format_db(r.mean_psnr));
    }
    out
}

/// Writes `report.tsv` and `report.json` into `dir`.
pub fn write_reports(dir: &Path, reports: &[EvalReport]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tsv = dir.join("report.tsv");
    std::fs::write(&tsv, tabular(reports)).map_err(|e| Error::io(&tsv, e))?;
    let json = dir.join("report.json");
    let text = serde_json::to_string_pretty(reports).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    Ok(())
}

pub fn read_reports(path: &Path) -> Result<Vec<EvalReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
