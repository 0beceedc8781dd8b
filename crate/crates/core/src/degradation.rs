//! Synthetic low-resolution images: Gaussian blur, downsampling by the
//! scale factor, then additive Gaussian noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{bicubic_resize, Direction};
use crate::image::{reflect_index, ImageTensor};
use crate::rng::SeededRng;

/// Smallest σ used to build a kernel; a draw of exactly zero collapses to this.
pub const MIN_KERNEL_SIGMA: f64 = 1e-3;

/// Isotropic, unit-sum Gaussian point spread function.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    sigma: f64,
    size: usize,
    /// Normalized 1-D profile; `weights` is its outer product up to rounding.
    profile: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussianKernel {
    pub fn new(sigma: f64, size: usize) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::invalid(format!("kernel sigma must be positive, got {sigma}")));
        }
        if size < 3 || size % 2 == 0 {
            return Err(Error::invalid(format!("kernel size must be odd and >= 3, got {size}")));
        }
        let half = (size / 2) as f64;
        let denom = 2.0 * sigma * sigma;
        let raw: Vec<f64> = (0..size)
            .map(|i| {
                let d = i as f64 - half;
                (-(d * d) / denom).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        let profile = raw.iter().map(|v| v / total).collect();

        let mut weights = Vec::with_capacity(size * size);
        for i in 0..size {
            for j in 0..size {
                let (y, x) = (i as f64 - half, j as f64 - half);
                weights.push((-(x * x + y * y) / denom).exp());
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self {
            sigma,
            size,
            profile,
            weights,
        })
    }

    /// Kernel sized by `policy`.
    pub fn with_policy(sigma: f64, policy: KernelPolicy) -> Result<Self> {
        Self::new(sigma, policy.size_for(sigma))
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn profile(&self) -> &[f64] {
        &self.profile
    }

    #[inline]
    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }
}

/// Shorthand for [`GaussianKernel::new`].
pub fn make_gaussian_kernel(sigma: f64, size: usize) -> Result<GaussianKernel> {
    GaussianKernel::new(sigma, size)
}

/// Rule mapping σ to an odd kernel extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum KernelPolicy {
    /// `2·ceil(3σ) + 1`, at least 3.
    ThreeSigma,
    Fixed { size: usize },
}

impl Default for KernelPolicy {
    fn default() -> Self {
        KernelPolicy::ThreeSigma
    }
}

impl KernelPolicy {
    pub fn size_for(self, sigma: f64) -> usize {
        match self {
            KernelPolicy::ThreeSigma => {
                let size = 2 * (3.0 * sigma).ceil().max(1.0) as usize + 1;
                size.max(3)
            }
            KernelPolicy::Fixed { size } => size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DownsampleMethod {
    /// Keep the top-left sample of every `scale×scale` cell.
    Decimate,
    Bicubic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationConfig {
    pub scale: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Noise std is drawn uniformly from `[0, noise_max]`.
    pub noise_max: f64,
    pub kernel_policy: KernelPolicy,
    pub downsample: DownsampleMethod,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            scale: 2,
            alpha: 0.1,
            beta: 3.0,
            noise_max: 10.0 / 255.0,
            kernel_policy: KernelPolicy::ThreeSigma,
            downsample: DownsampleMethod::Decimate,
        }
    }
}

impl DegradationConfig {
    pub fn validate(&self) -> Result<()> {
        if ![1, 2, 4].contains(&self.scale) {
            return Err(Error::invalid(format!("scale must be 1, 2 or 4, got {}", self.scale)));
        }
        if !(self.alpha >= 0.0 && self.alpha < self.beta && self.beta.is_finite()) {
            return Err(Error::invalid(format!(
                "need 0 <= alpha < beta, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        if !(self.noise_max >= 0.0 && self.noise_max.is_finite()) {
            return Err(Error::invalid("noise_max must be non-negative"));
        }
        if let KernelPolicy::Fixed { size } = self.kernel_policy {
            if size < 3 || size % 2 == 0 {
                return Err(Error::invalid(format!("fixed kernel size must be odd >= 3, got {size}")));
            }
        }
        Ok(())
    }

    /// Kernel extent actually used for `sigma` on an image whose shorter
    /// side is `min_side`: the policy size, shrunk to the largest odd size
    /// that fits.
    pub fn kernel_size(&self, sigma: f64, min_side: usize) -> usize {
        let fit = if min_side % 2 == 1 { min_side } else { min_side - 1 };
        self.kernel_policy.size_for(sigma).min(fit.max(3))
    }
}

/// Everything drawn while degrading one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationMeta {
    pub sigma: f64,
    pub kernel_size: usize,
    pub noise_std: f64,
    pub noise_seed: u64,
    pub scale: usize,
}

impl DegradationMeta {
    /// `key=value` lines, one per field.
    pub fn to_sidecar(&self, seed: u64) -> String {
        format!(
            "sigma={}\nkernel_size={}\nnoise_std={}\nnoise_seed={}\nscale={}\nseed={}\n",
            self.sigma, self.kernel_size, self.noise_std, self.noise_seed, self.scale, seed
        )
    }
}

pub fn sample_sigma(alpha: f64, beta: f64, rng: &mut SeededRng) -> Result<f64> {
    if !(alpha >= 0.0 && alpha < beta) {
        return Err(Error::invalid(format!("need 0 <= alpha < beta, got {alpha}, {beta}")));
    }
    let u: f64 = rng.gen();
    Ok((alpha + (beta - alpha) * u).clamp(alpha, beta))
}

/// Separable correlation of one `h×w` plane with reflect borders.
pub(crate) fn blur_plane(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let half = (taps.len() / 2) as isize;
    let mut rows = vec![0f64; h * w];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..w {
            rows[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, &t)| t * line[reflect_index(x as isize + k as isize - half, w)])
                .sum();
        }
    }
    let mut out = vec![0f64; h * w];
    for y in 0..h {
        for (k, &t) in taps.iter().enumerate() {
            let yi = reflect_index(y as isize + k as isize - half, h);
            let (dst, row) = (&mut out[y * w..(y + 1) * w], &rows[yi * w..(yi + 1) * w]);
            for (d, &v) in dst.iter_mut().zip(row) {
                *d += t * v;
            }
        }
    }
    out
}

/// Per-channel correlation with reflect-padded borders.
pub fn blur(image: &ImageTensor, kernel: &GaussianKernel) -> Result<ImageTensor> {
    let (c, h, w) = image.shape();
    if kernel.size() > h.min(w) {
        return Err(Error::invalid(format!(
            "kernel of size {} exceeds {h}x{w} image",
            kernel.size()
        )));
    }
    let mut out = ImageTensor::zeros(c, h, w);
    for ch in 0..c {
        let src: Vec<f64> = image.plane(ch).iter().map(|&v| v as f64).collect();
        let blurred = blur_plane(&src, h, w, kernel.profile());
        for (d, v) in out.plane_mut(ch).iter_mut().zip(blurred) {
            *d = v as f32;
        }
    }
    Ok(out)
}

/// Direct decimation by `scale`.
pub fn downsample(image: &ImageTensor, scale: usize) -> Result<ImageTensor> {
    let (c, h, w) = image.shape();
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(Error::invalid(format!("{h}x{w} image is not divisible by scale {scale}")));
    }
    Ok(ImageTensor::from_fn(c, h / scale, w / scale, |ch, y, x| {
        image.get(ch, y * scale, x * scale)
    }))
}

/// `clamp(image + n, 0, 1)` with i.i.d. `n ~ N(0, noise_std²)`.
pub fn add_noise(image: &ImageTensor, noise_std: f64, rng: &mut SeededRng) -> Result<ImageTensor> {
    if !(noise_std >= 0.0) {
        return Err(Error::invalid(format!("noise std must be >= 0, got {noise_std}")));
    }
    if noise_std == 0.0 {
        return Ok(image.clone());
    }
    let normal = Normal::new(0.0, noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(image.map(|v| (v as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32))
}

/// Draws the degradation parameters for one image.
pub fn sample_meta(
    cfg: &DegradationConfig,
    hr_min_side: usize,
    rng: &mut SeededRng,
) -> Result<DegradationMeta> {
    cfg.validate()?;
    let sigma = sample_sigma(cfg.alpha, cfg.beta, rng)?;
    let noise_std = cfg.noise_max * rng.gen::<f64>();
    let noise_seed = rng.gen::<u64>();
    Ok(DegradationMeta {
        sigma,
        kernel_size: cfg.kernel_size(sigma.max(MIN_KERNEL_SIGMA), hr_min_side),
        noise_std,
        noise_seed,
        scale: cfg.scale,
    })
}

/// Replays a degradation from its recorded parameters.
pub fn apply_degradation(
    hr: &ImageTensor,
    meta: &DegradationMeta,
    method: DownsampleMethod,
) -> Result<ImageTensor> {
    let kernel = GaussianKernel::new(meta.sigma.max(MIN_KERNEL_SIGMA), meta.kernel_size)?;
    let blurred = blur(hr, &kernel)?;
    let small = match method {
        DownsampleMethod::Decimate => downsample(&blurred, meta.scale)?,
        DownsampleMethod::Bicubic => {
            let (_, h, w) = blurred.shape();
            if h % meta.scale != 0 || w % meta.scale != 0 {
                return Err(Error::invalid(format!(
                    "{h}x{w} image is not divisible by scale {}",
                    meta.scale
                )));
            }
            bicubic_resize(&blurred, meta.scale, Direction::Down)?
        }
    };
    add_noise(&small, meta.noise_std, &mut SeededRng::new(meta.noise_seed))
}

/// Blur, downsample, add noise. Returns the LR image and the sampled values.
pub fn degrade(
    hr: &ImageTensor,
    cfg: &DegradationConfig,
    rng: &mut SeededRng,
) -> Result<(ImageTensor, DegradationMeta)> {
    let (_, h, w) = hr.shape();
    if h % cfg.scale != 0 || w % cfg.scale != 0 {
        return Err(Error::invalid(format!(
            "{h}x{w} image is not divisible by scale {}",
            cfg.scale
        )));
    }
    if h.min(w) < 3 {
        return Err(Error::invalid("image too small to blur"));
    }
    let meta = sample_meta(cfg, h.min(w), rng)?;
    let lr = apply_degradation(hr, &meta, cfg.downsample)?;
    Ok((lr, meta))
}
