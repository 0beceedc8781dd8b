use super::params::{pair_mut, Grads, Init, Initializer, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{matmul, FeatureMap, Mat, Scalar};

/// Dense convolution geometry. Weights are stored `[cout][kernel][kernel][cin]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn pointwise(cin: usize, cout: usize) -> Self {
        Self { cin, cout, kernel: 1, stride: 1, pad: 0 }
    }

    /// Size-preserving `k×k` convolution (`k` odd).
    pub fn same(cin: usize, cout: usize, kernel: usize) -> Self {
        Self { cin, cout, kernel, stride: 1, pad: kernel / 2 }
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.kernel * self.kernel * self.cin
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.cout, self.kernel, self.kernel, self.cin]
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.cin
    }

    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.pad, w + 2 * self.pad);
        if self.stride == 0 || hp < self.kernel || wp < self.kernel {
            return Err(Error::invalid(format!("{h}x{w} input too small for {self:?}")));
        }
        Ok(((hp - self.kernel) / self.stride + 1, (wp - self.kernel) / self.stride + 1))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn check(&self, x: &FeatureMap<impl Scalar>, w_len: usize, b_len: Option<usize>) -> Result<()> {
        if x.channels() != self.cin {
            return Err(Error::shape(format!(
                "convolution expects {} input channels, got {}",
                self.cin,
                x.channels()
            )));
        }
        if w_len != self.weight_len() {
            return Err(Error::shape(format!(
                "convolution weight has {w_len} values, expected {}",
                self.weight_len()
            )));
        }
        if let Some(b) = b_len {
            if b != self.cout {
                return Err(Error::shape(format!("bias has {b} values, expected {}", self.cout)));
            }
        }
        Ok(())
    }
}

/// Gathers every receptive field into one row (`[N·Ho·Wo][k·k·cin]`), zero padded.
fn im2col<T: Scalar>(x: &FeatureMap<T>, g: &ConvGeometry, ho: usize, wo: usize) -> Vec<T> {
    let (n, c, h, w) = x.shape();
    let k = g.kernel;
    let mut col = vec![T::zero(); n * ho * wo * g.patch_len()];
    let src = x.data();
    let mut row = 0;
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let base = row * g.patch_len();
                for ky in 0..k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let s = x.index(b, 0, iy as usize, ix as usize);
                        let d = base + (ky * k + kx) * c;
                        col[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
                row += 1;
            }
        }
    }
    col
}

/// Scatters patch rows back onto the input grid, summing overlaps.
fn col2im<T: Scalar>(col: &[T], g: &ConvGeometry, shape: (usize, usize, usize, usize), ho: usize, wo: usize) -> FeatureMap<T> {
    let (n, c, h, w) = shape;
    let k = g.kernel;
    let mut dx = FeatureMap::zeros(n, c, h, w);
    let mut row = 0;
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let base = row * g.patch_len();
                for ky in 0..k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let d = dx.index(b, 0, iy as usize, ix as usize);
                        let s = base + (ky * k + kx) * c;
                        for (o, &v) in dx.data_mut()[d..d + c].iter_mut().zip(&col[s..s + c]) {
                            *o += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    dx
}

/// Cross-correlation with zero padding.
pub fn conv2d<T: Scalar>(x: &FeatureMap<T>, weight: &[T], bias: Option<&[T]>, g: &ConvGeometry) -> Result<FeatureMap<T>> {
    g.check(x, weight.len(), bias.map(<[T]>::len))?;
    let (n, _, h, w) = x.shape();
    let (ho, wo) = g.output_dims(h, w)?;
    let rows = n * ho * wo;
    let mut out = vec![T::zero(); rows * g.cout];
    let wmat = Mat::row_major(weight, g.cout, g.patch_len()).t();
    if g.is_pointwise() {
        matmul(Mat::row_major(x.data(), rows, g.cin), wmat, T::zero(), &mut out);
    } else {
        let col = im2col(x, g, ho, wo);
        matmul(Mat::row_major(&col, rows, g.patch_len()), wmat, T::zero(), &mut out);
    }
    if let Some(b) = bias {
        for px in out.chunks_exact_mut(g.cout) {
            px.iter_mut().zip(b).for_each(|(o, &bb)| *o += bb);
        }
    }
    FeatureMap::from_nhwc(n, g.cout, ho, wo, out)
}

/// Accumulates `dweight`/`dbias` and returns the input gradient.
pub fn conv2d_backward<T: Scalar>(
    x: &FeatureMap<T>,
    weight: &[T],
    g: &ConvGeometry,
    dy: &FeatureMap<T>,
    dweight: &mut [T],
    dbias: Option<&mut [T]>,
) -> FeatureMap<T> {
    let (n, _, h, w) = x.shape();
    let (ho, wo) = g.output_dims(h, w).expect("validated in forward");
    assert_eq!(dy.shape(), (n, g.cout, ho, wo));
    let rows = n * ho * wo;
    let dymat = Mat::row_major(dy.data(), rows, g.cout);
    if let Some(db) = dbias {
        for px in dy.data().chunks_exact(g.cout) {
            db.iter_mut().zip(px).for_each(|(d, &v)| *d += v);
        }
    }
    let wmat = Mat::row_major(weight, g.cout, g.patch_len());
    if g.is_pointwise() {
        matmul(dymat.t(), Mat::row_major(x.data(), rows, g.cin), T::one(), dweight);
        let mut dx = vec![T::zero(); rows * g.cin];
        matmul(dymat, wmat, T::zero(), &mut dx);
        FeatureMap::from_nhwc(n, g.cin, h, w, dx).expect("shape")
    } else {
        let col = im2col(x, g, ho, wo);
        matmul(dymat.t(), Mat::row_major(&col, rows, g.patch_len()), T::one(), dweight);
        let mut dcol = vec![T::zero(); rows * g.patch_len()];
        matmul(dymat, wmat, T::zero(), &mut dcol);
        col2im(&dcol, g, x.shape(), ho, wo)
    }
}

/// Depthwise 3×3, stride 1, zero padding 1. Weights stored `[C][3][3]`.
pub fn depthwise3x3<T: Scalar>(x: &FeatureMap<T>, weight: &[T], bias: &[T]) -> Result<FeatureMap<T>> {
    let (n, c, h, w) = x.shape();
    if weight.len() != 9 * c || bias.len() != c {
        return Err(Error::shape(format!("depthwise weights do not match {c} channels")));
    }
    // Tap-major copy so the inner loop runs over contiguous channels.
    let taps: Vec<T> = (0..9).flat_map(|t| (0..c).map(move |ch| (t, ch))).map(|(t, ch)| weight[ch * 9 + t]).collect();
    let mut out = FeatureMap::zeros(n, c, h, w);
    let src = x.data();
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let o = out.index(b, 0, y, xx);
                out.data_mut()[o..o + c].copy_from_slice(bias);
                for ky in 0..3 {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = xx as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let s = x.index(b, 0, iy as usize, ix as usize);
                        let tw = &taps[(ky * 3 + kx) * c..(ky * 3 + kx + 1) * c];
                        let dst = &mut out.data_mut()[o..o + c];
                        for ((d, &v), &wt) in dst.iter_mut().zip(&src[s..s + c]).zip(tw) {
                            *d += v * wt;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn depthwise3x3_backward<T: Scalar>(
    x: &FeatureMap<T>,
    weight: &[T],
    dy: &FeatureMap<T>,
    dweight: &mut [T],
    dbias: &mut [T],
) -> FeatureMap<T> {
    let (n, c, h, w) = x.shape();
    assert_eq!(dy.shape(), x.shape());
    let taps: Vec<T> = (0..9).flat_map(|t| (0..c).map(move |ch| (t, ch))).map(|(t, ch)| weight[ch * 9 + t]).collect();
    let mut dtaps = vec![T::zero(); 9 * c];
    let mut dx = FeatureMap::zeros(n, c, h, w);
    let src = x.data();
    let g = dy.data();
    for px in g.chunks_exact(c) {
        dbias.iter_mut().zip(px).for_each(|(d, &v)| *d += v);
    }
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let o = dy.index(b, 0, y, xx);
                let go = &g[o..o + c];
                for ky in 0..3 {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = xx as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let s = x.index(b, 0, iy as usize, ix as usize);
                        let t = ky * 3 + kx;
                        let tw = &taps[t * c..(t + 1) * c];
                        let dtw = &mut dtaps[t * c..(t + 1) * c];
                        for ((dt, &v), &gv) in dtw.iter_mut().zip(&src[s..s + c]).zip(go) {
                            *dt += v * gv;
                        }
                        let dst = &mut dx.data_mut()[s..s + c];
                        for ((d, &gv), &wt) in dst.iter_mut().zip(go).zip(tw) {
                            *d += gv * wt;
                        }
                    }
                }
            }
        }
    }
    for t in 0..9 {
        for ch in 0..c {
            dweight[ch * 9 + t] += dtaps[t * c + ch];
        }
    }
    dx
}

pub fn relu<T: Scalar>(x: &FeatureMap<T>) -> FeatureMap<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient through a rectifier, given its output.
pub fn relu_backward<T: Scalar>(y: &FeatureMap<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect();
    let (n, c, h, w) = y.shape();
    FeatureMap::from_nhwc(n, c, h, w, data).expect("shape")
}

/// Convolution with a bias, addressed in a [`ParamStore`].
#[derive(Debug, Clone, Copy)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeometry,
}

impl ConvLayer {
    pub fn register<T: Scalar>(init: &mut Initializer<T>, name: &str, geom: ConvGeometry) -> Self {
        let fan_in = geom.kernel * geom.kernel * geom.cin;
        let weight = init.add(format!("{name}.weight"), &geom.weight_shape(), Init::FanIn(fan_in));
        let bias = init.add(format!("{name}.bias"), &[geom.cout], Init::Zeros);
        Self { weight, bias, geom }
    }

    pub fn param_count(geom: &ConvGeometry) -> usize {
        geom.weight_len() + geom.cout
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        conv2d(x, p.get(self.weight), Some(p.get(self.bias)), &self.geom)
    }

    pub fn backward<T: Scalar>(&self, p: &ParamStore<T>, g: &mut Grads<T>, x: &FeatureMap<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
        let (dw, db) = pair_mut(g, self.weight, self.bias);
        conv2d_backward(x, p.get(self.weight), &self.geom, dy, dw, Some(db))
    }
}
