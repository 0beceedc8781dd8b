//! Batched feature maps and the scalar abstraction shared by all network ops.
//!
//! Logical shape is `N×C×H×W`; storage is channel-last (`N×H×W×C`) so that
//! per-pixel channel vectors are contiguous and pointwise convolutions over
//! a whole batch are one matrix product.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};
use crate::image::{check_same_shape, ImageTensor};

pub trait Scalar:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Tag written into checkpoints.
    const DTYPE: &'static str;
    const BYTES: usize;

    /// `C ← alpha·A·B + beta·C` with arbitrary strides.
    ///
    /// # Safety
    /// Strides and dimensions must address memory inside the given buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Strided view of a matrix stored in a slice.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a, T> Mat<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: cols as isize, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        (self.rows - 1) * self.rs as usize + (self.cols - 1) * self.cs as usize + 1
    }
}

/// `out ← a·b + beta·out` where `out` is row-major `a.rows × b.cols`.
pub(crate) fn matmul<T: Scalar>(a: Mat<T>, b: Mat<T>, beta: T, out: &mut [T]) {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    assert!(a.span() <= a.data.len() && b.span() <= b.data.len());
    assert!(out.len() >= a.rows * b.cols);
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    // SAFETY: bounds of all three operands were checked above.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            T::one(),
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            out.as_mut_ptr(),
            b.cols as isize,
            1,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w, data: vec![T::zero(); n * c * h * w] }
    }

    /// Wraps channel-last data.
    pub fn from_nhwc(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::invalid("feature map dimensions must be positive"));
        }
        if data.len() != n * c * h * w {
            return Err(Error::shape(format!(
                "{} values for a {n}x{c}x{h}x{w} feature map",
                data.len()
            )));
        }
        Ok(Self { n, c, h, w, data })
    }

    /// Builds a map from a function of logical `(n, c, h, w)` indices.
    pub fn from_fn(n: usize, c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        data.push(f(b, ch, y, x));
                    }
                }
            }
        }
        Self { n, c, h, w, data }
    }

    pub fn from_images(images: &[ImageTensor]) -> Result<Self> {
        let (c, h, w) = check_same_shape(images)?;
        Ok(Self::from_fn(images.len(), c, h, w, |b, ch, y, x| {
            T::lit(images[b].get(ch, y, x) as f64)
        }))
    }

    pub fn to_images(&self) -> Vec<ImageTensor> {
        (0..self.n)
            .map(|b| {
                ImageTensor::from_fn(self.c, self.h, self.w, |ch, y, x| {
                    self.get(b, ch, y, x).as_f64() as f32
                })
            })
            .collect()
    }

    /// Logical `(N, C, H, W)`.
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// Number of pixel positions, `N·H·W`.
    pub fn pixels(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Channel-last storage.
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.h + h) * self.w + w) * self.c + c
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { data: self.data.iter().map(|&v| f(v)).collect(), ..*self }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert!(self.same_shape(other));
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a += b);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Concatenates along channels: `[self, other]`.
    pub fn concat_channels(&self, other: &Self) -> Result<Self> {
        if (self.n, self.h, self.w) != (other.n, other.h, other.w) {
            return Err(Error::shape("concat requires equal batch and spatial dims"));
        }
        let c = self.c + other.c;
        let mut data = Vec::with_capacity(self.pixels() * c);
        for (a, b) in self.data.chunks_exact(self.c).zip(other.data.chunks_exact(other.c)) {
            data.extend_from_slice(a);
            data.extend_from_slice(b);
        }
        Ok(Self { c, data, ..*self })
    }

    /// Splits channels into `[0, at)` and `[at, C)`.
    pub fn split_channels(&self, at: usize) -> (Self, Self) {
        assert!(at > 0 && at < self.c);
        let mut a = Vec::with_capacity(self.pixels() * at);
        let mut b = Vec::with_capacity(self.pixels() * (self.c - at));
        for px in self.data.chunks_exact(self.c) {
            a.extend_from_slice(&px[..at]);
            b.extend_from_slice(&px[at..]);
        }
        (Self { c: at, data: a, ..*self }, Self { c: self.c - at, data: b, ..*self })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logical_indexing_is_layout_independent() {
        let fm = FeatureMap::<f64>::from_fn(2, 3, 4, 5, |n, c, h, w| (n * 1000 + c * 100 + h * 10 + w) as f64);
        assert_eq!(fm.get(1, 2, 3, 4), 1234.0);
        assert_eq!(fm.get(0, 1, 0, 2), 102.0);
    }

    #[test]
    fn image_round_trip() {
        let im = ImageTensor::from_fn(3, 4, 5, |c, y, x| (c * 20 + y * 5 + x) as f32 / 64.0);
        let fm = FeatureMap::<f32>::from_images(&[im.clone(), im.clone()]).unwrap();
        assert_eq!(fm.shape(), (2, 3, 4, 5));
        assert_eq!(fm.to_images()[1], im);
    }

    #[test]
    fn concat_then_split() {
        let a = FeatureMap::<f64>::from_fn(1, 2, 2, 2, |_, c, h, w| (c + h + w) as f64);
        let b = FeatureMap::<f64>::from_fn(1, 3, 2, 2, |_, c, h, w| -((c * h + w) as f64));
        let cat = a.concat_channels(&b).unwrap();
        assert_eq!(cat.get(0, 3, 1, 1), b.get(0, 1, 1, 1));
        let (x, y) = cat.split_channels(2);
        assert_eq!(x, a);
        assert_eq!(y, b);
    }

    #[test]
    fn matmul_with_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]] -> A·Bᵀ = [[17,23],[39,53]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        matmul(Mat::row_major(&a, 2, 2), Mat::row_major(&b, 2, 2).t(), 0.0, &mut out);
        assert_eq!(out, [17.0, 23.0, 39.0, 53.0]);
    }
}
