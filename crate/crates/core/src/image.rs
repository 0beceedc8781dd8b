//! Planar `C×H×W` intensity images in `[0, 1]` and raster file IO.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// Sample depth of a stored raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl ImageTensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(self.channels, height, width, |c, y, x| {
            self.get(c, top + y, left + x)
        }))
    }

    /// Reflect-pads the bottom and right edges (edge sample not repeated).
    pub fn pad_reflect(&self, bottom: usize, right: usize) -> Self {
        let (h, w) = (self.height, self.width);
        Self::from_fn(self.channels, h + bottom, w + right, |c, y, x| {
            self.get(c, reflect_index(y as isize, h), reflect_index(x as isize, w))
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        let w = self.width;
        Self::from_fn(self.channels, self.height, w, |c, y, x| self.get(c, y, w - 1 - x))
    }

    /// Counter-clockwise rotation by `quarter_turns` × 90°.
    pub fn rotate90(&self, quarter_turns: u32) -> Self {
        let (h, w) = (self.height, self.width);
        match quarter_turns % 4 {
            0 => self.clone(),
            1 => Self::from_fn(self.channels, w, h, |c, y, x| self.get(c, x, w - 1 - y)),
            2 => Self::from_fn(self.channels, h, w, |c, y, x| {
                self.get(c, h - 1 - y, w - 1 - x)
            }),
            _ => Self::from_fn(self.channels, w, h, |c, y, x| self.get(c, h - 1 - x, y)),
        }
    }

    /// BT.601 luminance; single-channel images are returned unchanged.
    pub fn to_luma(&self) -> Self {
        if self.channels == 1 {
            return self.clone();
        }
        Self::from_fn(1, self.height, self.width, |_, y, x| {
            0.299 * self.get(0, y, x) + 0.587 * self.get(1, y, x) + 0.114 * self.get(2, y, x)
        })
    }

    /// Repeats a single channel `channels` times.
    pub fn replicate(&self, channels: usize) -> Result<Self> {
        if self.channels != 1 {
            return Err(Error::invalid("only single-channel images can be replicated"));
        }
        let mut data = Vec::with_capacity(self.data.len() * channels);
        for _ in 0..channels {
            data.extend_from_slice(&self.data);
        }
        Self::from_vec(channels, self.height, self.width, data)
    }

    /// Average over channels, producing one plane.
    pub fn mean_channels(&self) -> Self {
        let n = self.channels as f32;
        Self::from_fn(1, self.height, self.width, |_, y, x| {
            (0..self.channels).map(|c| self.get(c, y, x)).sum::<f32>() / n
        })
    }

    /// Converts to the requested channel count (1 or 3).
    pub fn with_channels(&self, channels: usize) -> Result<Self> {
        match (self.channels, channels) {
            (a, b) if a == b => Ok(self.clone()),
            (3, 1) => Ok(self.to_luma()),
            (1, 3) => self.replicate(3),
            (a, b) => Err(Error::invalid(format!("cannot convert {a} channels to {b}"))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::load_with_depth(path)?.0)
    }

    /// Decodes a raster, dropping any alpha channel.
    pub fn load_with_depth(path: &Path) -> Result<(Self, BitDepth)> {
        let decode_err = |reason: String| Error::Decode {
            path: path.to_path_buf(),
            reason,
        };
        let img = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(path, e))?
            .decode()
            .map_err(|e| decode_err(e.to_string()))?;
        let gray = !img.color().has_color();
        let sixteen = img.color().bytes_per_pixel() / img.color().channel_count() >= 2;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let depth = if sixteen {
            BitDepth::Sixteen
        } else {
            BitDepth::Eight
        };
        let tensor = match (gray, sixteen) {
            (true, false) => {
                let buf = img.to_luma8();
                Self::from_fn(1, h, w, |_, y, x| {
                    buf.get_pixel(x as u32, y as u32)[0] as f32 / 255.0
                })
            }
            (true, true) => {
                let buf = img.to_luma16();
                Self::from_fn(1, h, w, |_, y, x| {
                    buf.get_pixel(x as u32, y as u32)[0] as f32 / 65535.0
                })
            }
            (false, false) => {
                let buf = img.to_rgb8();
                Self::from_fn(3, h, w, |c, y, x| {
                    buf.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
                })
            }
            (false, true) => {
                let buf = img.to_rgb16();
                Self::from_fn(3, h, w, |c, y, x| {
                    buf.get_pixel(x as u32, y as u32)[c] as f32 / 65535.0
                })
            }
        };
        if w == 0 || h == 0 {
            return Err(decode_err("empty raster".into()));
        }
        Ok((tensor, depth))
    }

    /// Writes a PNG (or any lossless format implied by the extension).
    /// Values are clamped to `[0, 1]` and rounded.
    pub fn save(&self, path: &Path, depth: BitDepth) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let q8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let q16 = |v: f32| (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        let img: DynamicImage = match (self.channels, depth) {
            (1, BitDepth::Eight) => ImageBuffer::from_fn(w, h, |x, y| {
                Luma([q8(self.get(0, y as usize, x as usize))])
            })
            .into(),
            (1, BitDepth::Sixteen) => ImageBuffer::from_fn(w, h, |x, y| {
                Luma([q16(self.get(0, y as usize, x as usize))])
            })
            .into(),
            (3, BitDepth::Eight) => ImageBuffer::from_fn(w, h, |x, y| {
                let (x, y) = (x as usize, y as usize);
                Rgb([q8(self.get(0, y, x)), q8(self.get(1, y, x)), q8(self.get(2, y, x))])
            })
            .into(),
            (3, BitDepth::Sixteen) => ImageBuffer::from_fn(w, h, |x, y| {
                let (x, y) = (x as usize, y as usize);
                Rgb([q16(self.get(0, y, x)), q16(self.get(1, y, x)), q16(self.get(2, y, x))])
            })
            .into(),
            (c, _) => return Err(Error::invalid(format!("cannot store {c}-channel image"))),
        };
        img.save(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format(format!("{}: {other}", path.display())),
        })
    }
}

/// Mirror an index into `0..n` without repeating the edge sample.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Stacks a slice of same-shape images into one contiguous `N×C×H×W` buffer.
pub(crate) fn check_same_shape(images: &[ImageTensor]) -> Result<(usize, usize, usize)> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("empty image list"))?
        .shape();
    if images.iter().any(|im| im.shape() != first) {
        return Err(Error::shape("images in a batch must share one shape"));
    }
    Ok(first)
}
