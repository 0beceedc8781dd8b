use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Scalar};

/// Flat index of each pooled maximum in the input.
#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    argmax: Vec<usize>,
    input_shape: (usize, usize, usize, usize),
}

/// 2×2 max pooling with stride 2.
pub fn max_pool2<T: Scalar>(x: &FeatureMap<T>) -> Result<(FeatureMap<T>, MaxPoolCache)> {
    let (n, c, h, w) = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!("{h}x{w} not divisible by 2")));
    }
    let mut out = FeatureMap::zeros(n, c, h / 2, w / 2);
    let mut argmax = Vec::with_capacity(out.len());
    for b in 0..n {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                for ch in 0..c {
                    let mut best = x.index(b, ch, 2 * y, 2 * xx);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = x.index(b, ch, 2 * y + dy, 2 * xx + dx);
                        if x.data()[i] > x.data()[best] {
                            best = i;
                        }
                    }
                    argmax.push(best);
                    out.set(b, ch, y, xx, x.data()[best]);
                }
            }
        }
    }
    Ok((out, MaxPoolCache { argmax, input_shape: (n, c, h, w) }))
}

pub fn max_pool2_backward<T: Scalar>(cache: &MaxPoolCache, dy: &FeatureMap<T>) -> FeatureMap<T> {
    let (n, c, h, w) = cache.input_shape;
    let mut dx = FeatureMap::zeros(n, c, h, w);
    for (&i, &g) in cache.argmax.iter().zip(dy.data()) {
        dx.data_mut()[i] += g;
    }
    dx
}
