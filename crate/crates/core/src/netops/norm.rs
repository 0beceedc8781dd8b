use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Scalar};

pub const LN_EPS: f64 = 1e-6;

/// Normalized activations and inverse std per pixel, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

/// Channel-wise layer normalization at every pixel, then per-channel affine.
pub fn layer_norm<T: Scalar>(
    x: &FeatureMap<T>,
    gain: &[T],
    bias: &[T],
) -> Result<(FeatureMap<T>, LayerNormCache<T>)> {
    let (n, c, h, w) = x.shape();
    if gain.len() != c || bias.len() != c {
        return Err(Error::shape(format!("layer norm parameters do not match {c} channels")));
    }
    let eps = T::lit(LN_EPS);
    let inv_c = T::one() / T::lit(c as f64);
    let mut out = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(x.pixels());
    for px in x.data().chunks_exact(c) {
        let mean = px.iter().copied().sum::<T>() * inv_c;
        let var = px.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        for ((&v, &g), &b) in px.iter().zip(gain).zip(bias) {
            let xh = (v - mean) * r;
            xhat.push(xh);
            out.push(xh * g + b);
        }
    }
    Ok((FeatureMap::from_nhwc(n, c, h, w, out)?, LayerNormCache { xhat, rstd }))
}

pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gain: &[T],
    dy: &FeatureMap<T>,
    dgain: &mut [T],
    dbias: &mut [T],
) -> FeatureMap<T> {
    let (n, c, h, w) = dy.shape();
    let inv_c = T::one() / T::lit(c as f64);
    let mut dx = Vec::with_capacity(dy.len());
    let mut dxhat = vec![T::zero(); c];
    for ((g, xh), &r) in dy.data().chunks_exact(c).zip(cache.xhat.chunks_exact(c)).zip(&cache.rstd) {
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for i in 0..c {
            dgain[i] += g[i] * xh[i];
            dbias[i] += g[i];
            dxhat[i] = g[i] * gain[i];
            mean_d += dxhat[i];
            mean_dx += dxhat[i] * xh[i];
        }
        mean_d *= inv_c;
        mean_dx *= inv_c;
        for i in 0..c {
            dx.push(r * (dxhat[i] - mean_d - xh[i] * mean_dx));
        }
    }
    FeatureMap::from_nhwc(n, c, h, w, dx).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use rand::Rng;

    #[test]
    fn two_point_normalization() {
        let x = FeatureMap::from_nhwc(1, 2, 1, 1, vec![1.0f64, 3.0]).unwrap();
        let (y, _) = layer_norm(&x, &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-5);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn constant_vector_maps_to_zero() {
        let x = FeatureMap::from_nhwc(1, 4, 1, 1, vec![0.7f64; 4]).unwrap();
        let (y, _) = layer_norm(&x, &[1.0; 4], &[0.0; 4]).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn per_position_statistics() {
        let mut rng = SeededRng::new(4);
        let x = FeatureMap::<f64>::from_fn(2, 8, 5, 5, |_, _, _, _| rng.gen_range(-3.0..5.0));
        let (y, _) = layer_norm(&x, &[1.0; 8], &[0.0; 8]).unwrap();
        for px in y.data().chunks_exact(8) {
            let mean = px.iter().sum::<f64>() / 8.0;
            let var = px.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn mismatched_parameters() {
        let x = FeatureMap::<f64>::zeros(1, 4, 2, 2);
        assert!(layer_norm(&x, &[1.0; 3], &[0.0; 4]).is_err());
    }
}
