use crate::error::{Error, Result};
use crate::tensor::{matmul, FeatureMap, Mat, Scalar};

#[derive(Debug, Clone)]
pub struct ScaCache<T> {
    pooled: Vec<T>,
    attention: Vec<T>,
}

/// Simplified channel attention: global average pool, a pointwise
/// transform of the pooled vector, then per-channel rescaling of `x`.
/// `weight` is `C×C` (`[out][in]`).
pub fn sca<T: Scalar>(x: &FeatureMap<T>, weight: &[T], bias: Option<&[T]>) -> Result<(FeatureMap<T>, ScaCache<T>)> {
    let (n, c, h, w) = x.shape();
    if weight.len() != c * c || bias.is_some_and(|b| b.len() != c) {
        return Err(Error::shape(format!("channel attention weights do not match {c} channels")));
    }
    let hw = h * w;
    let inv = T::one() / T::lit(hw as f64);
    let mut pooled = vec![T::zero(); n * c];
    for (b, img) in x.data().chunks_exact(hw * c).enumerate() {
        let p = &mut pooled[b * c..(b + 1) * c];
        for px in img.chunks_exact(c) {
            p.iter_mut().zip(px).for_each(|(a, &v)| *a += v);
        }
        p.iter_mut().for_each(|a| *a *= inv);
    }
    let mut attention = vec![T::zero(); n * c];
    if let Some(b) = bias {
        for row in attention.chunks_exact_mut(c) {
            row.copy_from_slice(b);
        }
    }
    matmul(Mat::row_major(&pooled, n, c), Mat::row_major(weight, c, c).t(), T::one(), &mut attention);
    let mut out = Vec::with_capacity(x.len());
    for (b, img) in x.data().chunks_exact(hw * c).enumerate() {
        let a = &attention[b * c..(b + 1) * c];
        for px in img.chunks_exact(c) {
            out.extend(px.iter().zip(a).map(|(&v, &s)| v * s));
        }
    }
    Ok((FeatureMap::from_nhwc(n, c, h, w, out)?, ScaCache { pooled, attention }))
}

pub fn sca_backward<T: Scalar>(
    x: &FeatureMap<T>,
    weight: &[T],
    cache: &ScaCache<T>,
    dy: &FeatureMap<T>,
    dweight: &mut [T],
    dbias: Option<&mut [T]>,
) -> FeatureMap<T> {
    let (n, c, h, w) = x.shape();
    let hw = h * w;
    // dL/da[n,c] = Σ_hw dy·x
    let mut dattn = vec![T::zero(); n * c];
    for (b, (img, g)) in x.data().chunks_exact(hw * c).zip(dy.data().chunks_exact(hw * c)).enumerate() {
        let da = &mut dattn[b * c..(b + 1) * c];
        for (px, gp) in img.chunks_exact(c).zip(g.chunks_exact(c)) {
            for i in 0..c {
                da[i] += px[i] * gp[i];
            }
        }
    }
    if let Some(db) = dbias {
        for row in dattn.chunks_exact(c) {
            db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
        }
    }
    matmul(Mat::row_major(&dattn, n, c).t(), Mat::row_major(&cache.pooled, n, c), T::one(), dweight);
    let mut dpooled = vec![T::zero(); n * c];
    matmul(Mat::row_major(&dattn, n, c), Mat::row_major(weight, c, c), T::zero(), &mut dpooled);
    let inv = T::one() / T::lit(hw as f64);
    let mut dx = Vec::with_capacity(x.len());
    for (b, g) in dy.data().chunks_exact(hw * c).enumerate() {
        let a = &cache.attention[b * c..(b + 1) * c];
        let dp = &dpooled[b * c..(b + 1) * c];
        for gp in g.chunks_exact(c) {
            for i in 0..c {
                dx.push(gp[i] * a[i] + dp[i] * inv);
            }
        }
    }
    FeatureMap::from_nhwc(n, c, h, w, dx).expect("shape")
}
