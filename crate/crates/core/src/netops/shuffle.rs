use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Scalar};

/// Rearranges `C·r²` channels into `C` channels at `r×` resolution:
/// `out[c, r·h + i, r·w + j] = x[c·r² + i·r + j, h, w]`.
pub fn pixel_shuffle<T: Scalar>(x: &FeatureMap<T>, r: usize) -> Result<FeatureMap<T>> {
    let (n, c, h, w) = x.shape();
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::invalid(format!("{c} channels not divisible by {r}^2")));
    }
    let co = c / (r * r);
    let mut out = FeatureMap::zeros(n, co, h * r, w * r);
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let s = x.index(b, 0, y, xx);
                let px = &x.data()[s..s + c];
                for i in 0..r {
                    for j in 0..r {
                        let d = out.index(b, 0, y * r + i, xx * r + j);
                        let dst = &mut out.data_mut()[d..d + co];
                        for (ch, o) in dst.iter_mut().enumerate() {
                            *o = px[ch * r * r + i * r + j];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pixel_shuffle`]; also its backward pass.
pub fn pixel_unshuffle<T: Scalar>(x: &FeatureMap<T>, r: usize) -> Result<FeatureMap<T>> {
    let (n, c, h, w) = x.shape();
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::invalid(format!("{h}x{w} not divisible by {r}")));
    }
    let (ho, wo) = (h / r, w / r);
    let cout = c * r * r;
    let mut out = FeatureMap::zeros(n, cout, ho, wo);
    for b in 0..n {
        for y in 0..ho {
            for xx in 0..wo {
                let d = out.index(b, 0, y, xx);
                for i in 0..r {
                    for j in 0..r {
                        let s = x.index(b, 0, y * r + i, xx * r + j);
                        for ch in 0..c {
                            let v = x.data()[s + ch];
                            out.data_mut()[d + ch * r * r + i * r + j] = v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
