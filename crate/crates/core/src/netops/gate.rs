use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Scalar};

/// Splits channels in half and multiplies the halves elementwise.
pub fn simple_gate<T: Scalar>(x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    let (n, c, h, w) = x.shape();
    if c % 2 != 0 {
        return Err(Error::invalid(format!("simple gate needs an even channel count, got {c}")));
    }
    let half = c / 2;
    let mut out = Vec::with_capacity(x.len() / 2);
    for px in x.data().chunks_exact(c) {
        let (a, b) = px.split_at(half);
        out.extend(a.iter().zip(b).map(|(&u, &v)| u * v));
    }
    FeatureMap::from_nhwc(n, half, h, w, out)
}

pub fn simple_gate_backward<T: Scalar>(x: &FeatureMap<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
    let (n, c, h, w) = x.shape();
    let half = c / 2;
    let mut dx = Vec::with_capacity(x.len());
    for (px, g) in x.data().chunks_exact(c).zip(dy.data().chunks_exact(half)) {
        let (a, b) = px.split_at(half);
        dx.extend(g.iter().zip(b).map(|(&gv, &v)| gv * v));
        dx.extend(g.iter().zip(a).map(|(&gv, &u)| gv * u));
    }
    FeatureMap::from_nhwc(n, c, h, w, dx).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use rand::Rng;

    #[test]
    fn pair_product() {
        let x = FeatureMap::from_nhwc(1, 2, 1, 1, vec![2.0f64, 3.0]).unwrap();
        assert_eq!(simple_gate(&x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn ones_in_second_half_pass_first_half() {
        let mut rng = SeededRng::new(5);
        let x = FeatureMap::<f64>::from_fn(2, 6, 3, 3, |_, c, _, _| if c >= 3 { 1.0 } else { rng.gen() });
        let y = simple_gate(&x).unwrap();
        let (first, _) = x.split_channels(3);
        assert_eq!(y, first);
    }

    #[test]
    fn matches_naive_loop() {
        let mut rng = SeededRng::new(6);
        let x = FeatureMap::<f64>::from_fn(1, 64, 4, 4, |_, _, _, _| rng.gen_range(-1.0..1.0));
        let y = simple_gate(&x).unwrap();
        for c in 0..32 {
            for h in 0..4 {
                for w in 0..4 {
                    assert_eq!(y.get(0, c, h, w), x.get(0, c, h, w) * x.get(0, c + 32, h, w));
                }
            }
        }
    }

    #[test]
    fn odd_channels_rejected() {
        let x = FeatureMap::<f64>::zeros(1, 3, 2, 2);
        assert!(matches!(simple_gate(&x), Err(Error::InvalidParameter(_))));
    }
}
