use serde::{Deserialize, Serialize};

use super::conv::{depthwise3x3, depthwise3x3_backward, relu, relu_backward, ConvGeometry, ConvLayer};
use super::gate::{simple_gate, simple_gate_backward};
use super::norm::{layer_norm, layer_norm_backward, LayerNormCache};
use super::params::{pair_mut, Grads, Init, Initializer, ParamId, ParamStore};
use super::sca::{sca, sca_backward, ScaCache};
use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    /// 3×3 convolution followed by a rectifier.
    Naive,
    /// Normalized, gated residual block with channel attention.
    Baseline,
}

/// The gated residual block.
///
/// ```text
/// y   = x + conv3( sca( gate( dw3x3( conv1( ln1(x) ) ) ) ) )
/// out = y + conv5( gate( conv4( ln2(y) ) ) )
/// ```
///
/// `conv1` and `conv4` expand to twice the width; each gate halves it back.
#[derive(Debug, Clone)]
pub struct BaselineBlock {
    width: usize,
    ln1: (ParamId, ParamId),
    conv1: ConvLayer,
    dw: (ParamId, ParamId),
    sca: (ParamId, ParamId),
    conv3: ConvLayer,
    ln2: (ParamId, ParamId),
    conv4: ConvLayer,
    conv5: ConvLayer,
    /// Per-channel residual scales, when enabled.
    scales: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone)]
pub struct BaselineCache<T> {
    ln1: LayerNormCache<T>,
    n1: FeatureMap<T>,
    t1: FeatureMap<T>,
    t2: FeatureMap<T>,
    t3: FeatureMap<T>,
    sca: ScaCache<T>,
    t4: FeatureMap<T>,
    t5: FeatureMap<T>,
    ln2: LayerNormCache<T>,
    n2: FeatureMap<T>,
    u1: FeatureMap<T>,
    u2: FeatureMap<T>,
    u3: FeatureMap<T>,
}

fn scale_channels<T: Scalar>(x: &FeatureMap<T>, s: &[T]) -> FeatureMap<T> {
    let (n, c, h, w) = x.shape();
    let mut data = x.data().to_vec();
    for px in data.chunks_exact_mut(c) {
        px.iter_mut().zip(s).for_each(|(v, &k)| *v *= k);
    }
    FeatureMap::from_nhwc(n, c, h, w, data).expect("shape")
}

/// Backward of `out = base + s ⊙ t`: returns `d t`, accumulates `d s`.
fn scale_channels_backward<T: Scalar>(t: &FeatureMap<T>, s: &[T], dy: &FeatureMap<T>, ds: &mut [T]) -> FeatureMap<T> {
    let c = t.channels();
    for (tp, gp) in t.data().chunks_exact(c).zip(dy.data().chunks_exact(c)) {
        for i in 0..c {
            ds[i] += tp[i] * gp[i];
        }
    }
    scale_channels(dy, s)
}

impl BaselineBlock {
    pub fn register<T: Scalar>(init: &mut Initializer<T>, prefix: &str, width: usize, residual_scale: bool) -> Self {
        let c = width;
        let ln1 = (
            init.add(format!("{prefix}.ln1.gain"), &[c], Init::Ones),
            init.add(format!("{prefix}.ln1.bias"), &[c], Init::Zeros),
        );
        let conv1 = ConvLayer::register(init, &format!("{prefix}.conv1"), ConvGeometry::pointwise(c, 2 * c));
        let dw = (
            init.add(format!("{prefix}.dwconv.weight"), &[2 * c, 1, 3, 3], Init::FanIn(9)),
            init.add(format!("{prefix}.dwconv.bias"), &[2 * c], Init::Zeros),
        );
        let sca = (
            init.add(format!("{prefix}.sca.weight"), &[c, c], Init::FanIn(c)),
            init.add(format!("{prefix}.sca.bias"), &[c], Init::Zeros),
        );
        let conv3 = ConvLayer::register(init, &format!("{prefix}.conv3"), ConvGeometry::pointwise(c, c));
        let ln2 = (
            init.add(format!("{prefix}.ln2.gain"), &[c], Init::Ones),
            init.add(format!("{prefix}.ln2.bias"), &[c], Init::Zeros),
        );
        let conv4 = ConvLayer::register(init, &format!("{prefix}.conv4"), ConvGeometry::pointwise(c, 2 * c));
        let conv5 = ConvLayer::register(init, &format!("{prefix}.conv5"), ConvGeometry::pointwise(c, c));
        let scales = residual_scale.then(|| {
            (
                init.add(format!("{prefix}.beta"), &[c], Init::Zeros),
                init.add(format!("{prefix}.gamma"), &[c], Init::Zeros),
            )
        });
        Self { width, ln1, conv1, dw, sca, conv3, ln2, conv4, conv5, scales }
    }

    /// Scalar parameter count for a block of the given width.
    pub fn param_count(width: usize, residual_scale: bool) -> usize {
        7 * width * width + 31 * width + if residual_scale { 2 * width } else { 0 }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &FeatureMap<T>) -> Result<(FeatureMap<T>, BaselineCache<T>)> {
        if x.channels() != self.width {
            return Err(Error::invalid(format!(
                "block of width {} got {} channels",
                self.width,
                x.channels()
            )));
        }
        let (n1, ln1) = layer_norm(x, p.get(self.ln1.0), p.get(self.ln1.1))?;
        let t1 = self.conv1.forward(p, &n1)?;
        let t2 = depthwise3x3(&t1, p.get(self.dw.0), p.get(self.dw.1))?;
        let t3 = simple_gate(&t2)?;
        let (t4, sca_cache) = sca(&t3, p.get(self.sca.0), Some(p.get(self.sca.1)))?;
        let t5 = self.conv3.forward(p, &t4)?;
        let mut y = x.clone();
        match self.scales {
            Some((beta, _)) => y.add_assign(&scale_channels(&t5, p.get(beta))),
            None => y.add_assign(&t5),
        }

        let (n2, ln2) = layer_norm(&y, p.get(self.ln2.0), p.get(self.ln2.1))?;
        let u1 = self.conv4.forward(p, &n2)?;
        let u2 = simple_gate(&u1)?;
        let u3 = self.conv5.forward(p, &u2)?;
        let mut out = y.clone();
        match self.scales {
            Some((_, gamma)) => out.add_assign(&scale_channels(&u3, p.get(gamma))),
            None => out.add_assign(&u3),
        }
        let cache = BaselineCache { ln1, n1, t1, t2, t3, sca: sca_cache, t4, t5, ln2, n2, u1, u2, u3 };
        Ok((out, cache))
    }

    pub fn backward<T: Scalar>(&self, p: &ParamStore<T>, g: &mut Grads<T>, cache: &BaselineCache<T>, dout: &FeatureMap<T>) -> FeatureMap<T> {
        // second residual stage
        let du3 = match self.scales {
            Some((_, gamma)) => scale_channels_backward(&cache.u3, p.get(gamma), dout, &mut g[gamma.0]),
            None => dout.clone(),
        };
        let du2 = self.conv5.backward(p, g, &cache.u2, &du3);
        let du1 = simple_gate_backward(&cache.u1, &du2);
        let dn2 = self.conv4.backward(p, g, &cache.n2, &du1);
        let (dg, db) = pair_mut(g, self.ln2.0, self.ln2.1);
        let mut dy = layer_norm_backward(&cache.ln2, p.get(self.ln2.0), &dn2, dg, db);
        dy.add_assign(dout);

        // first residual stage
        let dt5 = match self.scales {
            Some((beta, _)) => scale_channels_backward(&cache.t5, p.get(beta), &dy, &mut g[beta.0]),
            None => dy.clone(),
        };
        let dt4 = self.conv3.backward(p, g, &cache.t4, &dt5);
        let (dw, db) = pair_mut(g, self.sca.0, self.sca.1);
        let dt3 = sca_backward(&cache.t3, p.get(self.sca.0), &cache.sca, &dt4, dw, Some(db));
        let dt2 = simple_gate_backward(&cache.t2, &dt3);
        let (dw, db) = pair_mut(g, self.dw.0, self.dw.1);
        let dt1 = depthwise3x3_backward(&cache.t1, p.get(self.dw.0), &dt2, dw, db);
        let dn1 = self.conv1.backward(p, g, &cache.n1, &dt1);
        let (dg, db) = pair_mut(g, self.ln1.0, self.ln1.1);
        let mut dx = layer_norm_backward(&cache.ln1, p.get(self.ln1.0), &dn1, dg, db);
        dx.add_assign(&dy);
        dx
    }
}

/// Width-preserving 3×3 convolution and rectifier.
#[derive(Debug, Clone)]
pub struct NaiveBlock {
    conv: ConvLayer,
}

#[derive(Debug, Clone)]
pub struct NaiveCache<T> {
    x: FeatureMap<T>,
    y: FeatureMap<T>,
}

impl NaiveBlock {
    pub fn register<T: Scalar>(init: &mut Initializer<T>, prefix: &str, width: usize) -> Self {
        Self { conv: ConvLayer::register(init, &format!("{prefix}.conv"), ConvGeometry::same(width, width, 3)) }
    }

    pub fn param_count(width: usize) -> usize {
        9 * width * width + width
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &FeatureMap<T>) -> Result<(FeatureMap<T>, NaiveCache<T>)> {
        let y = relu(&self.conv.forward(p, x)?);
        Ok((y.clone(), NaiveCache { x: x.clone(), y }))
    }

    pub fn backward<T: Scalar>(&self, p: &ParamStore<T>, g: &mut Grads<T>, cache: &NaiveCache<T>, dout: &FeatureMap<T>) -> FeatureMap<T> {
        let dz = relu_backward(&cache.y, dout);
        self.conv.backward(p, g, &cache.x, &dz)
    }
}

#[derive(Debug, Clone)]
pub enum Block {
    Naive(NaiveBlock),
    Baseline(BaselineBlock),
}

#[derive(Debug, Clone)]
pub enum BlockCache<T> {
    Naive(NaiveCache<T>),
    Baseline(Box<BaselineCache<T>>),
}

impl Block {
    pub fn register<T: Scalar>(init: &mut Initializer<T>, kind: BlockKind, prefix: &str, width: usize, residual_scale: bool) -> Self {
        match kind {
            BlockKind::Naive => Block::Naive(NaiveBlock::register(init, prefix, width)),
            BlockKind::Baseline => Block::Baseline(BaselineBlock::register(init, prefix, width, residual_scale)),
        }
    }

    pub fn param_count(kind: BlockKind, width: usize, residual_scale: bool) -> usize {
        match kind {
            BlockKind::Naive => NaiveBlock::param_count(width),
            BlockKind::Baseline => BaselineBlock::param_count(width, residual_scale),
        }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &FeatureMap<T>) -> Result<(FeatureMap<T>, BlockCache<T>)> {
        match self {
            Block::Naive(b) => b.forward(p, x).map(|(y, c)| (y, BlockCache::Naive(c))),
            Block::Baseline(b) => b.forward(p, x).map(|(y, c)| (y, BlockCache::Baseline(Box::new(c)))),
        }
    }

    pub fn backward<T: Scalar>(&self, p: &ParamStore<T>, g: &mut Grads<T>, cache: &BlockCache<T>, dout: &FeatureMap<T>) -> FeatureMap<T> {
        match (self, cache) {
            (Block::Naive(b), BlockCache::Naive(c)) => b.backward(p, g, c, dout),
            (Block::Baseline(b), BlockCache::Baseline(c)) => b.backward(p, g, c, dout),
            _ => panic!("block cache does not match block kind"),
        }
    }
}
