//! Network assembly for the three architectures: a flat stack of blocks
//! with a pixel-shuffle head, a U-shaped encoder/decoder with a
//! pixel-shuffle head, and the J-shaped variant whose extra expansive stage
//! raises the resolution before a plain convolutional head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{bicubic_resize, Direction};
use crate::image::ImageTensor;
use crate::netops::{
    max_pool2, max_pool2_backward, pixel_shuffle, pixel_unshuffle, Block, BlockCache, BlockKind, ConvGeometry,
    ConvLayer, Grads, Initializer, MaxPoolCache, ParamStore,
};
use crate::rng::SeededRng;
use crate::tensor::{FeatureMap, Scalar};

/// Trained weights of a network, in registration order.
pub type NetworkParams<T> = ParamStore<T>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    FlatUnet,
    UnetPs,
    Jnet,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::FlatUnet => "flat-unet",
            Variant::UnetPs => "unet-ps",
            Variant::Jnet => "jnet",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat-unet" => Ok(Variant::FlatUnet),
            "unet-ps" => Ok(Variant::UnetPs),
            "jnet" => Ok(Variant::Jnet),
            other => Err(Error::invalid(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DownsampleKind {
    /// 2×2 convolution with stride 2.
    StrideConv,
    MaxPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub variant: Variant,
    pub block_type: BlockKind,
    pub width: usize,
    pub blocks_per_stage: usize,
    pub encoder_levels: usize,
    pub scale: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub downsample: DownsampleKind,
    /// Add the bicubic upsampling of the input to the prediction.
    pub global_residual: bool,
    /// Learnable per-channel scales on both residual branches of each block.
    pub residual_scale: bool,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            variant: Variant::Jnet,
            block_type: BlockKind::Baseline,
            width: 64,
            blocks_per_stage: 2,
            encoder_levels: 3,
            scale: 2,
            in_channels: 3,
            out_channels: 3,
            downsample: DownsampleKind::StrideConv,
            global_residual: false,
            residual_scale: false,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.width % 2 != 0 {
            return Err(Error::invalid(format!("width must be even and >= 2, got {}", self.width)));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::invalid("blocks_per_stage must be >= 1"));
        }
        if self.variant != Variant::FlatUnet && self.encoder_levels == 0 {
            return Err(Error::invalid("U-shaped variants need at least one encoder level"));
        }
        if self.encoder_levels > 8 {
            return Err(Error::invalid("encoder_levels must be <= 8"));
        }
        if self.variant == Variant::Jnet && self.scale != 2 {
            return Err(Error::invalid(format!(
                "the J-shaped network has one extra expansive stage and only supports scale 2, got {}",
                self.scale
            )));
        }
        if self.scale == 0 || self.scale > 8 {
            return Err(Error::invalid(format!("unsupported scale {}", self.scale)));
        }
        for (what, c) in [("in_channels", self.in_channels), ("out_channels", self.out_channels)] {
            if c != 1 && c != 3 {
                return Err(Error::invalid(format!("{what} must be 1 or 3, got {c}")));
            }
        }
        if self.global_residual && self.in_channels != self.out_channels {
            return Err(Error::invalid("global residual needs in_channels == out_channels"));
        }
        Ok(())
    }

    /// Input height and width must be multiples of this.
    pub fn divisor(&self) -> usize {
        match self.variant {
            Variant::FlatUnet => 1,
            _ => 1 << self.encoder_levels,
        }
    }

    fn flat_blocks(&self) -> usize {
        (2 * self.encoder_levels + 1) * self.blocks_per_stage
    }
}

#[derive(Debug, Clone)]
enum Down {
    Conv(ConvLayer),
    Pool,
}

#[derive(Debug, Clone)]
enum DownCache<T> {
    Conv(FeatureMap<T>),
    Pool(MaxPoolCache),
}

#[derive(Debug, Clone)]
struct Level {
    blocks: Vec<Block>,
    down: Down,
}

#[derive(Debug, Clone)]
struct UpLevel {
    up: ConvLayer,
    fuse: ConvLayer,
    blocks: Vec<Block>,
}

#[derive(Debug, Clone)]
enum Body {
    Flat(Vec<Block>),
    U {
        encoder: Vec<Level>,
        middle: Vec<Block>,
        decoder: Vec<UpLevel>,
        extra: Option<(ConvLayer, Vec<Block>)>,
    },
}

/// Computational graph for a [`NetworkSpec`]; parameters live in a separate store.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    stem: ConvLayer,
    body: Body,
    head: ConvLayer,
    head_shuffle: usize,
}

/// Activations retained by [`Network::forward_train`].
#[derive(Debug)]
pub struct ForwardCache<T> {
    stem_in: FeatureMap<T>,
    flat: Vec<BlockCache<T>>,
    encoder: Vec<(Vec<BlockCache<T>>, DownCache<T>)>,
    middle: Vec<BlockCache<T>>,
    /// Per decoder level, deepest first: up-conv input, fuse input, block caches.
    decoder: Vec<(FeatureMap<T>, FeatureMap<T>, Vec<BlockCache<T>>)>,
    extra: Option<(FeatureMap<T>, Vec<BlockCache<T>>)>,
    head_in: FeatureMap<T>,
}

fn register_blocks<T: Scalar>(init: &mut Initializer<T>, spec: &NetworkSpec, prefix: &str, count: usize) -> Vec<Block> {
    (0..count)
        .map(|i| Block::register(init, spec.block_type, &format!("{prefix}.{i}"), spec.width, spec.residual_scale))
        .collect()
}

fn run_blocks<T: Scalar>(blocks: &[Block], p: &ParamStore<T>, mut h: FeatureMap<T>, caches: &mut Vec<BlockCache<T>>) -> Result<FeatureMap<T>> {
    for b in blocks {
        let (out, cache) = b.forward(p, &h)?;
        caches.push(cache);
        h = out;
    }
    Ok(h)
}

fn back_blocks<T: Scalar>(blocks: &[Block], p: &ParamStore<T>, g: &mut Grads<T>, caches: &[BlockCache<T>], mut d: FeatureMap<T>) -> FeatureMap<T> {
    for (b, c) in blocks.iter().zip(caches).rev() {
        d = b.backward(p, g, c, &d);
    }
    d
}

fn up_geometry(width: usize) -> ConvGeometry {
    ConvGeometry::pointwise(width, 4 * width)
}

impl Network {
    /// Lays out the graph, registering parameters through `init`.
    pub fn register<T: Scalar>(spec: &NetworkSpec, init: &mut Initializer<T>) -> Result<Self> {
        spec.validate()?;
        let c = spec.width;
        let stem = ConvLayer::register(init, "stem", ConvGeometry::same(spec.in_channels, c, 3));
        let body = match spec.variant {
            Variant::FlatUnet => Body::Flat(register_blocks(init, spec, "body", spec.flat_blocks())),
            Variant::UnetPs | Variant::Jnet => {
                let mut encoder = Vec::new();
                for i in 0..spec.encoder_levels {
                    let blocks = register_blocks(init, spec, &format!("enc{i}"), spec.blocks_per_stage);
                    let down = match spec.downsample {
                        DownsampleKind::StrideConv => Down::Conv(ConvLayer::register(
                            init,
                            &format!("down{i}"),
                            ConvGeometry { cin: c, cout: c, kernel: 2, stride: 2, pad: 0 },
                        )),
                        DownsampleKind::MaxPool => Down::Pool,
                    };
                    encoder.push(Level { blocks, down });
                }
                let middle = register_blocks(init, spec, "middle", spec.blocks_per_stage);
                let mut decoder = Vec::new();
                for i in (0..spec.encoder_levels).rev() {
                    let up = ConvLayer::register(init, &format!("up{i}"), up_geometry(c));
                    let fuse = ConvLayer::register(init, &format!("fuse{i}"), ConvGeometry::pointwise(2 * c, c));
                    let blocks = register_blocks(init, spec, &format!("dec{i}"), spec.blocks_per_stage);
                    decoder.push(UpLevel { up, fuse, blocks });
                }
                let extra = (spec.variant == Variant::Jnet).then(|| {
                    let up = ConvLayer::register(init, "extra.up", up_geometry(c));
                    (up, register_blocks(init, spec, "extra", spec.blocks_per_stage))
                });
                Body::U { encoder, middle, decoder, extra }
            }
        };
        let (head_out, head_shuffle) = match spec.variant {
            Variant::Jnet => (spec.out_channels, 1),
            _ => (spec.out_channels * spec.scale * spec.scale, spec.scale),
        };
        let head = ConvLayer::register(init, "head", ConvGeometry::same(c, head_out, 3));
        Ok(Self { spec: spec.clone(), stem, body, head, head_shuffle })
    }

    /// Graph only, for running existing parameters.
    pub fn layout(spec: &NetworkSpec) -> Result<Self> {
        let mut scratch = ParamStore::<f32>::new();
        Self::register(spec, &mut Initializer::zeroed(&mut scratch))
    }

    /// Parameters with this network's names and shapes, all weights zero.
    pub fn zero_params<T: Scalar>(&self) -> NetworkParams<T> {
        let mut store = ParamStore::new();
        Self::register(&self.spec, &mut Initializer::zeroed(&mut store)).expect("spec validated");
        store
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Fresh, seed-determined parameters.
    pub fn init_params<T: Scalar>(&self, rng: &mut SeededRng) -> NetworkParams<T> {
        let mut store = ParamStore::new();
        Self::register(&self.spec, &mut Initializer::new(&mut store, rng)).expect("spec validated");
        store
    }

    fn check_input<T: Scalar>(&self, params: &ParamStore<T>, x: &FeatureMap<T>) -> Result<()> {
        if x.channels() != self.spec.in_channels {
            return Err(Error::shape(format!(
                "network expects {} input channels, got {}",
                self.spec.in_channels,
                x.channels()
            )));
        }
        let d = self.spec.divisor();
        if x.height() % d != 0 || x.width() % d != 0 {
            return Err(Error::invalid(format!(
                "input {}x{} is not divisible by {d}",
                x.height(),
                x.width()
            )));
        }
        if params.len() <= self.head.bias.0 {
            return Err(Error::shape("parameter store does not match network layout"));
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, params: &ParamStore<T>, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.forward_train(params, x).map(|(y, _)| y)
    }

    /// Forward pass that keeps what [`Network::backward`] needs.
    pub fn forward_train<T: Scalar>(&self, p: &ParamStore<T>, x: &FeatureMap<T>) -> Result<(FeatureMap<T>, ForwardCache<T>)> {
        self.check_input(p, x)?;
        let mut cache = ForwardCache {
            stem_in: x.clone(),
            flat: Vec::new(),
            encoder: Vec::new(),
            middle: Vec::new(),
            decoder: Vec::new(),
            extra: None,
            head_in: FeatureMap::zeros(1, 1, 1, 1),
        };
        let mut h = self.stem.forward(p, x)?;
        match &self.body {
            Body::Flat(blocks) => h = run_blocks(blocks, p, h, &mut cache.flat)?,
            Body::U { encoder, middle, decoder, extra } => {
                let mut skips = Vec::with_capacity(encoder.len());
                for level in encoder {
                    let mut bc = Vec::new();
                    h = run_blocks(&level.blocks, p, h, &mut bc)?;
                    skips.push(h.clone());
                    let (next, dc) = match &level.down {
                        Down::Conv(conv) => (conv.forward(p, &h)?, DownCache::Conv(h)),
                        Down::Pool => {
                            let (y, c) = max_pool2(&h)?;
                            (y, DownCache::Pool(c))
                        }
                    };
                    cache.encoder.push((bc, dc));
                    h = next;
                }
                h = run_blocks(middle, p, h, &mut cache.middle)?;
                for (level, skip) in decoder.iter().zip(skips.iter().rev()) {
                    let up_in = h;
                    let up = pixel_shuffle(&level.up.forward(p, &up_in)?, 2)?;
                    let fuse_in = up.concat_channels(skip)?;
                    let mut bc = Vec::new();
                    h = run_blocks(&level.blocks, p, level.fuse.forward(p, &fuse_in)?, &mut bc)?;
                    cache.decoder.push((up_in, fuse_in, bc));
                }
                if let Some((up, blocks)) = extra {
                    let up_in = h;
                    let mut bc = Vec::new();
                    h = run_blocks(blocks, p, pixel_shuffle(&up.forward(p, &up_in)?, 2)?, &mut bc)?;
                    cache.extra = Some((up_in, bc));
                }
            }
        }
        let mut out = self.head.forward(p, &h)?;
        cache.head_in = h;
        if self.head_shuffle > 1 {
            out = pixel_shuffle(&out, self.head_shuffle)?;
        }
        if self.spec.global_residual {
            out.add_assign(&upsample_input(x, self.spec.scale)?);
        }
        Ok((out, cache))
    }

    /// Accumulates parameter gradients of a loss whose output gradient is `dout`.
    pub fn backward<T: Scalar>(&self, p: &ParamStore<T>, g: &mut Grads<T>, cache: &ForwardCache<T>, dout: &FeatureMap<T>) {
        let mut d = if self.head_shuffle > 1 {
            pixel_unshuffle(dout, self.head_shuffle).expect("head shape")
        } else {
            dout.clone()
        };
        d = self.head.backward(p, g, &cache.head_in, &d);
        match &self.body {
            Body::Flat(blocks) => d = back_blocks(blocks, p, g, &cache.flat, d),
            Body::U { encoder, middle, decoder, extra } => {
                if let (Some((up, blocks)), Some((up_in, bc))) = (extra, &cache.extra) {
                    d = back_blocks(blocks, p, g, bc, d);
                    d = up.backward(p, g, up_in, &pixel_unshuffle(&d, 2).expect("shape"));
                }
                let mut dskips = Vec::with_capacity(decoder.len());
                for (level, (up_in, fuse_in, bc)) in decoder.iter().zip(&cache.decoder).rev() {
                    d = back_blocks(&level.blocks, p, g, bc, d);
                    let dcat = level.fuse.backward(p, g, fuse_in, &d);
                    let (dup, dskip) = dcat.split_channels(self.spec.width);
                    dskips.push(dskip);
                    d = level.up.backward(p, g, up_in, &pixel_unshuffle(&dup, 2).expect("shape"));
                }
                // dskips now runs shallowest level first, matching `encoder`
                d = back_blocks(middle, p, g, &cache.middle, d);
                for ((level, (bc, dc)), dskip) in encoder.iter().zip(&cache.encoder).zip(dskips.iter()).rev() {
                    d = match (&level.down, dc) {
                        (Down::Conv(conv), DownCache::Conv(input)) => conv.backward(p, g, input, &d),
                        (Down::Pool, DownCache::Pool(pc)) => max_pool2_backward(pc, &d),
                        _ => unreachable!("downsample cache mismatch"),
                    };
                    d.add_assign(dskip);
                    d = back_blocks(&level.blocks, p, g, bc, d);
                }
            }
        }
        self.stem.backward(p, g, &cache.stem_in, &d);
    }
}

fn upsample_input<T: Scalar>(x: &FeatureMap<T>, scale: usize) -> Result<FeatureMap<T>> {
    let ups = x
        .to_images()
        .iter()
        .map(|im| bicubic_resize(im, scale, Direction::Up))
        .collect::<Result<Vec<_>>>()?;
    FeatureMap::from_images(&ups)
}

/// Seed-determined parameters for `spec`.
pub fn build_network<T: Scalar>(spec: &NetworkSpec, rng: &mut SeededRng) -> Result<NetworkParams<T>> {
    Ok(Network::layout(spec)?.init_params(rng))
}

/// Runs `params` on an LR batch, producing the SR batch.
pub fn forward<T: Scalar>(params: &NetworkParams<T>, spec: &NetworkSpec, lr_batch: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    let net = Network::layout(spec)?;
    check_params(&net, params)?;
    net.forward(params, lr_batch)
}

/// Verifies that `params` has the names and shapes `net` expects.
pub fn check_params<T: Scalar>(net: &Network, params: &NetworkParams<T>) -> Result<()> {
    let mut reference = ParamStore::<T>::new();
    Network::register(net.spec(), &mut Initializer::zeroed(&mut reference))?;
    reference.check_compatible(params)
}

/// Closed-form scalar parameter count.
pub fn count_params(spec: &NetworkSpec) -> usize {
    let c = spec.width;
    let conv = |cin: usize, cout: usize, k: usize| cout * k * k * cin + cout;
    let block = Block::param_count(spec.block_type, c, spec.residual_scale);
    let stage = spec.blocks_per_stage * block;
    let stem = conv(spec.in_channels, c, 3);
    let up = conv(c, 4 * c, 1);
    match spec.variant {
        Variant::FlatUnet => stem + spec.flat_blocks() * block + conv(c, spec.out_channels * spec.scale * spec.scale, 3),
        Variant::UnetPs | Variant::Jnet => {
            let down = match spec.downsample {
                DownsampleKind::StrideConv => conv(c, c, 2),
                DownsampleKind::MaxPool => 0,
            };
            let levels = spec.encoder_levels;
            let body = levels * (stage + down) + stage + levels * (up + conv(2 * c, c, 1) + stage);
            let tail = if spec.variant == Variant::Jnet {
                up + stage + conv(c, spec.out_channels, 3)
            } else {
                conv(c, spec.out_channels * spec.scale * spec.scale, 3)
            };
            stem + body + tail
        }
    }
}


/// Super-resolves one image of arbitrary size.
///
/// The input is reflect-padded up to the network's divisibility requirement
/// and the output cropped back to `scale×` the original extent. A
/// single-channel image given to an RGB model is replicated to three
/// channels and the outputs averaged; an RGB image given to a
/// single-channel model is processed one channel at a time.
pub fn super_resolve(net: &Network, params: &NetworkParams<f32>, lr: &ImageTensor) -> Result<ImageTensor> {
    let spec = net.spec();
    match (lr.channels(), spec.in_channels) {
        (a, b) if a == b => {}
        (1, 3) => return Ok(super_resolve(net, params, &lr.replicate(3)?)?.mean_channels()),
        (3, 1) => {
            let planes = (0..3)
                .map(|c| {
                    let plane = ImageTensor::from_vec(1, lr.height(), lr.width(), lr.plane(c).to_vec())?;
                    super_resolve(net, params, &plane)
                })
                .collect::<Result<Vec<_>>>()?;
            let (h, w) = (planes[0].height(), planes[0].width());
            let data = planes.into_iter().flat_map(|p| p.into_vec()).collect();
            return ImageTensor::from_vec(3, h, w, data);
        }
        (a, b) => return Err(Error::invalid(format!("cannot feed {a}-channel image to {b}-channel model"))),
    }
    let d = spec.divisor();
    let (h, w) = (lr.height(), lr.width());
    let pad = |n: usize| n.div_ceil(d) * d - n;
    let padded = lr.pad_reflect(pad(h), pad(w));
    let x = FeatureMap::<f32>::from_images(std::slice::from_ref(&padded))?;
    let y = net.forward(params, &x)?;
    let out = y.to_images().remove(0);
    let sr = out.crop(0, 0, h * spec.scale, w * spec.scale)?;
    let sr = if sr.channels() == lr.channels() { sr } else { sr.with_channels(lr.channels())? };
    Ok(sr.clamp01())
}
