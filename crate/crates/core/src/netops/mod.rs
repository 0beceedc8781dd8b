//! Differentiable building blocks with hand-written backward passes.
//!
//! Every op comes as a forward function returning its output plus whatever
//! it needs for the backward pass, and a backward function that maps the
//! output gradient to the input gradient while accumulating parameter
//! gradients into caller-owned buffers.

mod block;
mod conv;
mod gate;
mod norm;
mod params;
mod pool;
mod sca;
mod shuffle;

pub use block::{BaselineBlock, BaselineCache, Block, BlockCache, BlockKind, NaiveBlock, NaiveCache};
pub use conv::{conv2d, conv2d_backward, depthwise3x3, depthwise3x3_backward, relu, relu_backward, ConvGeometry, ConvLayer};
pub use gate::{simple_gate, simple_gate_backward};
pub use norm::{layer_norm, layer_norm_backward, LayerNormCache, LN_EPS};
pub use params::{Grads, Init, Initializer, Param, ParamId, ParamStore};
pub use pool::{max_pool2, max_pool2_backward, MaxPoolCache};
pub use sca::{sca, sca_backward, ScaCache};
pub use shuffle::{pixel_shuffle, pixel_unshuffle};
