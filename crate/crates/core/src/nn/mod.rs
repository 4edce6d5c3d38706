//! Minimal neural-network toolkit on top of `candle-core`.
//!
//! Everything here works on channels-last tensors; convolutions are lowered to
//! a single matrix product, which is much faster to differentiate on CPU than
//! the backend's native convolution.

mod adam;
mod layers;
pub mod ops;
mod store;

pub use adam::{clip_scale, grad_norm, Adam, AdamConfig, Moments};
pub use layers::{kernel_from_oihw, kernel_to_oihw, BatchNorm2d, Conv2d, Linear, Mode};
pub use store::{Init, ParamBuilder, ParamStore};
