//! Networks built on the tape: the mini U-Net, the downstream classifier,
//! and the parameter store they share.

mod classifier;
pub mod layers;
mod optim;
mod params;
mod unet;

pub use classifier::{Classifier, ClassifierConfig};
pub use layers::{ConvSpec, EmbeddingSpec, GroupNormSpec, LinearSpec};
pub use optim::Adam;
pub use params::{LayoutEntry, Param, ParamLayout, ParamStore};
pub use unet::{AttnBlock, Block, ResBlock, UNet, UNetConfig};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `[sin(t f_0) .. sin(t f_{h-1}), cos(t f_0) .. cos(t f_{h-1})]` with
/// `h = dim / 2` and `f_i = 10000^(-i / (h - 1))`.
pub fn sinusoidal_time_embed<T: Scalar>(t: &[usize], dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "time embedding dim {dim} must be even and positive"
        )));
    }
    if t.is_empty() {
        return Err(Error::invalid("no timesteps"));
    }
    let half = dim / 2;
    let step = if half > 1 {
        10000f64.ln() / (half - 1) as f64
    } else {
        0.0
    };
    let mut out = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let ti = ti as f64;
        out.extend((0..half).map(|i| T::lit((ti * (-step * i as f64).exp()).sin())));
        out.extend((0..half).map(|i| T::lit((ti * (-step * i as f64).exp()).cos())));
    }
    Tensor::new(vec![t.len(), dim], out)
}
