//! Fully convolutional confidence estimator and gradient-based uncertainty maps.

use candle_core::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::ops::{host, leaky_relu};
use crate::nn::{BatchNorm2d, Conv2d, Mode, ParamBuilder, ParamStore};

/// `(in, out, stride)` of each 3×3, padding-1 layer.
pub const LAYERS: [(usize, usize, usize); 5] = [(1, 64, 2), (64, 64, 1), (64, 64, 2), (64, 64, 1), (64, 1, 2)];

pub const LEAKY_SLOPE: f64 = 0.2;

pub struct Discriminator {
    store: ParamStore,
    convs: Vec<Conv2d>,
    norms: Vec<BatchNorm2d>,
}

impl Discriminator {
    pub fn new(rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let (convs, norms) = build(&mut ParamBuilder::new(&mut store, rng))?;
        Ok(Self { store, convs, norms })
    }

    pub fn skeleton() -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (convs, norms) = build(&mut ParamBuilder::skeleton(&mut store, &mut rng))?;
        Ok(Self { store, convs, norms })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Scores a `B×1×H×W` probability map, returning `B×1×⌈H/8⌉×⌈W/8⌉` pre-activation confidence.
    pub fn forward(&self, map: &Tensor, mode: Mode) -> Result<Tensor> {
        let (b, c, h, w) = map.dims4()?;
        if c != 1 {
            return Err(Error::argument(format!(
                "discriminator expects a 1-channel map, got {c} channels"
            )));
        }
        let mut x = map.reshape((b, h, w, 1))?;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x)?;
            if let Some(norm) = self.norms.get(i) {
                x = leaky_relu(&norm.forward(&x, mode)?, LEAKY_SLOPE)?;
            }
        }
        let (_, oh, ow, _) = x.dims4()?;
        Ok(x.reshape((b, 1, oh, ow))?)
    }

    /// Per-pixel `|∂ Σ D(map) / ∂ map|`, without normalization.
    ///
    /// `map` must be a variable (see [`Discriminator::uncertainty`] for plain tensors).
    pub fn gradient_magnitude(&self, map: &Tensor) -> Result<Tensor> {
        let score = self.forward(map, Mode::Eval)?.sum_all()?;
        let grads = score.backward()?;
        let g = grads
            .get(map)
            .ok_or_else(|| Error::Contract("uncertainty needs an input that tracks gradients".into()))?;
        Ok(g.abs()?)
    }

    /// Gradient magnitude min-max normalized to `[0, 1]` per image.
    pub fn uncertainty_map(&self, map: &Tensor) -> Result<Tensor> {
        normalize_per_image(&self.gradient_magnitude(map)?)
    }

    /// Wraps a detached probability map in a fresh variable and computes its uncertainty.
    pub fn uncertainty(&self, probs: &Tensor) -> Result<Tensor> {
        let v = Var::from_tensor(&probs.detach())?;
        self.uncertainty_map(v.as_tensor())
    }
}

fn build(b: &mut ParamBuilder) -> Result<(Vec<Conv2d>, Vec<BatchNorm2d>)> {
    let mut convs = Vec::new();
    let mut norms = Vec::new();
    for (i, &(cin, cout, stride)) in LAYERS.iter().enumerate() {
        convs.push(Conv2d::new(
            &mut b.sub(format!("conv{}", i + 1)),
            cin,
            cout,
            3,
            stride,
            1,
            true,
        )?);
        if i + 1 < LAYERS.len() {
            norms.push(BatchNorm2d::new(&mut b.sub(format!("bn{}", i + 1)), cout)?);
        }
    }
    Ok((convs, norms))
}

/// Rescales each image of a `B×1×H×W` map to `[0, 1]`; flat images become zero.
pub fn normalize_per_image(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let mut v = host(x)?;
    let n = c * h * w;
    for img in v.chunks_mut(n.max(1)) {
        let lo = img.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = img.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if hi > lo {
            img.iter_mut().for_each(|p| *p = (*p - lo) / (hi - lo));
        } else {
            img.iter_mut().for_each(|p| *p = 0.0);
        }
    }
    Ok(Tensor::from_vec(v, (b, c, h, w), x.device())?.to_dtype(x.dtype())?)
}
