//! Latent embedding of feature pyramids and the cosine contradiction loss.

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{FeaturePyramid, PYRAMID_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::ops::{global_avg_pool, host};
use crate::nn::{Linear, ParamBuilder, ParamStore};

/// Length of the pooled, concatenated pyramid descriptor.
pub const DESCRIPTOR_LEN: usize = PYRAMID_CHANNELS[0] + PYRAMID_CHANNELS[1] + PYRAMID_CHANNELS[2] + PYRAMID_CHANNELS[3];

/// Lower bound on the product of norms in the cosine denominator.
pub const NORM_EPS: f64 = 1e-8;

/// One bias-free fully connected map shared by both views.
pub struct Similarity {
    store: ParamStore,
    fc: Linear,
    latent_dim: usize,
}

impl Similarity {
    pub fn new(latent_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let fc = Linear::new(
            &mut ParamBuilder::new(&mut store, rng).sub("fc"),
            DESCRIPTOR_LEN,
            latent_dim,
            false,
        )?;
        Ok(Self { store, fc, latent_dim })
    }

    pub fn skeleton(latent_dim: usize) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fc = Linear::new(
            &mut ParamBuilder::skeleton(&mut store, &mut rng).sub("fc"),
            DESCRIPTOR_LEN,
            latent_dim,
            false,
        )?;
        Ok(Self { store, fc, latent_dim })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// `B×K` latent codes.
    pub fn embed(&self, pyramid: &FeaturePyramid) -> Result<Tensor> {
        Ok(self.fc.forward(&describe(pyramid)?)?)
    }
}

/// Pools every level to a channel vector and concatenates them, giving `B×3840`.
pub fn describe(pyramid: &FeaturePyramid) -> Result<Tensor> {
    for (i, level) in pyramid.levels.iter().enumerate() {
        let c = level.dim(3)?;
        if c != PYRAMID_CHANNELS[i] {
            return Err(Error::argument(format!(
                "pyramid level {} has {c} channels, expected {}",
                i + 1,
                PYRAMID_CHANNELS[i]
            )));
        }
    }
    let pooled = pyramid.levels.iter().map(global_avg_pool).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&pooled, 1)?)
}

#[derive(Debug, Clone)]
pub struct LatentLoss {
    /// Batch-mean cosine similarity, a scalar tensor.
    pub value: Tensor,
    /// Set when some code in the batch had (near) zero norm.
    pub degenerate: bool,
}

/// Batch-averaged cosine similarity between two `B×K` code batches.
pub fn latent_loss(code_s: &Tensor, code_c: &Tensor) -> Result<LatentLoss> {
    if code_s.dims() != code_c.dims() || code_s.rank() != 2 {
        return Err(Error::argument(format!(
            "latent codes must be equal B×K matrices, got {:?} and {:?}",
            code_s.dims(),
            code_c.dims()
        )));
    }
    // the tiny offset keeps the square-root derivative finite at zero
    let norm = |t: &Tensor| -> Result<Tensor> { Ok((t.sqr()?.sum_keepdim(1)? + 1e-24)?.sqrt()?) };
    let dot = (code_s * code_c)?.sum_keepdim(1)?;
    let denom = (norm(code_s)? * norm(code_c)?)?;
    let degenerate = host(&denom)?.iter().any(|d| (*d as f64) < NORM_EPS);
    let floor = Tensor::full(NORM_EPS, denom.shape(), &Device::Cpu)?.to_dtype(denom.dtype())?;
    let cos = dot.div(&denom.maximum(&floor)?)?;
    Ok(LatentLoss {
        value: cos.mean_all()?,
        degenerate,
    })
}
