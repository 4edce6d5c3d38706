//! Structure-aware segmentation losses, adversarial losses and their composition.
//!
//! Maps are `B×1×H×W`. Every function works in the dtype of its inputs, so the
//! gradient checks can run in double precision.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::decoder::PredictionPair;
use crate::error::{Error, Result};
use crate::nn::ops::{sigmoid, softplus};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub latent_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.01,
            lambda2: 0.01,
            latent_weight: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("latent_weight", self.latent_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config {
                    field: name.into(),
                    message: format!("must be a finite non-negative number, got {v}"),
                });
            }
        }
        Ok(())
    }
}

pub const EDGE_KERNEL: usize = 31;

/// `ω = 1 + 5·|avg_pool(Y) − Y|`, pooled with stride 1 and replicate padding.
pub fn edge_weight(y: &Tensor, kernel: usize) -> Result<Tensor> {
    if kernel % 2 == 0 {
        return Err(Error::argument("edge pooling kernel must be odd"));
    }
    let (b, c, h, w) = y.dims4()?;
    let values = y.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    if values.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::argument("edge weight needs a binary mask"));
    }
    let r = (kernel / 2) as isize;
    let area = (kernel * kernel) as f64;
    let (ph, pw) = (h + kernel - 1, w + kernel - 1);
    let mut out = vec![0f64; values.len()];
    let mut integral = vec![0f64; (ph + 1) * (pw + 1)];
    for (plane, dst) in values.chunks(h * w).zip(out.chunks_mut(h * w)) {
        // summed-area table of the replicate-padded plane
        for i in 0..ph {
            let si = (i as isize - r).clamp(0, h as isize - 1) as usize;
            let mut row = 0.0;
            for j in 0..pw {
                let sj = (j as isize - r).clamp(0, w as isize - 1) as usize;
                row += plane[si * w + sj];
                integral[(i + 1) * (pw + 1) + j + 1] = integral[i * (pw + 1) + j + 1] + row;
            }
        }
        for i in 0..h {
            for j in 0..w {
                let (i1, j1) = (i + kernel, j + kernel);
                let s = integral[i1 * (pw + 1) + j1] - integral[i * (pw + 1) + j1] - integral[i1 * (pw + 1) + j]
                    + integral[i * (pw + 1) + j];
                dst[i * w + j] = 1.0 + 5.0 * (s / area - plane[i * w + j]).abs();
            }
        }
    }
    Ok(Tensor::from_vec(out, (b, c, h, w), y.device())?.to_dtype(y.dtype())?)
}

fn per_image_sum(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(1)?.sum(1)?)
}

fn check_shapes(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::argument(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Per-pixel binary cross-entropy of `sigmoid(logits)` against `y`.
pub fn bce_with_logits(logits: &Tensor, y: &Tensor) -> Result<Tensor> {
    Ok((softplus(logits)? - (logits * y)?)?)
}

/// `Σ ω·bce / Σ ω` per image, averaged over the batch.
pub fn weighted_ce(logits: &Tensor, y: &Tensor, omega: &Tensor) -> Result<Tensor> {
    check_shapes(logits, y, "weighted_ce")?;
    check_shapes(logits, omega, "weighted_ce")?;
    let total = logits
        .sum_all()?
        .to_dtype(candle_core::DType::F64)?
        .to_scalar::<f64>()?;
    if total.is_nan() {
        return Err(Error::Contract("weighted_ce received NaN logits".into()));
    }
    let num = per_image_sum(&(bce_with_logits(logits, y)? * omega)?)?;
    let den = per_image_sum(omega)?;
    Ok((num / den)?.mean_all()?)
}

/// `1 − (inter + 1)/(union − inter + 1)` with ω-weighted per-image sums, averaged over the batch.
pub fn boundary_iou(prob: &Tensor, y: &Tensor, omega: &Tensor) -> Result<Tensor> {
    check_shapes(prob, y, "boundary_iou")?;
    check_shapes(prob, omega, "boundary_iou")?;
    let inter = per_image_sum(&((prob * y)? * omega)?)?;
    let union = per_image_sum(&((prob + y)? * omega)?)?;
    let ratio = ((&inter + 1.0)? / ((union - &inter)? + 1.0)?)?;
    Ok(ratio.affine(-1.0, 1.0)?.mean_all()?)
}

/// Weighted cross-entropy plus boundary IoU, both using the edge-aware weight of `y`.
pub fn structure_loss(logits: &Tensor, y: &Tensor) -> Result<Tensor> {
    let omega = edge_weight(y, EDGE_KERNEL)?;
    let ce = weighted_ce(logits, y, &omega)?;
    let iou = boundary_iou(&sigmoid(logits)?, y, &omega)?;
    Ok((ce + iou)?)
}

/// Mean of the structure losses of the initial and refined maps.
pub fn task_structure_loss(pair: &PredictionPair, y: &Tensor) -> Result<Tensor> {
    let init = structure_loss(&pair.init_logits, y)?;
    let refined = structure_loss(&pair.refined_logits, y)?;
    Ok(((init + refined)? * 0.5)?)
}

/// Cross-entropy of the confidence scores against the all-ones target.
pub fn generator_adv_loss(conf: &Tensor) -> Result<Tensor> {
    Ok(softplus(&conf.neg()?)?.mean_all()?)
}

/// Prediction scores pushed to zero plus ground-truth scores pushed to one.
pub fn discriminator_loss(conf_pred: &Tensor, conf_gt: &Tensor) -> Result<Tensor> {
    let fake = softplus(conf_pred)?.mean_all()?;
    let real = softplus(&conf_gt.neg()?)?.mean_all()?;
    Ok((fake + real)?)
}

/// Generator objective of one task: structure loss plus `lambda` times the adversarial term.
///
/// With `conf = None` (adversarial branch disabled) the structure loss is returned alone.
pub fn generator_objective(structure: &Tensor, conf: Option<&Tensor>, lambda: f64) -> Result<Tensor> {
    match conf {
        Some(conf) if lambda != 0.0 => Ok((structure + (generator_adv_loss(conf)? * lambda)?)?),
        _ => Ok(structure.clone()),
    }
}

/// The three composite objectives `(L_sod, L_cod, L_conf)`.
#[derive(Debug, Clone)]
pub struct Objectives {
    pub sod: Tensor,
    pub cod: Tensor,
    pub confidence: Tensor,
}

pub struct ObjectiveInputs<'a> {
    pub sod_structure: &'a Tensor,
    pub sod_conf: &'a Tensor,
    pub cod_structure: &'a Tensor,
    pub cod_conf: &'a Tensor,
    pub sod_conf_pred: &'a Tensor,
    pub sod_conf_gt: &'a Tensor,
    pub cod_conf_pred: &'a Tensor,
    pub cod_conf_gt: &'a Tensor,
}

pub fn composite_objectives(x: &ObjectiveInputs, weights: &LossWeights) -> Result<Objectives> {
    Ok(Objectives {
        sod: generator_objective(x.sod_structure, Some(x.sod_conf), weights.lambda1)?,
        cod: generator_objective(x.cod_structure, Some(x.cod_conf), weights.lambda2)?,
        confidence: (discriminator_loss(x.sod_conf_pred, x.sod_conf_gt)?
            + discriminator_loss(x.cod_conf_pred, x.cod_conf_gt)?)?,
    })
}
