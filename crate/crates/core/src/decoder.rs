//! Shared prediction decoder.
//!
//! The initial map is produced from dual-attention features of `f4`, `f3`, `f2`.
//! Holistic attention then re-weights `f2` with the initial map, the result runs
//! through private copies of backbone stages 3 and 4, and the refined map fuses
//! those with a compressed `f1`. Every concatenation first resizes its inputs to
//! the largest grid among them.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{convert_backbone, FeaturePyramid, Stage, PYRAMID_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::ops::{global_avg_pool, resize_bilinear, sigmoid, softmax_last};
use crate::nn::{Conv2d, Init, Linear, Mode, ParamBuilder, ParamStore};

/// Output channels of every fusion convolution.
pub const FUSION_CHANNELS: usize = 32;

/// Grid on which the refined head concatenates its four inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefineGrid {
    /// Stride 4 (the grid of `f1`).
    F1,
    /// Stride 8 (the grid of `f2`).
    F2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub refine_grid: RefineGrid,
    pub blur_kernel: usize,
    pub blur_sigma: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            refine_grid: RefineGrid::F1,
            blur_kernel: 31,
            blur_sigma: 4.0,
        }
    }
}

/// Decoder convolutions use the uniform `1/sqrt(fan_in)` initializer; without
/// normalization layers a fan-out scaled normal blows up the logits.
#[allow(clippy::too_many_arguments)]
fn conv(b: &mut ParamBuilder, cin: usize, cout: usize, k: usize, s: usize, p: usize, bias: bool) -> Result<Conv2d> {
    let bound = 1.0 / ((cin * k * k) as f64).sqrt();
    Conv2d::with_init(b, cin, cout, k, s, p, bias, Init::Uniform { bound })
}

/// Position attention plus channel attention, compressed to [`FUSION_CHANNELS`].
///
/// All convolutions are bias-free, so a zero input maps to a zero output.
pub struct DualAttention {
    reduce: Conv2d,
    query: Conv2d,
    key: Conv2d,
    value: Conv2d,
    gamma_position: Var,
    gamma_channel: Var,
    compress: Conv2d,
}

impl DualAttention {
    pub fn new(b: &mut ParamBuilder, channels: usize) -> Result<Self> {
        let inner = (channels / 4).max(1);
        let qk = (inner / 8).max(1);
        Ok(Self {
            reduce: conv(&mut b.sub("reduce"), channels, inner, 1, 1, 0, false)?,
            query: conv(&mut b.sub("query"), inner, qk, 1, 1, 0, false)?,
            key: conv(&mut b.sub("key"), inner, qk, 1, 1, 0, false)?,
            value: conv(&mut b.sub("value"), inner, inner, 1, 1, 0, false)?,
            gamma_position: b.param("gamma_position", &[1], Init::Constant(0.0))?,
            gamma_channel: b.param("gamma_channel", &[1], Init::Constant(0.0))?,
            compress: conv(&mut b.sub("compress"), inner, FUSION_CHANNELS, 3, 1, 1, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let feat = self.reduce.forward(x)?.relu()?;
        let (b, h, w, c) = feat.dims4()?;
        let n = h * w;
        let flat = feat.reshape((b, n, c))?;

        let q = self.query.forward(&feat)?.reshape((b, n, ()))?;
        let k = self.key.forward(&feat)?.reshape((b, n, ()))?;
        let v = self.value.forward(&feat)?.reshape((b, n, c))?;
        let attn = softmax_last(&q.matmul(&k.t()?)?)?;
        let position = attn
            .matmul(&v)?
            .broadcast_mul(self.gamma_position.as_tensor())?
            .add(&flat)?;

        let energy = flat.t()?.matmul(&flat)?;
        let energy = energy.max_keepdim(2)?.broadcast_sub(&energy)?;
        let attn = softmax_last(&energy)?;
        let channel = flat
            .matmul(&attn.t()?)?
            .broadcast_mul(self.gamma_channel.as_tensor())?
            .add(&flat)?;

        let fused = (position + channel)?.reshape((b, h, w, c))?;
        self.compress.forward(&fused)
    }
}

/// Residual block with squeeze-and-excitation style channel gating.
pub struct ResidualChannelAttention {
    conv1: Conv2d,
    conv2: Conv2d,
    squeeze: Linear,
    excite: Linear,
}

impl ResidualChannelAttention {
    pub fn new(b: &mut ParamBuilder, channels: usize) -> Result<Self> {
        let reduced = (channels / 16).max(1);
        Ok(Self {
            conv1: conv(&mut b.sub("conv1"), channels, channels, 3, 1, 1, false)?,
            conv2: conv(&mut b.sub("conv2"), channels, channels, 3, 1, 1, false)?,
            squeeze: Linear::new(&mut b.sub("squeeze"), channels, reduced, false)?,
            excite: Linear::new(&mut b.sub("excite"), reduced, channels, false)?,
        })
    }

    /// The residual branch before gating.
    pub fn transform(&self, x: &Tensor) -> Result<Tensor> {
        self.conv2.forward(&self.conv1.forward(x)?.relu()?)
    }

    /// Per-channel gates in `(0, 1)`, shaped `B×1×1×C`.
    pub fn gate(&self, t: &Tensor) -> Result<Tensor> {
        let (b, _, _, c) = t.dims4()?;
        let s = self.squeeze.forward(&global_avg_pool(t)?)?.relu()?;
        Ok(sigmoid(&self.excite.forward(&s)?)?.reshape((b, 1, 1, c))?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let t = self.transform(x)?;
        let g = self.gate(&t)?;
        Ok((x + t.broadcast_mul(&g)?)?)
    }

    /// Forward pass with every gate replaced by `value`.
    pub fn forward_with_gate(&self, x: &Tensor, value: f64) -> Result<Tensor> {
        let t = self.transform(x)?;
        Ok((x + (t * value)?)?)
    }
}

/// Normalized 1-D Gaussian taps; their outer product is the normalized 2-D kernel.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - half;
            (-(x * x) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// `n×n` matrix applying the zero-padded, centered 1-D filter along one axis.
fn blur_matrix(taps: &[f64], n: usize) -> Vec<f32> {
    let half = (taps.len() / 2) as isize;
    let mut m = vec![0f32; n * n];
    for i in 0..n {
        for j in 0..n {
            let d = j as isize - i as isize + half;
            if d >= 0 && (d as usize) < taps.len() {
                m[i * n + j] = taps[d as usize] as f32;
            }
        }
    }
    m
}

/// Enlarges the attended region of an initial prediction before re-weighting features.
///
/// The Gaussian is separable, so the blur is two matrix products.
pub struct HolisticAttention {
    taps: Vec<f64>,
}

impl HolisticAttention {
    pub fn new(size: usize, sigma: f64) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::argument("blur kernel size must be odd"));
        }
        Ok(Self {
            taps: gaussian_taps(size, sigma),
        })
    }

    fn blur(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w) = x.dims3()?;
        let rows = Tensor::from_vec(blur_matrix(&self.taps, h), (h, h), &Device::Cpu)?.to_dtype(x.dtype())?;
        let cols = Tensor::from_vec(blur_matrix(&self.taps, w), (w, w), &Device::Cpu)?.to_dtype(x.dtype())?;
        // both passes as plain 2-D matmuls; candle mishandles a stride-0 batched lhs
        let y = x.reshape((b * h, w))?.matmul(&cols.t()?)?;
        let y = y
            .reshape((b, h, w))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * w, h))?;
        let y = y.matmul(&rows.t()?)?.reshape((b, w, h))?;
        Ok(y.transpose(1, 2)?.contiguous()?)
    }

    /// Attention weights `max(blur(σ(logits)), σ(logits))`, shaped `B×h×w×1`.
    pub fn weights(&self, init_logits: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = init_logits.dims4()?;
        if c != 1 {
            return Err(Error::argument("initial map must have one channel"));
        }
        let prob = sigmoid(init_logits)?;
        let blurred = self.blur(&prob.reshape((b, h, w))?)?.reshape((b, h, w, 1))?;
        Ok(blurred.maximum(&prob)?)
    }

    /// Re-weights `features` (`B×h×w×C`) by the attention derived from `init_logits` (`B×h×w×1`).
    pub fn forward(&self, init_logits: &Tensor, features: &Tensor) -> Result<Tensor> {
        let (b, h, w, _) = init_logits.dims4()?;
        let (fb, fh, fw, _) = features.dims4()?;
        if (b, h, w) != (fb, fh, fw) {
            return Err(Error::argument(format!(
                "attention map {b}x{h}x{w} does not match features {fb}x{fh}x{fw}"
            )));
        }
        Ok(features.broadcast_mul(&self.weights(init_logits)?)?)
    }
}

/// Initial and refined logits at input resolution, both `B×1×H×W`.
#[derive(Debug, Clone)]
pub struct PredictionPair {
    pub init_logits: Tensor,
    pub refined_logits: Tensor,
}

fn fuse(parts: &[&Tensor]) -> Result<Tensor> {
    let (mut gh, mut gw) = (0, 0);
    for p in parts {
        let d = p.dims();
        if d[1] * d[2] > gh * gw {
            (gh, gw) = (d[1], d[2]);
        }
    }
    fuse_at(parts, gh, gw)
}

fn fuse_at(parts: &[&Tensor], h: usize, w: usize) -> Result<Tensor> {
    let resized = parts
        .iter()
        .map(|p| resize_bilinear(p, h, w))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&resized, 3)?)
}

fn to_map(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let b = x.dim(0)?;
    Ok(resize_bilinear(x, h, w)?.reshape((b, 1, h, w))?)
}

pub struct Decoder {
    store: ParamStore,
    config: DecoderConfig,
    da4: DualAttention,
    da3: DualAttention,
    da2: DualAttention,
    re_43_init: ResidualChannelAttention,
    conv_43_init: Conv2d,
    re_init: ResidualChannelAttention,
    cls_init: Conv2d,
    holistic: HolisticAttention,
    r3: Stage,
    r4: Stage,
    da_r4: DualAttention,
    da_r3: DualAttention,
    da_r2: DualAttention,
    re_43: ResidualChannelAttention,
    conv_43: Conv2d,
    re_432: ResidualChannelAttention,
    conv_432: Conv2d,
    conv_f1: Conv2d,
    re_refined: ResidualChannelAttention,
    cls_refined: Conv2d,
}

impl Decoder {
    pub fn new(config: DecoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let parts = Parts::build(&mut ParamBuilder::new(&mut store, rng))?;
        Self::assemble(store, config, parts)
    }

    pub fn skeleton(config: DecoderConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let parts = Parts::build(&mut ParamBuilder::skeleton(&mut store, &mut rng))?;
        Self::assemble(store, config, parts)
    }

    fn assemble(store: ParamStore, config: DecoderConfig, p: Parts) -> Result<Self> {
        Ok(Self {
            store,
            config,
            da4: p.da4,
            da3: p.da3,
            da2: p.da2,
            re_43_init: p.re_43_init,
            conv_43_init: p.conv_43_init,
            re_init: p.re_init,
            cls_init: p.cls_init,
            holistic: HolisticAttention::new(config.blur_kernel, config.blur_sigma)?,
            r3: p.r3,
            r4: p.r4,
            da_r4: p.da_r4,
            da_r3: p.da_r3,
            da_r2: p.da_r2,
            re_43: p.re_43,
            conv_43: p.conv_43,
            re_432: p.re_432,
            conv_432: p.conv_432,
            conv_f1: p.conv_f1,
            re_refined: p.re_refined,
            cls_refined: p.cls_refined,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    /// Initializes the private stage-3/stage-4 copies from a backbone store.
    pub fn load_backbone_stages(&self, source: &HashMap<String, Tensor>, origin: &Path) -> Result<()> {
        let entries = self.store.tensors().into_iter().filter_map(|(name, t)| {
            let key = if let Some(rest) = name.strip_prefix("r3.") {
                format!("layer3.{rest}")
            } else if let Some(rest) = name.strip_prefix("r4.") {
                format!("layer4.{rest}")
            } else {
                return None;
            };
            Some((name, key, t))
        });
        let converted = convert_backbone(entries, source, origin)?;
        self.store.load_subset(&converted, origin)
    }

    /// Produces the initial and refined logit maps at the input resolution
    /// (four times the `f1` grid).
    pub fn forward(&self, pyramid: &FeaturePyramid, mode: Mode) -> Result<PredictionPair> {
        pyramid.validate()?;
        let [f1, f2, f3, f4] = &pyramid.levels;
        let (_, h1, w1, _) = f1.dims4()?;
        let (out_h, out_w) = (h1 * 4, w1 * 4);

        let d4 = self.da4.forward(f4)?;
        let d3 = self.da3.forward(f3)?;
        let d2 = self.da2.forward(f2)?;
        let f43_init = self
            .conv_43_init
            .forward(&self.re_43_init.forward(&fuse(&[&d4, &d3])?)?)?;
        let init = self
            .cls_init
            .forward(&self.re_init.forward(&fuse(&[&d4, &f43_init, &d2])?)?)?;

        let (_, h2, w2, _) = f2.dims4()?;
        let init_grid = resize_bilinear(&init, h2, w2)?;
        let fr2 = self.holistic.forward(&init_grid, f2)?;
        let fr3 = self.r3.forward(&fr2, mode)?;
        let fr4 = self.r4.forward(&fr3, mode)?;

        let dr4 = self.da_r4.forward(&fr4)?;
        let dr3 = self.da_r3.forward(&fr3)?;
        let dr2 = self.da_r2.forward(&fr2)?;
        let f43 = self.conv_43.forward(&self.re_43.forward(&fuse(&[&dr4, &dr3])?)?)?;
        let f432 = self
            .conv_432
            .forward(&self.re_432.forward(&fuse(&[&dr4, &f43, &dr2])?)?)?;
        let low = self.conv_f1.forward(f1)?;
        let (gh, gw) = match self.config.refine_grid {
            RefineGrid::F1 => (h1, w1),
            RefineGrid::F2 => (h2, w2),
        };
        let refined =
            self.cls_refined
                .forward(&self.re_refined.forward(&fuse_at(&[&dr4, &f43, &f432, &low], gh, gw)?)?)?;

        Ok(PredictionPair {
            init_logits: to_map(&init, out_h, out_w)?,
            refined_logits: to_map(&refined, out_h, out_w)?,
        })
    }
}

struct Parts {
    da4: DualAttention,
    da3: DualAttention,
    da2: DualAttention,
    re_43_init: ResidualChannelAttention,
    conv_43_init: Conv2d,
    re_init: ResidualChannelAttention,
    cls_init: Conv2d,
    r3: Stage,
    r4: Stage,
    da_r4: DualAttention,
    da_r3: DualAttention,
    da_r2: DualAttention,
    re_43: ResidualChannelAttention,
    conv_43: Conv2d,
    re_432: ResidualChannelAttention,
    conv_432: Conv2d,
    conv_f1: Conv2d,
    re_refined: ResidualChannelAttention,
    cls_refined: Conv2d,
}

impl Parts {
    fn build(b: &mut ParamBuilder) -> Result<Self> {
        let [c1, c2, c3, c4] = PYRAMID_CHANNELS;
        let f = FUSION_CHANNELS;
        Ok(Self {
            da4: DualAttention::new(&mut b.sub("da4"), c4)?,
            da3: DualAttention::new(&mut b.sub("da3"), c3)?,
            da2: DualAttention::new(&mut b.sub("da2"), c2)?,
            re_43_init: ResidualChannelAttention::new(&mut b.sub("re_43_init"), 2 * f)?,
            conv_43_init: conv(&mut b.sub("conv_43_init"), 2 * f, f, 3, 1, 1, false)?,
            re_init: ResidualChannelAttention::new(&mut b.sub("re_init"), 3 * f)?,
            cls_init: conv(&mut b.sub("cls_init"), 3 * f, 1, 3, 1, 1, true)?,
            r3: Stage::new(&mut b.sub("r3"), 2)?,
            r4: Stage::new(&mut b.sub("r4"), 3)?,
            da_r4: DualAttention::new(&mut b.sub("da_r4"), c4)?,
            da_r3: DualAttention::new(&mut b.sub("da_r3"), c3)?,
            da_r2: DualAttention::new(&mut b.sub("da_r2"), c2)?,
            re_43: ResidualChannelAttention::new(&mut b.sub("re_43"), 2 * f)?,
            conv_43: conv(&mut b.sub("conv_43"), 2 * f, f, 3, 1, 1, false)?,
            re_432: ResidualChannelAttention::new(&mut b.sub("re_432"), 3 * f)?,
            conv_432: conv(&mut b.sub("conv_432"), 3 * f, f, 3, 1, 1, false)?,
            conv_f1: conv(&mut b.sub("conv_f1"), c1, f, 3, 1, 1, false)?,
            re_refined: ResidualChannelAttention::new(&mut b.sub("re_refined"), 4 * f)?,
            cls_refined: conv(&mut b.sub("cls_refined"), 4 * f, 1, 3, 1, 1, true)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::host;
    use candle_core::DType;

    fn zeros_nhwc(b: usize, h: usize, w: usize, c: usize) -> Result<Tensor> {
        Ok(Tensor::zeros((b, h, w, c), DType::F32, &Device::Cpu)?)
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn random(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
        use rand::Rng;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f32> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn dual(channels: usize) -> (ParamStore, DualAttention) {
        let mut store = ParamStore::new();
        let mut r = rng();
        let da = DualAttention::new(&mut ParamBuilder::new(&mut store, &mut r), channels).unwrap();
        // non-zero attention weights so both branches matter
        da.gamma_position
            .set(&Tensor::new(&[0.7f32], &Device::Cpu).unwrap())
            .unwrap();
        da.gamma_channel
            .set(&Tensor::new(&[0.3f32], &Device::Cpu).unwrap())
            .unwrap();
        (store, da)
    }

    #[test]
    fn dual_attention_zero_in_zero_out() {
        let (_s, da) = dual(64);
        let y = da.forward(&zeros_nhwc(2, 5, 4, 64).unwrap()).unwrap();
        assert_eq!(y.dims(), &[2, 5, 4, FUSION_CHANNELS]);
        assert!(host(&y).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dual_attention_is_batch_permutation_equivariant() {
        let (_s, da) = dual(64);
        let a = random((1, 4, 4, 64), 1);
        let b = random((1, 4, 4, 64), 2);
        let ab = da.forward(&Tensor::cat(&[&a, &b], 0).unwrap()).unwrap();
        let ba = da.forward(&Tensor::cat(&[&b, &a], 0).unwrap()).unwrap();
        let ab0 = host(&ab.narrow(0, 0, 1).unwrap()).unwrap();
        let ba1 = host(&ba.narrow(0, 1, 1).unwrap()).unwrap();
        for (x, y) in ab0.iter().zip(&ba1) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn residual_channel_attention_contracts() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let re = ResidualChannelAttention::new(&mut ParamBuilder::new(&mut store, &mut r), 64).unwrap();
        let x = random((2, 3, 5, 64), 3);
        let y = re.forward(&x).unwrap();
        assert_eq!(y.dims(), x.dims());

        let forced = host(&re.forward_with_gate(&x, 1.0).unwrap()).unwrap();
        let expect = host(&(&x + re.transform(&x).unwrap()).unwrap()).unwrap();
        assert_eq!(forced, expect);

        let z = re.forward(&zeros_nhwc(1, 3, 3, 64).unwrap()).unwrap();
        assert!(host(&z).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn holistic_attention_saturated_and_constant() {
        let ha = HolisticAttention::new(31, 4.0).unwrap();
        let f = random((1, 7, 7, 8), 4);

        let sat = Tensor::full(1e4f32, (1, 7, 7, 1), &Device::Cpu).unwrap();
        let y = host(&ha.forward(&sat, &f).unwrap()).unwrap();
        assert_eq!(y, host(&f).unwrap());

        let c = 0.4f32;
        let constant = Tensor::full(c, (1, 7, 7, 1), &Device::Cpu).unwrap();
        let w = host(&ha.weights(&constant).unwrap()).unwrap();
        let s = 1.0 / (1.0 + (-c).exp());
        assert!(w.iter().all(|v| (v - s).abs() < 1e-6), "{w:?}");
    }

    #[test]
    fn holistic_attention_spreads_a_peak() {
        // brute-force Gaussian convolution with zero padding on a non-square batch of two
        let (b, n, m, k, sigma) = (2usize, 5usize, 7usize, 31usize, 4.0f64);
        let peaks = [(1usize, 5usize), (3, 2)];
        let mut logits = vec![-6f32; b * n * m];
        for (img, (pi, pj)) in peaks.iter().enumerate() {
            logits[img * n * m + pi * m + pj] = 6.0;
        }
        let prob: Vec<f64> = logits.iter().map(|&l| 1.0 / (1.0 + (-(l as f64)).exp())).collect();
        let half = (k / 2) as isize;
        let mut raw = vec![vec![0f64; k]; k];
        let mut total = 0.0;
        for (i, row) in raw.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (y, x) = (i as f64 - half as f64, j as f64 - half as f64);
                *v = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
                total += *v;
            }
        }
        let mut oracle = vec![0f64; b * n * m];
        for img in 0..b {
            let plane = &prob[img * n * m..(img + 1) * n * m];
            for i in 0..n as isize {
                for j in 0..m as isize {
                    let mut acc = 0.0;
                    for di in -half..=half {
                        for dj in -half..=half {
                            let (y, x) = (i + di, j + dj);
                            if y >= 0 && x >= 0 && y < n as isize && x < m as isize {
                                acc += raw[(di + half) as usize][(dj + half) as usize] / total
                                    * plane[y as usize * m + x as usize];
                            }
                        }
                    }
                    let idx = i as usize * m + j as usize;
                    oracle[img * n * m + idx] = acc.max(plane[idx]);
                }
            }
        }
        let ha = HolisticAttention::new(k, sigma).unwrap();
        let t = Tensor::from_vec(logits, (b, n, m, 1), &Device::Cpu).unwrap();
        let w = host(&ha.weights(&t).unwrap()).unwrap();
        for idx in 0..b * n * m {
            assert!(
                (w[idx] as f64 - oracle[idx]).abs() < 1e-5,
                "index {idx}: {} vs {}",
                w[idx],
                oracle[idx]
            );
        }
        let (pi, pj) = peaks[0];
        for idx in (0..n * m).filter(|i| *i != pi * m + pj) {
            assert!(w[idx] as f64 > prob[idx], "off-peak weight must exceed its sigmoid");
        }
    }
}
