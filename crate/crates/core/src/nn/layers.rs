//! Channels-last layers backed by [`ParamStore`](super::ParamStore) variables.

use candle_core::{Tensor, Var};

use super::ops::{conv_out, subsample};
use super::store::{Init, ParamBuilder};
use crate::error::{Error, Result};

/// How normalization layers treat batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics and update the running averages.
    Train,
    /// Normalize with batch statistics but leave the running averages alone.
    TrainFrozenStats,
    /// Normalize with the running averages.
    Eval,
}

/// 2-D convolution on `B×H×W×C` input, lowered to one matrix product.
///
/// The kernel is stored as a `(k·k·C_in) × C_out` matrix whose rows are ordered
/// `(dy, dx, c_in)`.
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut ParamBuilder,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let init = Init::KaimingNormal {
            fan: out_channels * kernel * kernel,
        };
        Self::with_init(b, in_channels, out_channels, kernel, stride, padding, bias, init)
    }

    /// Like [`Conv2d::new`] but with an explicit weight initializer.
    #[allow(clippy::too_many_arguments)]
    pub fn with_init(
        b: &mut ParamBuilder,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let weight = b.param("weight", &[kernel * kernel * in_channels, out_channels], init)?;
        let bias = if bias {
            let bound = 1.0 / ((in_channels * kernel * kernel) as f64).sqrt();
            Some(b.param("bias", &[out_channels], Init::Uniform { bound })?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::argument(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let oh = conv_out(h, k, s, p);
        let ow = conv_out(w, k, s, p);
        let cols = if k == 1 && p == 0 {
            subsample(x, s, oh, ow)?
        } else {
            let xp = x.pad_with_zeros(1, p, p)?.pad_with_zeros(2, p, p)?;
            let (ph, pw) = (h + 2 * p, w + 2 * p);
            let mut parts = Vec::with_capacity(k * k);
            for dy in 0..k {
                for dx in 0..k {
                    let shifted = xp.narrow(1, dy, ph - dy)?.narrow(2, dx, pw - dx)?;
                    parts.push(subsample(&shifted, s, oh, ow)?);
                }
            }
            Tensor::cat(&parts, 3)?
        };
        let rows = cols.reshape((b * oh * ow, k * k * c))?;
        let mut y = rows.matmul(self.weight.as_tensor())?;
        if let Some(bias) = &self.bias {
            y = y.broadcast_add(bias.as_tensor())?;
        }
        Ok(y.reshape((b, oh, ow, self.out_channels))?)
    }
}

/// Converts an `O×I×kH×kW` kernel into this crate's matrix layout.
pub fn kernel_from_oihw(t: &Tensor) -> Result<Tensor> {
    let (o, i, kh, kw) = t.dims4()?;
    Ok(t.permute((2, 3, 1, 0))?.contiguous()?.reshape((kh * kw * i, o))?)
}

/// Inverse of [`kernel_from_oihw`].
pub fn kernel_to_oihw(t: &Tensor, kernel: usize) -> Result<Tensor> {
    let (rows, o) = t.dims2()?;
    let i = rows / (kernel * kernel);
    Ok(t.reshape((kernel, kernel, i, o))?.permute((3, 2, 0, 1))?.contiguous()?)
}

pub struct BatchNorm2d {
    weight: Var,
    bias: Var,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(b: &mut ParamBuilder, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: b.param("weight", &[channels], Init::Constant(1.0))?,
            bias: b.param("bias", &[channels], Init::Constant(0.0))?,
            running_mean: b.buffer("running_mean", &[channels], 0.0)?,
            running_var: b.buffer("running_var", &[channels], 1.0)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let n = b * h * w;
        let flat = x.reshape((n, c))?;
        let (centered, var) = match mode {
            Mode::Eval => (
                flat.broadcast_sub(self.running_mean.as_tensor())?,
                self.running_var.as_tensor().unsqueeze(0)?,
            ),
            Mode::Train | Mode::TrainFrozenStats => {
                let mean = flat.mean_keepdim(0)?;
                let centered = flat.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim(0)?;
                if mode == Mode::Train {
                    let m = self.momentum;
                    let unbiased = (var.detach() * (n as f64 / (n.max(2) - 1) as f64))?;
                    let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().squeeze(0)? * m)?)?;
                    let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased.squeeze(0)? * m)?)?;
                    self.running_mean.set(&rm)?;
                    self.running_var.set(&rv)?;
                }
                (centered, var)
            }
        };
        let y = centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(self.weight.as_tensor())?
            .broadcast_add(self.bias.as_tensor())?;
        Ok(y.reshape((b, h, w, c))?)
    }
}

/// Fully connected map `B×in → B×out`.
pub struct Linear {
    weight: Var,
    bias: Option<Var>,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder, input: usize, output: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = b.param("weight", &[input, output], Init::Uniform { bound })?;
        let bias = if bias {
            Some(b.param("bias", &[output], Init::Uniform { bound })?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(self.weight.as_tensor())?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b.as_tensor())?,
            None => y,
        })
    }
}
