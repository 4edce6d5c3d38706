//! Differentiable helpers on channels-last (`B×H×W×C`) tensors.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{Error, Result};

/// Picks every `stride`-th row/column starting at 0, producing an `out_h × out_w` grid.
///
/// Missing trailing elements (when the input is shorter than `out * stride`) are
/// zero-padded; they are never selected.
pub fn subsample(x: &Tensor, stride: usize, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if stride == 1 {
        return Ok(x.narrow(1, 0, out_h)?.narrow(2, 0, out_w)?);
    }
    let need_h = out_h * stride;
    let need_w = out_w * stride;
    let x = if h < need_h {
        x.pad_with_zeros(1, 0, need_h - h)?
    } else {
        x.narrow(1, 0, need_h)?
    };
    let x = if w < need_w {
        x.pad_with_zeros(2, 0, need_w - w)?
    } else {
        x.narrow(2, 0, need_w)?
    };
    Ok(x.reshape((b, out_h, stride, out_w, stride, c))?
        .narrow(2, 0, 1)?
        .narrow(4, 0, 1)?
        .reshape((b, out_h, out_w, c))?)
}

/// Output length of a convolution/pooling window sweep.
pub fn conv_out(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}

/// 3×3, stride-2, pad-1 max pooling.
pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    let (oh, ow) = (conv_out(h, 3, 2, 1), conv_out(w, 3, 2, 1));
    let fill = |shape: (usize, usize, usize, usize)| -> Result<Tensor> {
        Ok(Tensor::full(-1e30f32, shape, x.device())?.to_dtype(x.dtype())?)
    };
    let xp = Tensor::cat(&[&fill((b, 1, w, c))?, x, &fill((b, 1, w, c))?], 1)?;
    let xp = Tensor::cat(&[&fill((b, h + 2, 1, c))?, &xp, &fill((b, h + 2, 1, c))?], 2)?;
    let mut out: Option<Tensor> = None;
    for dy in 0..3 {
        for dx in 0..3 {
            let shifted = xp.narrow(1, dy, h + 2 - dy)?.narrow(2, dx, w + 2 - dx)?;
            let win = subsample(&shifted, 2, oh, ow)?;
            out = Some(match out {
                None => win,
                Some(acc) => acc.maximum(&win)?,
            });
        }
    }
    Ok(out.expect("nine windows"))
}

/// Mean over the spatial axes: `B×H×W×C → B×C`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(2)?.mean(1)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}

/// Source indices and weights for half-pixel-centred linear interpolation
/// (the `align_corners = false` convention).
pub fn linear_taps(in_len: usize, out_len: usize) -> (Vec<u32>, Vec<u32>, Vec<f64>) {
    let scale = in_len as f64 / out_len as f64;
    let mut lo = Vec::with_capacity(out_len);
    let mut hi = Vec::with_capacity(out_len);
    let mut frac = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        lo.push(i0 as u32);
        hi.push(i1 as u32);
        frac.push(src - i0 as f64);
    }
    (lo, hi, frac)
}

fn interp_axis(x: &Tensor, axis: usize, out_len: usize) -> Result<Tensor> {
    let in_len = x.dim(axis)?;
    if in_len == out_len {
        return Ok(x.clone());
    }
    let (lo, hi, frac) = linear_taps(in_len, out_len);
    let dev = x.device();
    let lo = Tensor::new(lo.as_slice(), dev)?;
    let hi = Tensor::new(hi.as_slice(), dev)?;
    let mut wshape = vec![1usize; x.rank()];
    wshape[axis] = out_len;
    let w1 = Tensor::from_vec(frac.clone(), wshape.as_slice(), dev)?.to_dtype(x.dtype())?;
    let w0 = Tensor::from_vec(frac.iter().map(|f| 1.0 - f).collect::<Vec<_>>(), wshape.as_slice(), dev)?
        .to_dtype(x.dtype())?;
    let a = x.index_select(&lo, axis)?.broadcast_mul(&w0)?;
    let b = x.index_select(&hi, axis)?.broadcast_mul(&w1)?;
    Ok((a + b)?)
}

/// Bilinear resize of a `B×H×W×C` tensor without corner alignment.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let x = interp_axis(x, 1, out_h)?;
    interp_axis(&x, 2, out_w)
}

/// Bilinear resize of a single-channel `B×1×H×W` map.
pub fn resize_map(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if c != 1 {
        return Err(Error::argument(format!("expected one channel, got {c}")));
    }
    let y = resize_bilinear(&x.reshape((b, h, w, 1))?, out_h, out_w)?;
    Ok(y.reshape((b, 1, out_h, out_w))?)
}

pub fn nchw_to_nhwc(x: &Tensor) -> Result<Tensor> {
    Ok(x.permute((0, 2, 3, 1))?.contiguous()?)
}

pub fn nhwc_to_nchw(x: &Tensor) -> Result<Tensor> {
    Ok(x.permute((0, 3, 1, 2))?.contiguous()?)
}

/// Scalar value of a rank-0 or single-element tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
}

/// Host copy of a tensor as `f32`.
pub fn host(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
}

pub fn cpu() -> Device {
    Device::Cpu
}
