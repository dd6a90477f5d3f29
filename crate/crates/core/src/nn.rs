//! Small layer library on top of candle tensors (NCHW layout).

use candle_core::{DType, Tensor, D};

use crate::error::{shape_err, Result};
use crate::kernels::Depthwise3x3;
use crate::params::{Init, Scope};

/// Standard deviation used for 1x1 projection weights.
pub const PROJECTION_STD: f64 = 0.02;

/// Initializer for a conv kernel: truncated normal with std 0.02 for 1x1
/// projections, fan-in scaled (He) for spatial kernels.
pub fn conv_init(in_ch: usize, k: usize) -> Init {
    if k == 1 {
        Init::TruncNormal { std: PROJECTION_STD }
    } else {
        Init::TruncNormal {
            std: (2.0 / (in_ch * k * k) as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub bias: bool,
    pub weight_init: Option<Init>,
    pub bias_init: Init,
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            bias: true,
            weight_init: None,
            bias_init: Init::Zeros,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn init(mut self, init: Init) -> Self {
        self.weight_init = Some(init);
        self
    }

    pub fn bias_init(mut self, init: Init) -> Self {
        self.bias_init = init;
        self
    }
}

impl Conv2d {
    pub fn new(scope: &Scope, spec: ConvSpec) -> Result<Self> {
        let init = spec
            .weight_init
            .unwrap_or_else(|| conv_init(spec.in_ch, spec.kernel));
        let weight = scope.param(
            "weight",
            &[spec.out_ch, spec.in_ch, spec.kernel, spec.kernel],
            init,
        )?;
        let bias = if spec.bias {
            Some(scope.param("bias", &[spec.out_ch], spec.bias_init)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.kernel / 2,
            dilation: 1,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.in_channels() {
            return shape_err(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels()
            ));
        }
        let y = x.conv2d(&self.weight, self.padding, self.stride, self.dilation, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Depthwise 3x3 convolution (one kernel per channel, zero padding, stride 1).
///
#[derive(Debug, Clone)]
pub struct DepthwiseConv3x3 {
    pub weight: Tensor,
    pub bias: Tensor,
    pub dilation: usize,
}

impl DepthwiseConv3x3 {
    pub fn new(scope: &Scope, channels: usize, dilation: usize) -> Result<Self> {
        let weight = scope.param("weight", &[channels, 1, 3, 3], conv_init(1, 3))?;
        let bias = scope.param("bias", &[channels], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            dilation,
        })
    }

    pub fn channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.channels() {
            return shape_err(format!(
                "depthwise conv expects {} channels, got {c}",
                self.channels()
            ));
        }
        let acc = x
            .contiguous()?
            .apply_op2(&self.weight.contiguous()?, Depthwise3x3 { dilation: self.dilation })?;
        Ok(acc.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Layer normalization across channels at every pixel, with per-channel affine.
#[derive(Debug, Clone)]
pub struct LayerNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm2d {
    pub fn new(scope: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.param("gamma", &[channels], Init::Ones)?,
            beta: scope.param("beta", &[channels], Init::Zeros)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        let mean = x.mean_keepdim(1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(1)?;
        let y = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let y = y.broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?;
        Ok(y.broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

/// Exact (erf-based) GELU.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Nearest-neighbour upsampling by an integer factor, built from broadcasts so
/// gradients accumulate correctly when the input has several consumers.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    let y = x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, factor, w, factor))?
        .contiguous()?
        .reshape((b, c, h * factor, w * factor))?;
    Ok(y)
}

/// Replicate-pad the two spatial dims by one pixel.
pub fn pad_replicate1(x: &Tensor) -> Result<Tensor> {
    Ok(x.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?)
}

/// 3x3 mean filter with replicate padding; output has the input's shape.
pub fn box_filter3(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let p = pad_replicate1(x)?;
    let mut acc: Option<Tensor> = None;
    for dy in 0..3 {
        for dx in 0..3 {
            let t = p.narrow(2, dy, h)?.narrow(3, dx, w)?;
            acc = Some(match acc {
                None => t,
                Some(a) => (a + t)?,
            });
        }
    }
    Ok((acc.expect("nine taps") / 9.0)?)
}

/// Apply a fixed 3x3 stencil (row-major weights) to every channel, replicate
/// padding at the border.
pub fn stencil3(x: &Tensor, k: [[f64; 3]; 3]) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let p = pad_replicate1(x)?;
    let mut acc: Option<Tensor> = None;
    for (dy, row) in k.iter().enumerate() {
        for (dx, &kv) in row.iter().enumerate() {
            if kv == 0.0 {
                continue;
            }
            let t = (p.narrow(2, dy, h)?.narrow(3, dx, w)? * kv)?;
            acc = Some(match acc {
                None => t,
                Some(a) => (a + t)?,
            });
        }
    }
    match acc {
        Some(a) => Ok(a),
        None => Ok(x.zeros_like()?),
    }
}

/// Horizontal and vertical Sobel responses, normalized by 1/8 so that they
/// estimate the per-pixel derivative.
pub fn sobel(x: &Tensor) -> Result<(Tensor, Tensor)> {
    const GX: [[f64; 3]; 3] = [
        [-0.125, 0.0, 0.125],
        [-0.25, 0.0, 0.25],
        [-0.125, 0.0, 0.125],
    ];
    const GY: [[f64; 3]; 3] = [
        [-0.125, -0.25, -0.125],
        [0.0, 0.0, 0.0],
        [0.125, 0.25, 0.125],
    ];
    Ok((stencil3(x, GX)?, stencil3(x, GY)?))
}

/// Softmax along the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Log-softmax along dim 1 (class channel of an NCHW logit map).
pub fn log_softmax_channels(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(1)?.detach();
    let shifted = x.broadcast_sub(&m)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Scalar value of a 0-d or single-element tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?
        .first()
        .copied()
        .unwrap_or(f64::NAN))
}

/// Flatten to a host vector of f64.
pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}
