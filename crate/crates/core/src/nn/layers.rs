//! Building blocks shared by the registration and fusion networks. All tensors
//! are `[B, C, H, W]` unless stated otherwise.

use candle_core::{DType, Device, Tensor, D};

use super::params::{Init, ParamStore};
use crate::error::{Error, Result};
use crate::kernels;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    /// He-initialized convolution with `same` padding for odd kernels.
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Result<Self> {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        Self::with_init(ps, name, cin, cout, k, stride, Init::Normal(std))
    }

    /// Convolution whose output is exactly zero until trained.
    pub fn zeros(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        Self::with_init(ps, name, cin, cout, k, 1, Init::Zeros)
    }

    pub fn with_init(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init: Init,
    ) -> Result<Self> {
        if k % 2 == 0 || stride == 0 {
            return Err(Error::invalid("Conv2d", format!("kernel {k} stride {stride}")));
        }
        let weight = ps.create(format!("{name}.weight"), &[cout, cin, k, k], init)?;
        let bias = ps.create(format!("{name}.bias"), &[cout], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            stride,
            pad: k / 2,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn dtype(&self) -> DType {
        self.weight.dtype()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = kernels::conv2d(x, &self.weight, self.stride, self.pad)?;
        let b = self.bias.reshape((1, self.out_channels(), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }

    /// Same weights without padding; each side shrinks by `k / 2`.
    pub fn forward_valid(&self, x: &Tensor) -> Result<Tensor> {
        let y = kernels::conv2d(x, &self.weight, self.stride, 0)?;
        let b = self.bias.reshape((1, self.out_channels(), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

/// Dense layer over the trailing axis.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, din: usize, dout: usize) -> Result<Self> {
        let std = (1.0 / din as f64).sqrt();
        Self::with_init(ps, name, din, dout, Init::Normal(std))
    }

    pub fn with_init(ps: &mut ParamStore, name: &str, din: usize, dout: usize, init: Init) -> Result<Self> {
        let weight = ps.create(format!("{name}.weight"), &[din, dout], init)?;
        let bias = ps.create(format!("{name}.bias"), &[dout], Init::Zeros)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight)?;
        Ok(y.broadcast_add(&self.bias)?)
    }
}

/// Layer normalization over the trailing axis with learned gain and offset.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: Tensor,
    offset: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: ps.create(format!("{name}.gain"), &[dim], Init::Ones)?,
            offset: ps.create(format!("{name}.offset"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gain)?.broadcast_add(&self.offset)?)
    }
}

/// Logistic function via `tanh`, which stays finite in both tails.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? * 0.5)?.affine(1.0, 0.5)?)
}

/// Numerically shifted softmax along `dim`.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let shift = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&shift)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

/// Reflect-pads (without repeating the edge) the two trailing axes.
pub fn reflect_pad(x: &Tensor, bottom: usize, right: usize) -> Result<Tensor> {
    let rank = x.rank();
    let mut out = x.contiguous()?;
    for (axis, extra) in [(rank - 2, bottom), (rank - 1, right)] {
        if extra == 0 {
            continue;
        }
        let n = out.dims()[axis];
        if extra >= n {
            return Err(Error::invalid(
                "reflect_pad",
                format!("cannot pad {extra} onto an axis of length {n}"),
            ));
        }
        let idx: Vec<u32> = (0..n + extra)
            .map(|i| if i < n { i } else { 2 * (n - 1) - i } as u32)
            .collect();
        let idx = Tensor::from_vec(idx, n + extra, &Device::Cpu)?;
        out = out.index_select(&idx, axis)?;
    }
    Ok(out)
}

/// Squeeze-and-excitation channel gate: global average pool, bottleneck, sigmoid.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    squeeze: Conv2d,
    excite: Conv2d,
}

impl ChannelAttention {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = (channels / reduction.max(1)).max(1);
        Ok(Self {
            squeeze: Conv2d::new(ps, &format!("{name}.squeeze"), channels, hidden, 1, 1)?,
            excite: Conv2d::new(ps, &format!("{name}.excite"), hidden, channels, 1, 1)?,
        })
    }

    /// Per-channel gate of shape `[B, C, 1, 1]`, each value in `(0, 1)`.
    pub fn gate(&self, x: &Tensor) -> Result<Tensor> {
        let pooled = x.mean_keepdim(3)?.mean_keepdim(2)?;
        sigmoid(&self.excite.forward(&self.squeeze.forward(&pooled)?.relu()?)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_mul(&self.gate(x)?)?)
    }
}

/// Two 3x3 convolutions around a ReLU, plus an identity skip.
#[derive(Debug, Clone)]
pub struct ResidualConvBlock {
    first: Conv2d,
    second: Conv2d,
}

impl ResidualConvBlock {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            first: Conv2d::new(ps, &format!("{name}.conv1"), channels, channels, 3, 1)?,
            second: Conv2d::new(ps, &format!("{name}.conv2"), channels, channels, 3, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.second.forward(&self.first.forward(x)?.relu()?)?;
        Ok((x + y)?)
    }
}
