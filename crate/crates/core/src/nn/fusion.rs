//! Transformer-Conv fusion of a registered infrared image and a visible image.
//!
//! Each input goes through its own 1x1 embedding, Transformer-Conv block and
//! dual-attention unit. The two streams are summed, refined by a residual conv
//! block and mapped to one channel with a sigmoid.

use candle_core::{DType, Tensor};

use super::layers::{reflect_pad, sigmoid, softmax, ChannelAttention, Conv2d, LayerNorm, Linear, ResidualConvBlock};
use super::params::{Init, ParamStore};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct TcfConfig {
    /// Embedding width `C`; each Transformer-Conv branch gets `C / 2`.
    pub channels: usize,
    pub window: usize,
    pub heads: usize,
    pub reduction: usize,
    /// Transformer-Conv blocks per stream.
    pub depth: usize,
    /// Start every block's closing 1x1 conv at zero so blocks begin as identities.
    pub zero_block_output: bool,
}

impl Default for TcfConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            window: 8,
            heads: 4,
            reduction: 8,
            depth: 1,
            zero_block_output: false,
        }
    }
}

impl TcfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 2 != 0 {
            return Err(Error::invalid("TcfConfig", format!("channels {} must be even", self.channels)));
        }
        if self.heads == 0 || (self.channels / 2) % self.heads != 0 {
            return Err(Error::invalid(
                "TcfConfig",
                format!("{} heads do not divide branch width {}", self.heads, self.channels / 2),
            ));
        }
        if self.window == 0 || self.depth == 0 {
            return Err(Error::invalid("TcfConfig", "window and depth must be positive"));
        }
        Ok(())
    }
}

/// Multi-head self-attention over token sequences `[N, T, C]`.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl WindowAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, zero_proj: bool) -> Result<Self> {
        let proj = if zero_proj {
            Linear::with_init(ps, &format!("{name}.proj"), dim, dim, Init::Zeros)?
        } else {
            Linear::new(ps, &format!("{name}.proj"), dim, dim)?
        };
        Ok(Self {
            qkv: Linear::new(ps, &format!("{name}.qkv"), dim, 3 * dim)?,
            proj,
            heads,
        })
    }

    /// Attention probabilities `[N, heads, T, T]` and the projected output.
    pub fn forward_with_weights(&self, tokens: &Tensor) -> Result<(Tensor, Tensor)> {
        let (n, t, c) = tokens.dims3()?;
        let dh = c / self.heads;
        let qkv = self
            .qkv
            .forward(tokens)?
            .reshape((n, t, 3, self.heads, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let logits = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
        let attn = softmax(&logits, 3)?;
        let out = attn.matmul(&v)?.permute((0, 2, 1, 3))?.reshape((n, t, c))?;
        Ok((attn, self.proj.forward(&out)?))
    }

    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_weights(tokens)?.1)
    }
}

/// Pre-norm window transformer layer: attention and MLP, each with a skip.
#[derive(Debug, Clone)]
pub struct SwinLayer {
    norm1: LayerNorm,
    attention: WindowAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    window: usize,
    shift: usize,
}

impl SwinLayer {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, cfg: &TcfConfig, shift: usize, zero_out: bool) -> Result<Self> {
        let fc2 = if zero_out {
            Linear::with_init(ps, &format!("{name}.fc2"), 2 * dim, dim, Init::Zeros)?
        } else {
            Linear::new(ps, &format!("{name}.fc2"), 2 * dim, dim)?
        };
        Ok(Self {
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), dim)?,
            attention: WindowAttention::new(ps, &format!("{name}.attn"), dim, cfg.heads, zero_out)?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), dim)?,
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, 2 * dim)?,
            fc2,
            window: cfg.window,
            shift,
        })
    }

    pub fn attention(&self) -> &WindowAttention {
        &self.attention
    }

    /// `[B, C, H, W]` in and out; pads to window multiples and crops back.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let ws = self.window;
        let (ph, pw) = ((ws - h % ws) % ws, (ws - w % ws) % ws);
        let mut z = reflect_pad(x, ph, pw)?;
        let (hp, wp) = (h + ph, w + pw);
        if self.shift > 0 {
            z = roll2(&z, self.shift % hp, self.shift % wp)?;
        }
        // [B, C, Hp, Wp] -> [B * nWin, ws * ws, C]
        let tokens = z
            .reshape((b, c, hp / ws, ws, wp / ws, ws))?
            .permute((0, 2, 4, 3, 5, 1))?
            .reshape((b * (hp / ws) * (wp / ws), ws * ws, c))?;
        let tokens = (&tokens + self.attention.forward(&self.norm1.forward(&tokens)?)?)?;
        let mlp = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&tokens)?)?.gelu()?)?;
        let tokens = (tokens + mlp)?;
        let mut z = tokens
            .reshape((b, hp / ws, wp / ws, ws, ws, c))?
            .permute((0, 5, 1, 3, 2, 4))?
            .reshape((b, c, hp, wp))?;
        if self.shift > 0 {
            z = roll2(&z, (hp - self.shift % hp) % hp, (wp - self.shift % wp) % wp)?;
        }
        Ok(z.narrow(2, 0, h)?.narrow(3, 0, w)?)
    }
}

/// Cyclic shift of the spatial axes towards lower indices.
fn roll2(x: &Tensor, kh: usize, kw: usize) -> Result<Tensor> {
    let mut out = x.clone();
    for (axis, k) in [(2, kh), (3, kw)] {
        let n = out.dims()[axis];
        if k != 0 {
            out = Tensor::cat(&[out.narrow(axis, k, n - k)?, out.narrow(axis, 0, k)?], axis)?;
        }
    }
    Ok(out)
}

/// Splits channels into a window-transformer half and a residual-conv half.
#[derive(Debug, Clone)]
pub struct TransformerConvBlock {
    entry: Conv2d,
    swin: SwinLayer,
    conv: ResidualConvBlock,
    exit: Conv2d,
}

impl TransformerConvBlock {
    fn new(ps: &mut ParamStore, name: &str, cfg: &TcfConfig, index: usize) -> Result<Self> {
        let c = cfg.channels;
        let half = c / 2;
        let shift = if index % 2 == 1 { cfg.window / 2 } else { 0 };
        let exit = if cfg.zero_block_output {
            Conv2d::zeros(ps, &format!("{name}.exit"), c, c, 1)?
        } else {
            Conv2d::new(ps, &format!("{name}.exit"), c, c, 1, 1)?
        };
        Ok(Self {
            entry: Conv2d::new(ps, &format!("{name}.entry"), c, c, 1, 1)?,
            swin: SwinLayer::new(ps, &format!("{name}.swin"), half, cfg, shift, false)?,
            conv: ResidualConvBlock::new(ps, &format!("{name}.rcb"), half)?,
            exit,
        })
    }

    pub fn swin(&self) -> &SwinLayer {
        &self.swin
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.entry.forward(x)?;
        let half = y.dims()[1] / 2;
        let global = self.swin.forward(&y.narrow(1, 0, half)?)?;
        let local = self.conv.forward(&y.narrow(1, half, half)?)?;
        let merged = self.exit.forward(&Tensor::cat(&[global, local], 1)?)?;
        Ok((x + merged)?)
    }
}

/// Parallel spatial and channel gating, merged by a conv + ReLU.
#[derive(Debug, Clone)]
pub struct DualAttention {
    spatial1: Conv2d,
    spatial2: Conv2d,
    channel: ChannelAttention,
    merge: Conv2d,
}

/// Gates produced by [`DualAttention`].
#[derive(Debug, Clone)]
pub struct DualAttentionTrace {
    /// `[B, 1, H, W]`.
    pub spatial_gate: Tensor,
    /// `[B, C, 1, 1]`.
    pub channel_gate: Tensor,
    pub out: Tensor,
}

impl DualAttention {
    fn new(ps: &mut ParamStore, name: &str, c: usize, reduction: usize) -> Result<Self> {
        Ok(Self {
            spatial1: Conv2d::new(ps, &format!("{name}.spatial1"), 2, 4, 3, 1)?,
            spatial2: Conv2d::new(ps, &format!("{name}.spatial2"), 4, 1, 3, 1)?,
            channel: ChannelAttention::new(ps, &format!("{name}.channel"), c, reduction)?,
            merge: Conv2d::new(ps, &format!("{name}.merge"), 2 * c, c, 3, 1)?,
        })
    }

    pub fn forward_trace(&self, x: &Tensor) -> Result<DualAttentionTrace> {
        let pooled = Tensor::cat(&[x.max_keepdim(1)?, x.mean_keepdim(1)?], 1)?;
        // replicated borders keep the gate of a flat map flat
        let pooled = pooled.pad_with_same(2, 2, 2)?.pad_with_same(3, 2, 2)?;
        let hidden = self.spatial1.forward_valid(&pooled)?.relu()?;
        let spatial_gate = sigmoid(&self.spatial2.forward_valid(&hidden)?)?;
        let channel_gate = self.channel.gate(x)?;
        let both = Tensor::cat(&[x.broadcast_mul(&spatial_gate)?, x.broadcast_mul(&channel_gate)?], 1)?;
        let out = self.merge.forward(&both)?.relu()?;
        Ok(DualAttentionTrace {
            spatial_gate,
            channel_gate,
            out,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_trace(x)?.out)
    }
}

#[derive(Debug, Clone)]
struct Stream {
    embed: Conv2d,
    blocks: Vec<TransformerConvBlock>,
    attention: DualAttention,
}

impl Stream {
    fn new(ps: &mut ParamStore, name: &str, cfg: &TcfConfig) -> Result<Self> {
        Ok(Self {
            embed: Conv2d::new(ps, &format!("{name}.embed"), 1, cfg.channels, 1, 1)?,
            blocks: (0..cfg.depth)
                .map(|i| TransformerConvBlock::new(ps, &format!("{name}.tcb{i}"), cfg, i))
                .collect::<Result<_>>()?,
            attention: DualAttention::new(ps, &format!("{name}.dau"), cfg.channels, cfg.reduction)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.embed.forward(x)?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        self.attention.forward(&h)
    }
}

#[derive(Debug, Clone)]
pub struct FusionNet {
    config: TcfConfig,
    ir: Stream,
    vis: Stream,
    refine: ResidualConvBlock,
    out: Conv2d,
}

impl FusionNet {
    pub fn new(ps: &mut ParamStore, config: &TcfConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            ir: Stream::new(ps, "fus.ir", config)?,
            vis: Stream::new(ps, "fus.vis", config)?,
            refine: ResidualConvBlock::new(ps, "fus.refine", config.channels)?,
            out: Conv2d::new(ps, "fus.out", config.channels, 1, 3, 1)?,
        })
    }

    pub fn config(&self) -> &TcfConfig {
        &self.config
    }

    /// First Transformer-Conv block of the infrared stream.
    pub fn ir_block(&self) -> &TransformerConvBlock {
        &self.ir.blocks[0]
    }

    pub fn ir_attention(&self) -> &DualAttention {
        &self.ir.attention
    }

    /// Fuses batched `[B, 1, H, W]` inputs into a `[B, 1, H, W]` image in `[0, 1]`.
    pub fn forward(&self, ir: &Tensor, vis: &Tensor) -> Result<Tensor> {
        if ir.dims() != vis.dims() {
            return Err(Error::shape("fuse", ir.dims(), vis.dims()));
        }
        if ir.rank() != 4 || ir.dims()[1] != 1 {
            return Err(Error::invalid("fuse", format!("expected [B, 1, H, W], got {:?}", ir.dims())));
        }
        let sum = (self.ir.forward(ir)? + self.vis.forward(vis)?)?;
        sigmoid(&self.out.forward(&self.refine.forward(&sum)?)?)
    }

    pub fn fuse(&self, ir: &Image, vis: &Image) -> Result<Image> {
        let dtype = self.out.dtype();
        let y = self.forward(
            &ir.to_gray()?.to_dtype(dtype)?.batched()?,
            &vis.to_gray()?.to_dtype(dtype)?.batched()?,
        )?;
        Image::from_tensor(y.squeeze(0)?.to_dtype(DType::F32)?)
    }
}
