//! Multi-scale progressive deformable registration.
//!
//! Two independent convolutional pyramids encode the fixed and moving images.
//! Decoding starts at the coarsest level with a sub-field `φᴷ`. Descending to
//! scale `s`, every coarser sub-field is upsampled to `s`, reweighted per pixel
//! and summed into a velocity that is integrated into the fused field used to
//! warp the moving features (DFF). Warped moving features, upsampled decoder
//! features and fixed features are then merged (PFF) and a residual sub-field
//! `φˢ` is estimated. A closing fusion over all sub-fields at full resolution
//! gives the final field.

use candle_core::{DType, Tensor};

use super::layers::{sigmoid, softmax, ChannelAttention, Conv2d};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::field::{ops, DisplacementField, DEFAULT_INTEGRATION_STEPS};
use crate::image::Image;

/// How sub-fields are merged before integration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DffMode {
    /// Learned per-pixel weights.
    Learned,
    /// Upsampled sub-fields are summed with unit weights.
    InterpOnly,
}

/// How the three feature streams are merged at each scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PffMode {
    /// Softmax stream weights, channel attention and a 1x1 fusion conv.
    Full,
    /// Plain concatenation followed by a conv + ReLU.
    Concat,
}

impl std::str::FromStr for DffMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" => Ok(DffMode::Learned),
            "interp-only" => Ok(DffMode::InterpOnly),
            _ => Err(format!("unknown dff mode `{s}` (full | interp-only)")),
        }
    }
}

impl std::fmt::Display for DffMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DffMode::Learned => "full",
            DffMode::InterpOnly => "interp-only",
        })
    }
}

impl std::str::FromStr for PffMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" => Ok(PffMode::Full),
            "concat" => Ok(PffMode::Concat),
            _ => Err(format!("unknown pff mode `{s}` (full | concat)")),
        }
    }
}

impl std::fmt::Display for PffMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PffMode::Full => "full",
            PffMode::Concat => "concat",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidConfig {
    /// Number of downsampling levels `K`.
    pub levels: usize,
    /// Feature width per level, `K + 1` entries.
    pub widths: Vec<usize>,
    /// Squaring steps for velocity integration.
    pub steps: usize,
    /// Width of the hidden map feeding the fusion weight heads.
    pub dff_hidden: usize,
    /// Channel-attention bottleneck reduction.
    pub reduction: usize,
    pub dff: DffMode,
    pub pff: PffMode,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            widths: vec![16, 32, 32, 64, 64],
            steps: DEFAULT_INTEGRATION_STEPS,
            dff_hidden: 8,
            reduction: 8,
            dff: DffMode::Learned,
            pff: PffMode::Full,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::invalid("PyramidConfig", "need at least one level"));
        }
        if self.widths.len() != self.levels + 1 {
            return Err(Error::invalid(
                "PyramidConfig",
                format!("{} widths for {} levels", self.widths.len(), self.levels),
            ));
        }
        if self.widths.contains(&0) || self.steps == 0 || self.dff_hidden == 0 {
            return Err(Error::invalid("PyramidConfig", "widths, steps and dff_hidden must be positive"));
        }
        Ok(())
    }

    /// Inputs must have both sides divisible by this.
    pub fn divisor(&self) -> usize {
        1 << self.levels
    }
}

/// Cross-modality translator applied to the visible image before registration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Translator {
    Identity,
    /// `1 - x`, a crude infrared-like restyling.
    Inversion,
}

impl Translator {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Translator::Identity => x.clone(),
            Translator::Inversion => x.affine(-1.0, 1.0)?,
        })
    }
}

impl std::str::FromStr for Translator {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "identity" => Ok(Translator::Identity),
            "inversion" => Ok(Translator::Inversion),
            _ => Err(format!("unknown translator `{s}` (identity | inversion)")),
        }
    }
}

impl std::fmt::Display for Translator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Translator::Identity => "identity",
            Translator::Inversion => "inversion",
        })
    }
}

#[derive(Debug, Clone)]
struct Extractor {
    levels: Vec<(Conv2d, Conv2d)>,
}

impl Extractor {
    fn new(ps: &mut ParamStore, name: &str, widths: &[usize]) -> Result<Self> {
        let mut levels = Vec::with_capacity(widths.len());
        let mut cin = 1;
        for (k, &w) in widths.iter().enumerate() {
            let stride = if k == 0 { 1 } else { 2 };
            levels.push((
                Conv2d::new(ps, &format!("{name}.level{k}.conv1"), cin, w, 3, stride)?,
                Conv2d::new(ps, &format!("{name}.level{k}.conv2"), w, w, 3, 1)?,
            ));
            cin = w;
        }
        Ok(Self { levels })
    }

    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.levels.len());
        let mut h = x.clone();
        for (a, b) in &self.levels {
            h = b.forward(&a.forward(&h)?.relu()?)?.relu()?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

/// Intermediate values of one deformation-field fusion.
#[derive(Debug, Clone)]
pub struct DffTrace {
    /// Per-field weight maps `[B, 1, h, w]`, coarsest first.
    pub weights: Vec<Tensor>,
    /// Weighted sum of the upsampled sub-fields.
    pub velocity: Tensor,
    /// Integrated displacement.
    pub field: Tensor,
}

#[derive(Debug, Clone)]
pub struct Dff {
    target: usize,
    hidden: Option<Conv2d>,
    heads: Vec<Conv2d>,
}

impl Dff {
    /// Fusion of the sub-fields at scales `sources` (coarsest first) onto `target`.
    fn new(ps: &mut ParamStore, name: &str, cfg: &PyramidConfig, sources: usize, target: usize) -> Result<Self> {
        if cfg.dff == DffMode::InterpOnly {
            return Ok(Self {
                target,
                hidden: None,
                heads: Vec::new(),
            });
        }
        let hidden = Conv2d::new(ps, &format!("{name}.hidden"), 2 * sources, cfg.dff_hidden, 3, 1)?;
        let heads = (0..sources)
            .map(|i| Conv2d::new(ps, &format!("{name}.head{i}"), cfg.dff_hidden, 1, 3, 1))
            .collect::<Result<_>>()?;
        Ok(Self {
            target,
            hidden: Some(hidden),
            heads,
        })
    }

    /// `fields[i]` lives at scale `scales[i]`; all scales must be above or at the target.
    pub fn forward(&self, fields: &[Tensor], scales: &[usize], steps: usize) -> Result<DffTrace> {
        if fields.is_empty() || fields.len() != scales.len() {
            return Err(Error::invalid("dff_fuse", "need one scale per sub-field"));
        }
        if !self.heads.is_empty() && self.heads.len() != fields.len() {
            return Err(Error::invalid(
                "dff_fuse",
                format!("{} weight heads for {} sub-fields", self.heads.len(), fields.len()),
            ));
        }
        let mut up = Vec::with_capacity(fields.len());
        for (f, &s) in fields.iter().zip(scales) {
            if s < self.target {
                return Err(Error::invalid("dff_fuse", format!("sub-field at scale {s} below target {}", self.target)));
            }
            up.push(ops::upsample_field(f, 1 << (s - self.target))?);
        }
        let (b, _, h, w) = up[0].dims4()?;
        for u in &up {
            if u.dims() != [b, 2, h, w] {
                return Err(Error::shape("dff_fuse", up[0].dims(), u.dims()));
            }
        }
        let weights: Vec<Tensor> = match &self.hidden {
            Some(hidden) => {
                let vw = hidden.forward(&Tensor::cat(&up, 1)?)?.relu()?;
                self.heads
                    .iter()
                    .map(|head| sigmoid(&head.forward(&vw)?))
                    .collect::<Result<_>>()?
            }
            None => vec![Tensor::ones((b, 1, h, w), up[0].dtype(), up[0].device())?; up.len()],
        };
        let mut velocity = up[0].broadcast_mul(&weights[0])?;
        for (u, wgt) in up.iter().zip(&weights).skip(1) {
            velocity = (velocity + u.broadcast_mul(wgt)?)?;
        }
        let field = ops::integrate_velocity(&velocity, steps)?;
        Ok(DffTrace {
            weights,
            velocity,
            field,
        })
    }
}

/// Intermediate values of one progressive feature merge.
#[derive(Debug, Clone)]
pub struct PffTrace {
    /// Per-pixel stream weights `[B, 3, h, w]` (full mode only).
    pub stream_weights: Option<Tensor>,
    /// Channel gate `[B, 3c, 1, 1]` (full mode only).
    pub gate: Option<Tensor>,
    /// Gated `3c`-channel map before the closing 1x1 conv (full mode only).
    pub gated: Option<Tensor>,
    pub out: Tensor,
}

#[derive(Debug, Clone)]
enum PffLayers {
    Full {
        mix: Conv2d,
        logits: Conv2d,
        attention: ChannelAttention,
        merge: Conv2d,
    },
    Concat {
        conv: Conv2d,
    },
}

#[derive(Debug, Clone)]
pub struct Pff {
    layers: PffLayers,
}

impl Pff {
    fn new(ps: &mut ParamStore, name: &str, cfg: &PyramidConfig, width: usize) -> Result<Self> {
        let layers = match cfg.pff {
            PffMode::Full => PffLayers::Full {
                mix: Conv2d::new(ps, &format!("{name}.mix"), 3 * width, width, 3, 1)?,
                logits: Conv2d::new(ps, &format!("{name}.logits"), width, 3, 3, 1)?,
                attention: ChannelAttention::new(ps, &format!("{name}.attention"), 3 * width, cfg.reduction)?,
                merge: Conv2d::new(ps, &format!("{name}.merge"), 3 * width, width, 1, 1)?,
            },
            PffMode::Concat => PffLayers::Concat {
                conv: Conv2d::new(ps, &format!("{name}.conv"), 3 * width, width, 3, 1)?,
            },
        };
        Ok(Self { layers })
    }

    /// Merges warped moving features, upsampled decoder features and fixed features.
    pub fn forward(&self, warped: &Tensor, decoded: &Tensor, fixed: &Tensor) -> Result<PffTrace> {
        let stacked = Tensor::cat(&[warped, decoded, fixed], 1)?;
        match &self.layers {
            PffLayers::Concat { conv } => Ok(PffTrace {
                stream_weights: None,
                gate: None,
                gated: None,
                out: conv.forward(&stacked)?.relu()?,
            }),
            PffLayers::Full {
                mix,
                logits,
                attention,
                merge,
            } => {
                let s = softmax(&logits.forward(&mix.forward(&stacked)?.relu()?)?, 1)?;
                let weighted = Tensor::cat(
                    &[
                        warped.broadcast_mul(&s.narrow(1, 0, 1)?)?,
                        decoded.broadcast_mul(&s.narrow(1, 1, 1)?)?,
                        fixed.broadcast_mul(&s.narrow(1, 2, 1)?)?,
                    ],
                    1,
                )?;
                let gate = attention.gate(&weighted)?;
                let gated = weighted.broadcast_mul(&gate)?;
                let out = merge.forward(&gated)?;
                Ok(PffTrace {
                    stream_weights: Some(s),
                    gate: Some(gate),
                    gated: Some(gated),
                    out,
                })
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Stage {
    project: Conv2d,
    pff: Pff,
    est1: Conv2d,
    est2: Conv2d,
    head: Conv2d,
}

/// Full registration output for a batch. Fields are `[B, 2, H, W]` in pixels.
#[derive(Debug, Clone)]
pub struct RegistrationOutput {
    /// Displacement that registers `moving` onto `fixed`.
    pub final_field: Tensor,
    /// Velocity whose integral is `final_field`; its negation integrates to the inverse.
    pub final_velocity: Tensor,
    /// `subfields[k]` is the sub-field estimated at scale `k`.
    pub subfields: Vec<Tensor>,
    /// `fused_fields[k]` (for `k < K`) warps the moving features at scale `k`.
    pub fused_fields: Vec<Tensor>,
    /// `moving` warped by `final_field`.
    pub registered: Tensor,
}

#[derive(Debug, Clone)]
pub struct RegistrationNet {
    config: PyramidConfig,
    fixed_extractor: Extractor,
    moving_extractor: Extractor,
    top1: Conv2d,
    top2: Conv2d,
    top_head: Conv2d,
    /// `dffs[s]` fuses onto scale `s` for `s < K`.
    dffs: Vec<Dff>,
    closing: Dff,
    /// `stages[s]` for `s < K`.
    stages: Vec<Stage>,
}

impl RegistrationNet {
    pub fn new(ps: &mut ParamStore, config: &PyramidConfig) -> Result<Self> {
        config.validate()?;
        let k = config.levels;
        let w = &config.widths;
        let fixed_extractor = Extractor::new(ps, "reg.fixed", w)?;
        let moving_extractor = Extractor::new(ps, "reg.moving", w)?;
        let top1 = Conv2d::new(ps, "reg.top.conv1", 2 * w[k], w[k], 3, 1)?;
        let top2 = Conv2d::new(ps, "reg.top.conv2", w[k], w[k], 3, 1)?;
        let top_head = Conv2d::zeros(ps, "reg.top.flow", w[k], 2, 3)?;
        let mut dffs = Vec::with_capacity(k);
        let mut stages = Vec::with_capacity(k);
        for s in 0..k {
            dffs.push(Dff::new(ps, &format!("reg.dff{s}"), config, k - s, s)?);
            stages.push(Stage {
                project: Conv2d::new(ps, &format!("reg.stage{s}.project"), w[s + 1], w[s], 1, 1)?,
                pff: Pff::new(ps, &format!("reg.stage{s}.pff"), config, w[s])?,
                est1: Conv2d::new(ps, &format!("reg.stage{s}.est1"), w[s], w[s], 3, 1)?,
                est2: Conv2d::new(ps, &format!("reg.stage{s}.est2"), w[s], w[s], 3, 1)?,
                head: Conv2d::zeros(ps, &format!("reg.stage{s}.flow"), w[s], 2, 3)?,
            });
        }
        let closing = Dff::new(ps, "reg.dff_final", config, k + 1, 0)?;
        Ok(Self {
            config: config.clone(),
            fixed_extractor,
            moving_extractor,
            top1,
            top2,
            top_head,
            dffs,
            closing,
            stages,
        })
    }

    pub fn config(&self) -> &PyramidConfig {
        &self.config
    }

    fn check_inputs(&self, fixed: &Tensor, moving: &Tensor) -> Result<()> {
        if fixed.dims() != moving.dims() {
            return Err(Error::shape("register", fixed.dims(), moving.dims()));
        }
        let (_, c, h, w) = fixed.dims4()?;
        let d = self.config.divisor();
        if c != 1 || h % d != 0 || w % d != 0 {
            return Err(Error::invalid(
                "register",
                format!("need [B, 1, H, W] with H, W divisible by {d}, got {:?}", fixed.dims()),
            ));
        }
        Ok(())
    }

    /// Feature pyramids of both inputs, finest level first.
    pub fn extract_pyramids(&self, fixed: &Tensor, moving: &Tensor) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        self.check_inputs(fixed, moving)?;
        Ok((self.fixed_extractor.forward(fixed)?, self.moving_extractor.forward(moving)?))
    }

    /// Top-level decoding: decoded features and the coarsest sub-field.
    pub fn decode_top(&self, fixed_top: &Tensor, moving_top: &Tensor) -> Result<(Tensor, Tensor)> {
        let x = Tensor::cat(&[fixed_top, moving_top], 1)?;
        let d = self.top2.forward(&self.top1.forward(&x)?.relu()?)?.relu()?;
        let phi = self.top_head.forward(&d)?;
        Ok((d, phi))
    }

    /// The fusion module that merges sub-fields onto scale `s < K`.
    pub fn dff(&self, s: usize) -> Option<&Dff> {
        self.dffs.get(s)
    }

    pub fn pff(&self, s: usize) -> Option<&Pff> {
        self.stages.get(s).map(|st| &st.pff)
    }

    /// Registers batched `[B, 1, H, W]` images.
    pub fn forward(&self, fixed: &Tensor, moving: &Tensor) -> Result<RegistrationOutput> {
        let (cf, cm) = self.extract_pyramids(fixed, moving)?;
        let k = self.config.levels;
        let steps = self.config.steps;
        let (mut decoded, top_phi) = self.decode_top(&cf[k], &cm[k])?;

        let mut subfields: Vec<Option<Tensor>> = vec![None; k + 1];
        subfields[k] = Some(top_phi);
        let mut fused_fields: Vec<Option<Tensor>> = vec![None; k];
        for s in (0..k).rev() {
            let coarser: Vec<Tensor> = (s + 1..=k).rev().map(|i| subfields[i].clone().unwrap()).collect();
            let scales: Vec<usize> = (s + 1..=k).rev().collect();
            let fused = self.dffs[s].forward(&coarser, &scales, steps)?.field;
            let warped = ops::warp(&cm[s], &fused)?;
            let stage = &self.stages[s];
            let (_, _, h, w) = cf[s].dims4()?;
            let up = stage.project.forward(&ops::resize_bilinear(&decoded, h, w)?)?;
            let refined = stage.pff.forward(&warped, &up, &cf[s])?.out;
            decoded = stage.est2.forward(&stage.est1.forward(&refined)?.relu()?)?.relu()?;
            subfields[s] = Some(stage.head.forward(&decoded)?);
            fused_fields[s] = Some(fused);
        }
        let subfields: Vec<Tensor> = subfields.into_iter().map(Option::unwrap).collect();
        let all: Vec<Tensor> = subfields.iter().rev().cloned().collect();
        let scales: Vec<usize> = (0..=k).rev().collect();
        let closing = self.closing.forward(&all, &scales, steps)?;
        let registered = ops::warp(moving, &closing.field)?;
        Ok(RegistrationOutput {
            final_field: closing.field,
            final_velocity: closing.velocity,
            subfields,
            fused_fields: fused_fields.into_iter().map(Option::unwrap).collect(),
            registered,
        })
    }

    /// Registers one image pair, returning the field and the registered image.
    pub fn register(&self, fixed: &Image, moving: &Image) -> Result<(DisplacementField, Image)> {
        let dtype = self.dtype();
        let out = self.forward(
            &fixed.to_gray()?.to_dtype(dtype)?.batched()?,
            &moving.to_gray()?.to_dtype(dtype)?.batched()?,
        )?;
        let field = DisplacementField::from_tensor(out.final_field.squeeze(0)?.to_dtype(DType::F32)?)?;
        let registered = Image::from_tensor(out.registered.squeeze(0)?.to_dtype(DType::F32)?)?;
        Ok((field, registered))
    }

    fn dtype(&self) -> DType {
        self.top_head.dtype()
    }
}
