//! Training objectives for registration and fusion. Images are batched
//! `[B, 1, H, W]` tensors in `[0, 1]`; fields are `[B, 2, H, W]`. Every loss
//! returns a scalar tensor that is differentiable with respect to its inputs
//! (saliency weights are treated as constants).

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::field::ops;
use crate::kernels;
use crate::nn::RegistrationOutput;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_rev: f64,
    pub lambda_sm: f64,
    pub lambda_ssim: f64,
    pub lambda_jg: f64,
    pub lambda_svs: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rev: 0.2,
            lambda_sm: 10.0,
            lambda_ssim: 1.0,
            lambda_jg: 20.0,
            lambda_svs: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_rev, self.lambda_sm, self.lambda_ssim, self.lambda_jg, self.lambda_svs];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("LossWeights", format!("weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Maps an image batch to the feature maps compared by the similarity loss.
pub trait FeatureMapper {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

/// The image itself plus successively blurred, half-resolution copies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GaussianPyramid {
    pub levels: usize,
}

impl Default for GaussianPyramid {
    fn default() -> Self {
        Self { levels: 3 }
    }
}

const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

fn per_channel(x: &Tensor) -> Result<(Tensor, [usize; 4])> {
    let (b, c, h, w) = x.dims4()?;
    Ok((x.reshape((b * c, 1, h, w))?, [b, c, h, w]))
}

/// Separable 5-tap binomial blur with replicated borders, then stride-2 subsampling.
pub fn blur_downsample(x: &Tensor) -> Result<Tensor> {
    let (flat, [b, c, _, _]) = per_channel(x)?;
    let kx = Tensor::from_vec(BINOMIAL5.to_vec(), (1, 1, 1, 5), &Device::Cpu)?.to_dtype(x.dtype())?;
    let ky = kx.reshape((1, 1, 5, 1))?;
    let padded = flat.pad_with_same(2, 2, 2)?.pad_with_same(3, 2, 2)?;
    let y = kernels::conv2d(&padded, &kx, 1, 0)?;
    let y = kernels::conv2d(&y, &ky, 1, 0)?;
    let (h, w) = (y.dims()[2], y.dims()[3]);
    let rows: Vec<u32> = (0..h as u32).step_by(2).collect();
    let cols: Vec<u32> = (0..w as u32).step_by(2).collect();
    let (nr, nc) = (rows.len(), cols.len());
    let y = y
        .index_select(&Tensor::from_vec(rows, nr, &Device::Cpu)?, 2)?
        .index_select(&Tensor::from_vec(cols, nc, &Device::Cpu)?, 3)?;
    Ok(y.reshape((b, c, nr, nc))?)
}

impl FeatureMapper for GaussianPyramid {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = vec![x.clone()];
        for _ in 1..self.levels {
            let next = blur_downsample(out.last().unwrap())?;
            out.push(next);
        }
        Ok(out)
    }
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::shape("loss", a.dims(), b.dims()));
    }
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Mean over feature levels of the mean absolute feature difference.
pub fn feature_distance(a: &Tensor, b: &Tensor, psi: &dyn FeatureMapper) -> Result<Tensor> {
    let fa = psi.features(a)?;
    let fb = psi.features(b)?;
    if fa.is_empty() || fa.len() != fb.len() {
        return Err(Error::invalid("feature_distance", "feature mapper returned mismatched levels"));
    }
    let mut total = mean_abs_diff(&fa[0], &fb[0])?;
    for (x, y) in fa.iter().zip(&fb).skip(1) {
        total = (total + mean_abs_diff(x, y)?)?;
    }
    Ok((total / fa.len() as f64)?)
}

/// Bidirectional similarity: `registered` against `fixed`, plus `lambda_rev`
/// times `fixed` warped by the inverse field against `moving`.
pub fn loss_sim_bi(
    registered: &Tensor,
    fixed: &Tensor,
    moving: &Tensor,
    inverse_field: &Tensor,
    psi: &dyn FeatureMapper,
    lambda_rev: f64,
) -> Result<Tensor> {
    let forward = feature_distance(registered, fixed, psi)?;
    if lambda_rev == 0.0 {
        return Ok(forward);
    }
    let back = ops::warp(fixed, inverse_field)?;
    let reverse = feature_distance(&back, moving, psi)?;
    Ok((forward + (reverse * lambda_rev)?)?)
}

/// Mean absolute forward difference per axis (trailing row/column excluded),
/// averaged over channels and positions and summed over the two axes.
pub fn loss_smooth(field: &Tensor) -> Result<Tensor> {
    let rank = field.rank();
    let (h, w) = (field.dims()[rank - 2], field.dims()[rank - 1]);
    if h < 2 || w < 2 {
        return Err(Error::invalid("loss_smooth", format!("needs at least 2x2, got {h}x{w}")));
    }
    let dx = (field.narrow(rank - 1, 1, w - 1)? - field.narrow(rank - 1, 0, w - 1)?)?;
    let dy = (field.narrow(rank - 2, 1, h - 1)? - field.narrow(rank - 2, 0, h - 1)?)?;
    Ok((dx.abs()?.mean_all()? + dy.abs()?.mean_all()?)?)
}

/// Components of the registration objective.
#[derive(Debug, Clone)]
pub struct RegistrationLoss {
    pub similarity: Tensor,
    pub smooth: Tensor,
    pub total: Tensor,
}

pub fn loss_reg_total(
    out: &RegistrationOutput,
    fixed: &Tensor,
    moving: &Tensor,
    psi: &dyn FeatureMapper,
    w: &LossWeights,
    steps: usize,
) -> Result<RegistrationLoss> {
    let inverse = if w.lambda_rev == 0.0 {
        out.final_field.zeros_like()?
    } else {
        ops::integrate_velocity(&out.final_velocity.neg()?, steps)?
    };
    let similarity = loss_sim_bi(&out.registered, fixed, moving, &inverse, psi, w.lambda_rev)?;
    let smooth = loss_smooth(&out.final_field)?;
    let total = (&similarity + (&smooth * w.lambda_sm)?)?;
    Ok(RegistrationLoss {
        similarity,
        smooth,
        total,
    })
}

const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Number of MS-SSIM scales used for an `h x w` image.
pub fn ms_ssim_scales(h: usize, w: usize) -> usize {
    let m = h.min(w) as f64 / 8.0;
    if m < 2.0 {
        1
    } else {
        (m.log2().floor() as usize).clamp(1, 5)
    }
}

/// Odd Gaussian window length used at a scale whose smaller side is `side`.
pub fn ssim_window(side: usize) -> usize {
    let largest_odd = if side % 2 == 1 { side } else { side.saturating_sub(1) };
    largest_odd.clamp(1, 11)
}

/// Normalized 1-D Gaussian taps of length `n`, standard deviation 1.5.
pub fn ssim_taps(n: usize) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..n).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Per-image luminance*contrast*structure map mean and contrast*structure mean
/// over the valid region, each `[B]`.
fn ssim_terms(x: &Tensor, y: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, _, h, w) = x.dims4()?;
    let n = ssim_window(h.min(w));
    let taps = ssim_taps(n);
    let dtype = x.dtype();
    let kx = Tensor::from_vec(taps.clone(), (1, 1, 1, n), &Device::Cpu)?.to_dtype(dtype)?;
    let ky = Tensor::from_vec(taps, (1, 1, n, 1), &Device::Cpu)?.to_dtype(dtype)?;
    let stack = Tensor::cat(&[x, y, &x.sqr()?, &y.sqr()?, &(x * y)?], 1)?;
    let (flat, _) = per_channel(&stack)?;
    let filt = kernels::conv2d(&kernels::conv2d(&flat, &kx, 1, 0)?, &ky, 1, 0)?;
    let (ho, wo) = (filt.dims()[2], filt.dims()[3]);
    let filt = filt.reshape((b, 5, ho, wo))?;
    let mx = filt.narrow(1, 0, 1)?;
    let my = filt.narrow(1, 1, 1)?;
    let sxx = (filt.narrow(1, 2, 1)? - mx.sqr()?)?;
    let syy = (filt.narrow(1, 3, 1)? - my.sqr()?)?;
    let sxy = (filt.narrow(1, 4, 1)? - (&mx * &my)?)?;
    let lum = (((&mx * &my)? * 2.0)? + SSIM_C1)?.div(&((mx.sqr()? + my.sqr()?)? + SSIM_C1)?)?;
    let cs = ((sxy * 2.0)? + SSIM_C2)?.div(&((sxx + syy)? + SSIM_C2)?)?;
    let full = (&lum * &cs)?;
    Ok((full.flatten_from(1)?.mean(1)?, cs.flatten_from(1)?.mean(1)?))
}

/// Multi-scale SSIM per image, `[B]`.
pub fn ms_ssim(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if x.dims() != y.dims() {
        return Err(Error::shape("ms_ssim", x.dims(), y.dims()));
    }
    let (_, _, h, w) = x.dims4()?;
    let scales = ms_ssim_scales(h, w);
    let norm: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let (mut a, mut b) = (x.clone(), y.clone());
    let mut log_total: Option<Tensor> = None;
    for (j, weight) in MS_SSIM_WEIGHTS[..scales].iter().enumerate() {
        let (full, cs) = ssim_terms(&a, &b)?;
        let term = if j + 1 == scales { full } else { cs };
        let log_term = term.maximum(1e-12)?.log()?;
        let weighted = (log_term * (weight / norm))?;
        log_total = Some(match log_total {
            None => weighted,
            Some(t) => (t + weighted)?,
        });
        if j + 1 < scales {
            a = a.avg_pool2d(2)?;
            b = b.avg_pool2d(2)?;
        }
    }
    Ok(log_total.unwrap().exp()?)
}

/// `(1 - MS-SSIM(fused, ir)) + (1 - MS-SSIM(fused, vis))`, batch mean.
pub fn loss_ms_ssim(fused: &Tensor, ir: &Tensor, vis: &Tensor) -> Result<Tensor> {
    let a = ms_ssim(fused, ir)?.affine(-1.0, 1.0)?;
    let b = ms_ssim(fused, vis)?.affine(-1.0, 1.0)?;
    Ok((a + b)?.mean_all()?)
}

const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Sobel gradient magnitude `sqrt(gx² + gy² + 1e-12)` with replicated borders.
pub fn sobel_magnitude(x: &Tensor) -> Result<Tensor> {
    let (flat, [b, c, h, w]) = per_channel(x)?;
    let mut k = SOBEL_X.to_vec();
    k.extend_from_slice(&SOBEL_Y);
    let kernel = Tensor::from_vec(k, (2, 1, 3, 3), &Device::Cpu)?.to_dtype(x.dtype())?;
    let padded = flat.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?;
    let g = kernels::conv2d(&padded, &kernel, 1, 0)?;
    let mag = (g.sqr()?.sum_keepdim(1)? + 1e-12)?.sqrt()?;
    Ok(mag.reshape((b, c, h, w))?)
}

/// Mean absolute gap between the fused gradient magnitude and the larger source magnitude.
pub fn loss_jgrad(fused: &Tensor, ir: &Tensor, vis: &Tensor) -> Result<Tensor> {
    let target = sobel_magnitude(ir)?.maximum(&sobel_magnitude(vis)?)?;
    mean_abs_diff(&sobel_magnitude(fused)?, &target)
}

/// Histogram-contrast saliency of one image given as row-major samples in `[0, 1]`:
/// each pixel scores `Σ_b freq(b)·|bin(p) − b| / 255`, then the map is min-max
/// normalized. A map without contrast is 0.5 everywhere.
pub fn saliency_values(values: &[f64]) -> Vec<f64> {
    normalize_min_max(&saliency_raw(values))
}

/// Unnormalized histogram-contrast scores, exposed for closed-form checks.
pub fn saliency_raw(values: &[f64]) -> Vec<f64> {
    let bins: Vec<usize> = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as usize).collect();
    let n = bins.len().max(1) as f64;
    let mut counts = [0u64; 256];
    for &q in &bins {
        counts[q] += 1;
    }
    bins.iter()
        .map(|&q| {
            let total: u64 = counts.iter().enumerate().map(|(b, &c)| c * q.abs_diff(b) as u64).sum();
            total as f64 / (255.0 * n)
        })
        .collect()
}

fn normalize_min_max(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 1e-12) {
        return vec![0.5; raw.len()];
    }
    raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Saliency maps of a `[B, 1, H, W]` batch as a constant tensor of the same shape.
pub fn saliency_map(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let values = x.detach().to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let mut out = Vec::with_capacity(values.len());
    for img in values.chunks(h * w) {
        out.extend(saliency_values(img));
    }
    Ok(Tensor::from_vec(out, (b, c, h, w), &Device::Cpu)?.to_dtype(x.dtype())?)
}

/// Infrared weight `S_ir / (S_ir + S_vis + 1e-6)`.
pub fn saliency_weight(ir: &Tensor, vis: &Tensor) -> Result<Tensor> {
    let s_ir = saliency_map(ir)?;
    let s_vis = saliency_map(vis)?;
    Ok(s_ir.div(&((&s_ir + s_vis)? + 1e-6)?)?)
}

/// Mean absolute gap between `fused` and the saliency-weighted source blend.
pub fn loss_svs(fused: &Tensor, ir: &Tensor, vis: &Tensor) -> Result<Tensor> {
    if ir.dims() != vis.dims() {
        return Err(Error::shape("loss_svs", ir.dims(), vis.dims()));
    }
    let w_ir = saliency_weight(ir, vis)?;
    let target = (vis + (ir - vis)?.mul(&w_ir)?)?;
    mean_abs_diff(fused, &target)
}

/// Components of the fusion objective.
#[derive(Debug, Clone)]
pub struct FusionLoss {
    pub ms_ssim: Tensor,
    pub jgrad: Tensor,
    pub svs: Tensor,
    pub total: Tensor,
}

pub fn loss_fusion_total(fused: &Tensor, ir: &Tensor, vis: &Tensor, w: &LossWeights) -> Result<FusionLoss> {
    let ms = loss_ms_ssim(fused, ir, vis)?;
    let jg = loss_jgrad(fused, ir, vis)?;
    let svs = loss_svs(fused, ir, vis)?;
    let total = (((&ms * w.lambda_ssim)? + (&jg * w.lambda_jg)?)? + (&svs * w.lambda_svs)?)?;
    Ok(FusionLoss {
        ms_ssim: ms,
        jgrad: jg,
        svs,
        total,
    })
}
