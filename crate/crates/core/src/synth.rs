//! Synthetic misalignment: a random affine warp followed by a smooth elastic
//! displacement, with the composed ground-truth field returned alongside.
//!
//! Affine matrices act on normalized coordinates in `[-1, 1]` (pixel centres at
//! `(2x + 1) / W - 1`), so translations are fractions of the half-span and
//! rotations pivot about the image centre. Output pixels are mapped backward:
//! the output at `p` samples the source at `M · p`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::field::{self, DisplacementField};
use crate::image::Image;

/// Seed for sample `index` of a dataset generated from `root`.
pub fn sample_seed(root: u64, index: u64) -> u64 {
    root.wrapping_add(index)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    /// Rotation in radians.
    pub theta: f64,
    /// Translations as fractions of the normalized half-span.
    pub tx: f64,
    pub ty: f64,
    /// Scale factors.
    pub cx: f64,
    pub cy: f64,
    /// Shear factors.
    pub sx: f64,
    pub sy: f64,
}

impl AffineParams {
    pub fn identity() -> Self {
        Self {
            theta: 0.0,
            tx: 0.0,
            ty: 0.0,
            cx: 1.0,
            cy: 1.0,
            sx: 0.0,
            sy: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [self.theta, self.tx, self.ty, self.cx, self.cy, self.sx, self.sy];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("AffineParams", "non-finite parameter"));
        }
        if self.cx <= 0.0 || self.cy <= 0.0 {
            return Err(Error::invalid("AffineParams", "scale factors must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElasticParams {
    /// Gaussian standard deviation in pixels.
    pub sigma: f64,
    /// Magnitude scale applied after smoothing.
    pub alpha: f64,
}

/// Closed-form affine matrix from rotation, translation, scale and shear.
pub fn affine_matrix(p: &AffineParams) -> Matrix3<f64> {
    let (s, c) = p.theta.sin_cos();
    Matrix3::new(
        p.cx * c + p.sx * p.cx * s,
        -p.cx * s + p.sx * p.cx * c,
        p.tx,
        p.sy * p.cy * c + p.cy * s,
        -p.sy * p.cy * s + p.cy * c,
        p.ty,
        0.0,
        0.0,
        1.0,
    )
}

fn to_normalized(i: f64, n: usize) -> f64 {
    (2.0 * i + 1.0) / n as f64 - 1.0
}


/// Pixel displacement field equivalent to backward-mapping through `m`.
pub fn affine_flow(height: usize, width: usize, m: &Matrix3<f64>) -> Result<DisplacementField> {
    if m.fixed_view::<2, 2>(0, 0).determinant().abs() < 1e-12 {
        return Err(Error::invalid("warp_affine", "singular affine matrix"));
    }
    let n = height * width;
    let mut values = vec![0.0f32; 2 * n];
    for y in 0..height {
        for x in 0..width {
            let (u, v) = (to_normalized(x as f64, width), to_normalized(y as f64, height));
            let q = m * Vector3::new(u, v, 1.0);
            // exact zero for the identity, unlike a round trip through pixel coordinates
            values[y * width + x] = ((q[0] - u) * width as f64 / 2.0) as f32;
            values[n + y * width + x] = ((q[1] - v) * height as f64 / 2.0) as f32;
        }
    }
    DisplacementField::from_vec(values, height, width)
}

/// Warps `image` through `m` with bilinear sampling and border replication.
pub fn warp_affine(image: &Image, m: &Matrix3<f64>) -> Result<Image> {
    let flow = affine_flow(image.height(), image.width(), m)?;
    field::warp(image, &flow)
}

/// Normalized Gaussian taps truncated at radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable blur with border-replicating (clamped) indexing.
pub fn blur_replicate(values: &[f64], height: usize, width: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut rows = vec![0.0; values.len()];
    for y in 0..height {
        for x in 0..width {
            rows[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * values[y * width + clamp(x as isize + k as isize - r, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; values.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * rows[clamp(y as isize + k as isize - r, height) * width + x])
                .sum();
        }
    }
    out
}

/// Uniform `[-1, 1]` noise per pixel and axis, Gaussian-smoothed, scaled by alpha.
pub fn elastic_field<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    p: &ElasticParams,
    rng: &mut R,
) -> Result<DisplacementField> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("elastic_field", "empty grid"));
    }
    if !(p.sigma > 0.0) || !(p.alpha >= 0.0) {
        return Err(Error::invalid(
            "elastic_field",
            format!("need sigma > 0 and alpha >= 0, got {p:?}"),
        ));
    }
    let n = height * width;
    let noise: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let kernel = gaussian_kernel(p.sigma);
    let mut values = Vec::with_capacity(2 * n);
    for axis in noise.chunks(n) {
        values.extend(
            blur_replicate(axis, height, width, &kernel)
                .into_iter()
                .map(|v| (p.alpha * v) as f32),
        );
    }
    DisplacementField::from_vec(values, height, width)
}

/// Inclusive sampling interval; `lo == hi` pins the parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamRange {
    pub lo: f64,
    pub hi: f64,
}

impl ParamRange {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

/// Named bundle of parameter ranges for synthetic misalignment.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationRegime {
    pub name: String,
    pub theta: ParamRange,
    pub tx: ParamRange,
    pub ty: ParamRange,
    pub cx: ParamRange,
    pub cy: ParamRange,
    pub sx: ParamRange,
    pub sy: ParamRange,
    pub sigma: ParamRange,
    pub alpha: ParamRange,
}

fn degrees(d: f64) -> f64 {
    d * PI / 180.0
}

impl DeformationRegime {
    fn base(name: &str, theta: ParamRange, t: ParamRange, sigma: ParamRange, alpha: ParamRange) -> Self {
        Self {
            name: name.to_string(),
            theta,
            tx: t,
            ty: t,
            cx: ParamRange::fixed(1.0),
            cy: ParamRange::fixed(1.0),
            sx: ParamRange::fixed(0.0),
            sy: ParamRange::fixed(0.0),
            sigma,
            alpha,
        }
    }

    pub fn slight() -> Self {
        Self::base(
            "slight",
            ParamRange::fixed(0.0),
            ParamRange::new(-0.01, 0.01),
            ParamRange::new(24.0, 32.0),
            ParamRange::fixed(1.0),
        )
    }

    pub fn moderate() -> Self {
        Self::base(
            "moderate",
            ParamRange::new(degrees(-5.0), degrees(5.0)),
            ParamRange::new(-0.02, 0.02),
            ParamRange::new(16.0, 32.0),
            ParamRange::new(1.0, 1.2),
        )
    }

    pub fn severe() -> Self {
        Self::base(
            "severe",
            ParamRange::new(degrees(-10.0), degrees(10.0)),
            ParamRange::new(-0.02, 0.05),
            ParamRange::new(16.0, 24.0),
            ParamRange::new(1.0, 1.2),
        )
    }

    /// Every range collapsed onto the identity transform.
    pub fn identity() -> Self {
        Self::base(
            "identity",
            ParamRange::fixed(0.0),
            ParamRange::fixed(0.0),
            ParamRange::fixed(1.0),
            ParamRange::fixed(0.0),
        )
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "slight" => Some(Self::slight()),
            "moderate" => Some(Self::moderate()),
            "severe" => Some(Self::severe()),
            "identity" => Some(Self::identity()),
            _ => None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (AffineParams, ElasticParams) {
        let affine = AffineParams {
            theta: self.theta.sample(rng),
            tx: self.tx.sample(rng),
            ty: self.ty.sample(rng),
            cx: self.cx.sample(rng),
            cy: self.cy.sample(rng),
            sx: self.sx.sample(rng),
            sy: self.sy.sample(rng),
        };
        let elastic = ElasticParams {
            sigma: self.sigma.sample(rng),
            alpha: self.alpha.sample(rng),
        };
        (affine, elastic)
    }

    pub fn contains(&self, a: &AffineParams, e: &ElasticParams) -> bool {
        self.theta.contains(a.theta)
            && self.tx.contains(a.tx)
            && self.ty.contains(a.ty)
            && self.cx.contains(a.cx)
            && self.cy.contains(a.cy)
            && self.sx.contains(a.sx)
            && self.sy.contains(a.sy)
            && self.sigma.contains(e.sigma)
            && self.alpha.contains(e.alpha)
    }
}

/// A distorted image with the parameters and ground truth that produced it.
#[derive(Debug, Clone)]
pub struct Misaligned {
    pub moving: Image,
    /// Total displacement: `warp(source, field)` reproduces `moving`.
    pub field: DisplacementField,
    pub affine: AffineParams,
    pub elastic: ElasticParams,
}

/// Applies a sampled affine warp, then a sampled elastic warp.
pub fn synthesize_misaligned<R: Rng + ?Sized>(
    image: &Image,
    regime: &DeformationRegime,
    rng: &mut R,
) -> Result<Misaligned> {
    let (affine, elastic) = regime.sample(rng);
    affine.validate()?;
    let (h, w) = (image.height(), image.width());
    let flow = affine_flow(h, w, &affine_matrix(&affine))?;
    let elastic_disp = elastic_field(h, w, &elastic, rng)?;
    let affine_img = field::warp(image, &flow)?;
    let moving = field::warp(&affine_img, &elastic_disp)?;
    let total = field::compose(&flow, &elastic_disp)?;
    Ok(Misaligned {
        moving,
        field: total,
        affine,
        elastic,
    })
}

/// Smooth procedural test image: a sum of random Gaussian blobs rescaled to
/// `[0.1, 0.9]`.
pub fn procedural_image<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Result<Image> {
    let scale = height.min(width) as f64;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..12)
        .map(|_| {
            (
                rng.random_range(-0.1..1.1) * width as f64,
                rng.random_range(-0.1..1.1) * height as f64,
                rng.random_range(0.05..0.12) * scale,
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    let mut values = vec![0.0f64; height * width];
    for y in 0..height {
        for x in 0..width {
            values[y * width + x] = blobs
                .iter()
                .map(|&(cx, cy, s, a)| {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    a * (-d2 / (2.0 * s * s)).exp()
                })
                .sum();
        }
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    Image::from_gray(
        values.iter().map(|v| (0.1 + 0.8 * (v - lo) / span) as f32).collect(),
        height,
        width,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &Matrix3<f64>, b: &Matrix3<f64>) -> bool {
        (a - b).abs().max() < 1e-12
    }

    #[test]
    fn affine_matrix_special_cases() {
        assert!(close(&affine_matrix(&AffineParams::identity()), &Matrix3::identity()));
        let rot = AffineParams {
            theta: PI / 2.0,
            ..AffineParams::identity()
        };
        let want = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!(close(&affine_matrix(&rot), &want));
        let scale = AffineParams {
            cx: 2.0,
            ..AffineParams::identity()
        };
        assert!(close(&affine_matrix(&scale), &Matrix3::new(2.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0)));
    }

    #[test]
    fn rotation_matrix_matches_composed_rotation() {
        // scale-free, shear-free parameters reduce to a plain rotation
        for &t in &[0.3, -1.1, 2.5] {
            let m = affine_matrix(&AffineParams {
                theta: t,
                tx: 0.2,
                ..AffineParams::identity()
            });
            let r = nalgebra::Rotation2::new(t);
            let mut want = r.to_homogeneous();
            want[(0, 2)] = 0.2;
            assert!(close(&m, &want));
        }
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let img = Image::constant(0.5, 4, 4).unwrap();
        let mut m = Matrix3::identity();
        m[(0, 0)] = 0.0;
        m[(0, 1)] = 0.0;
        assert!(warp_affine(&img, &m).is_err());
        assert!(warp_affine(&img, &Matrix3::identity()).is_ok());
    }

    #[test]
    fn kernel_is_normalized_with_three_sigma_radius() {
        let k = gaussian_kernel(2.3);
        assert_eq!(k.len(), 2 * 7 + 1);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn elastic_field_bounds_and_zero_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = elastic_field(16, 16, &ElasticParams { sigma: 4.0, alpha: 0.0 }, &mut rng).unwrap();
        assert!(z.to_vec_f64().unwrap().iter().all(|&v| v == 0.0));
        let f = elastic_field(40, 40, &ElasticParams { sigma: 24.0, alpha: 1.0 }, &mut rng).unwrap();
        assert!(f.to_vec_f64().unwrap().iter().all(|v| v.abs() <= 1.0));
        assert!(elastic_field(4, 4, &ElasticParams { sigma: 0.0, alpha: 1.0 }, &mut rng).is_err());
    }

    #[test]
    fn regimes_match_published_ranges() {
        let s = DeformationRegime::slight();
        assert_eq!(s.theta, ParamRange::fixed(0.0));
        assert_eq!(s.tx, ParamRange::new(-0.01, 0.01));
        assert_eq!(s.sigma, ParamRange::new(24.0, 32.0));
        assert_eq!(s.alpha, ParamRange::fixed(1.0));
        let m = DeformationRegime::moderate();
        assert!((m.theta.hi - 5.0f64.to_radians()).abs() < 1e-15);
        assert_eq!(m.sigma, ParamRange::new(16.0, 32.0));
        let v = DeformationRegime::severe();
        assert_eq!(v.ty, ParamRange::new(-0.02, 0.05));
        assert_eq!(v.sigma, ParamRange::new(16.0, 24.0));
        assert_eq!(v.alpha, ParamRange::new(1.0, 1.2));
        for r in [&s, &m, &v] {
            assert_eq!(r.cx, ParamRange::fixed(1.0));
            assert_eq!(r.sx, ParamRange::fixed(0.0));
        }
    }

    #[test]
    fn identity_regime_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = procedural_image(16, 16, &mut rng).unwrap();
        let out = synthesize_misaligned(&img, &DeformationRegime::identity(), &mut rng).unwrap();
        assert_eq!(out.moving.to_vec().unwrap(), img.to_vec().unwrap());
        assert!(out.field.to_vec_f64().unwrap().iter().all(|&v| v == 0.0));
    }
}
