//! Deformation-field algebra: backward warping, resolution changes, composition,
//! scaling-and-squaring integration and forward-difference gradients.
//!
//! Fields are stored channel-first as `[2, H, W]` with channel 0 the
//! x-displacement and channel 1 the y-displacement, in pixels of the grid they
//! live on. Warping samples the source at `p + field(p)`; samples that fall
//! outside the domain replicate the border.
//!
//! The functions in [`ops`] work on batched `[B, C, H, W]` tensors and are
//! differentiable; the typed free functions below wrap them for single images.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::image::Image;

/// Default number of squaring steps used by [`integrate_velocity`].
pub const DEFAULT_INTEGRATION_STEPS: usize = 7;

macro_rules! field_type {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone)]
        pub struct $name {
            data: Tensor,
        }

        impl $name {
            /// Wraps a `[2, H, W]` tensor.
            pub fn from_tensor(data: Tensor) -> Result<Self> {
                if data.rank() != 3 || data.dims()[0] != 2 {
                    return Err(Error::invalid(
                        stringify!($name),
                        format!("expected [2, H, W], got {:?}", data.dims()),
                    ));
                }
                Ok(Self { data })
            }

            /// Builds a field from channel-first samples (all x components, then all y).
            pub fn from_vec(values: Vec<f32>, height: usize, width: usize) -> Result<Self> {
                if values.len() != 2 * height * width {
                    return Err(Error::invalid(
                        stringify!($name),
                        format!("{} samples for a 2x{height}x{width} field", values.len()),
                    ));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid(stringify!($name), "non-finite sample"));
                }
                Self::from_tensor(Tensor::from_vec(values, (2, height, width), &Device::Cpu)?)
            }

            pub fn zeros(height: usize, width: usize) -> Result<Self> {
                Self::constant(0.0, 0.0, height, width)
            }

            pub fn constant(dx: f32, dy: f32, height: usize, width: usize) -> Result<Self> {
                let mut values = vec![dx; height * width];
                values.extend(std::iter::repeat(dy).take(height * width));
                Self::from_vec(values, height, width)
            }

            pub fn height(&self) -> usize {
                self.data.dims()[1]
            }

            pub fn width(&self) -> usize {
                self.data.dims()[2]
            }

            pub fn tensor(&self) -> &Tensor {
                &self.data
            }

            pub fn into_tensor(self) -> Tensor {
                self.data
            }

            pub fn batched(&self) -> Result<Tensor> {
                Ok(self.data.unsqueeze(0)?)
            }

            pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
                Ok(Self { data: self.data.to_dtype(dtype)? })
            }

            /// Channel-first samples as `f64`.
            pub fn to_vec_f64(&self) -> Result<Vec<f64>> {
                Ok(self.data.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
            }

            pub fn scale(&self, factor: f64) -> Result<Self> {
                Ok(Self { data: (&self.data * factor)? })
            }
        }
    };
}

field_type!(
    /// Per-pixel displacement, `[2, H, W]`, in pixels.
    DisplacementField
);

field_type!(
    /// Stationary velocity field fed to [`integrate_velocity`].
    VelocityField
);

impl DisplacementField {
    pub fn save_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        write_raw(path.as_ref(), &self.data)
    }

    pub fn load_raw(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor(read_raw(path.as_ref())?)
    }

    /// Mean Euclidean length of the displacement vectors.
    pub fn mean_magnitude(&self) -> Result<f64> {
        let v = self.to_vec_f64()?;
        let n = v.len() / 2;
        Ok((0..n).map(|i| v[i].hypot(v[n + i])).sum::<f64>() / n as f64)
    }
}

fn same_spatial(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims()[a.rank() - 2..] != b.dims()[b.rank() - 2..] {
        return Err(Error::shape(op, a.dims(), b.dims()));
    }
    Ok(())
}

/// Batched, differentiable tensor operations. Images are `[B, C, H, W]` and
/// fields `[B, 2, H, W]`.
pub mod ops {
    use super::*;
    use crate::kernels;

    pub fn warp(src: &Tensor, field: &Tensor) -> Result<Tensor> {
        if src.rank() != 4 || field.rank() != 4 || field.dims()[1] != 2 {
            return Err(Error::shape("warp", src.dims(), field.dims()));
        }
        if src.dims()[0] != field.dims()[0] {
            return Err(Error::shape("warp", src.dims(), field.dims()));
        }
        same_spatial("warp", src, field)?;
        Ok(kernels::warp_bilinear(src, field)?)
    }

    /// Linear interpolation weights mapping `n_in` samples to `n_out`, half-pixel
    /// aligned (`src = (o + 0.5) * n_in / n_out - 0.5`, clamped to the grid).
    pub fn interpolation_matrix(n_out: usize, n_in: usize) -> Vec<f64> {
        let mut m = vec![0.0; n_out * n_in];
        let ratio = n_in as f64 / n_out as f64;
        for o in 0..n_out {
            let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            let w = src - i0 as f64;
            m[o * n_in + i0] += 1.0 - w;
            m[o * n_in + i1] += w;
        }
        m
    }

    /// Bilinear resize of the two trailing axes.
    pub fn resize_bilinear(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
        let rank = x.rank();
        let (h, w) = (x.dims()[rank - 2], x.dims()[rank - 1]);
        if (h, w) == (height, width) {
            return Ok(x.clone());
        }
        let dev = x.device();
        let ry = Tensor::from_vec(interpolation_matrix(height, h), (height, h), dev)?
            .to_dtype(x.dtype())?;
        let rx_t = Tensor::from_vec(interpolation_matrix(width, w), (width, w), dev)?
            .to_dtype(x.dtype())?
            .t()?;
        let rows = x.contiguous()?.broadcast_matmul(&rx_t.contiguous()?)?;
        Ok(ry.broadcast_matmul(&rows)?)
    }

    /// Bilinear upsampling by `factor` with magnitudes multiplied by `factor`.
    pub fn upsample_field(field: &Tensor, factor: usize) -> Result<Tensor> {
        if factor == 0 || !factor.is_power_of_two() {
            return Err(Error::invalid(
                "upsample_field",
                format!("factor {factor} is not a positive power of two"),
            ));
        }
        if factor == 1 {
            return Ok(field.clone());
        }
        let rank = field.rank();
        let (h, w) = (field.dims()[rank - 2], field.dims()[rank - 1]);
        Ok((resize_bilinear(field, h * factor, w * factor)? * factor as f64)?)
    }

    /// `(f ∘ g)(p) = g(p) + f(p + g(p))`.
    pub fn compose(f: &Tensor, g: &Tensor) -> Result<Tensor> {
        if f.dims() != g.dims() {
            return Err(Error::shape("compose", f.dims(), g.dims()));
        }
        Ok((g + warp(f, g)?)?)
    }

    /// Scaling and squaring: `φ = v / 2^steps`, then `φ ← φ ∘ φ` `steps` times.
    pub fn integrate_velocity(v: &Tensor, steps: usize) -> Result<Tensor> {
        if steps == 0 {
            return Err(Error::invalid("integrate_velocity", "steps must be at least 1"));
        }
        let mut phi = (v * (0.5f64).powi(steps as i32))?;
        for _ in 0..steps {
            phi = compose(&phi, &phi)?;
        }
        Ok(phi)
    }

    /// Forward differences along x and y, zero on the trailing row/column.
    pub fn spatial_gradient(a: &Tensor) -> Result<Gradient> {
        let rank = a.rank();
        let (h, w) = (a.dims()[rank - 2], a.dims()[rank - 1]);
        if h < 2 || w < 2 {
            return Err(Error::invalid(
                "spatial_gradient",
                format!("needs at least 2x2, got {h}x{w}"),
            ));
        }
        let ax = rank - 1;
        let ay = rank - 2;
        let dx = (a.narrow(ax, 1, w - 1)? - a.narrow(ax, 0, w - 1)?)?;
        let dx = Tensor::cat(&[&dx, &a.narrow(ax, 0, 1)?.zeros_like()?], ax)?;
        let dy = (a.narrow(ay, 1, h - 1)? - a.narrow(ay, 0, h - 1)?)?;
        let dy = Tensor::cat(&[&dy, &a.narrow(ay, 0, 1)?.zeros_like()?], ay)?;
        Ok(Gradient { dx, dy })
    }
}

/// Per-axis forward differences, each with the input's shape.
#[derive(Debug, Clone)]
pub struct Gradient {
    pub dx: Tensor,
    pub dy: Tensor,
}

/// Backward-warps `image` by `field`.
pub fn warp(image: &Image, field: &DisplacementField) -> Result<Image> {
    if (image.height(), image.width()) != (field.height(), field.width()) {
        return Err(Error::shape("warp", image.tensor().dims(), field.tensor().dims()));
    }
    let f = field.tensor().to_dtype(image.tensor().dtype())?;
    let out = ops::warp(&image.batched()?, &f.unsqueeze(0)?)?;
    Image::from_tensor(out.squeeze(0)?)
}

pub fn upsample_field(field: &DisplacementField, factor: usize) -> Result<DisplacementField> {
    DisplacementField::from_tensor(ops::upsample_field(field.tensor(), factor)?)
}

pub fn compose(f: &DisplacementField, g: &DisplacementField) -> Result<DisplacementField> {
    let out = ops::compose(&f.batched()?, &g.batched()?)?;
    DisplacementField::from_tensor(out.squeeze(0)?)
}

pub fn integrate_velocity(v: &VelocityField, steps: usize) -> Result<DisplacementField> {
    let out = ops::integrate_velocity(&v.batched()?, steps)?;
    DisplacementField::from_tensor(out.squeeze(0)?)
}

/// Group inverse of `integrate_velocity(v, steps)`.
pub fn invert_field(v: &VelocityField, steps: usize) -> Result<DisplacementField> {
    integrate_velocity(&v.scale(-1.0)?, steps)
}

/// Forward differences of an image or field tensor (any rank ≥ 2).
pub fn spatial_gradient(a: &Tensor) -> Result<Gradient> {
    ops::spatial_gradient(a)
}

fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta")
}

/// Writes a `[C, H, W]` tensor as little-endian `f32`, row-major, channel-last,
/// plus a `.meta` sidecar holding `height width channels`.
pub fn write_raw(path: &Path, data: &Tensor) -> Result<()> {
    let (c, h, w) = data.dims3()?;
    let hwc = data.to_dtype(DType::F32)?.permute((1, 2, 0))?.flatten_all()?.to_vec1::<f32>()?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut bytes = Vec::with_capacity(hwc.len() * 4);
    for v in hwc {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    let meta = meta_path(path);
    std::fs::write(&meta, format!("{h} {w} {c}\n")).map_err(|e| Error::io(&meta, e))?;
    Ok(())
}

/// Reads a raw tensor written by [`write_raw`], returning `[C, H, W]`.
pub fn read_raw(path: &Path) -> Result<Tensor> {
    let meta = meta_path(path);
    let text = std::fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
    let dims: Vec<usize> = text
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format {
            path: meta.clone(),
            reason: e.to_string(),
        })?;
    let [h, w, c] = dims[..] else {
        return Err(Error::Format {
            path: meta,
            reason: "expected `height width channels`".into(),
        });
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() != h * w * c * 4 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("{} bytes for {h}x{w}x{c} f32 samples", bytes.len()),
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Tensor::from_vec(values, (h, w, c), &Device::Cpu)?
        .permute((2, 0, 1))?
        .contiguous()?)
}
