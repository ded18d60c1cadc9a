//! Grayscale image container backed by a `[C, H, W]` tensor with values in `[0, 1]`.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{DynamicImage, ImageBuffer, Luma};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Image {
    data: Tensor,
}

impl Image {
    /// Wraps a `[C, H, W]` tensor.
    pub fn from_tensor(data: Tensor) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::invalid(
                "Image::from_tensor",
                format!("expected [C, H, W], got {:?}", data.dims()),
            ));
        }
        Ok(Self { data })
    }

    /// Builds a single-channel image from row-major samples.
    pub fn from_gray(values: Vec<f32>, height: usize, width: usize) -> Result<Self> {
        Self::from_vec(values, 1, height, width)
    }

    pub fn from_vec(values: Vec<f32>, channels: usize, height: usize, width: usize) -> Result<Self> {
        if values.len() != channels * height * width {
            return Err(Error::invalid(
                "Image::from_vec",
                format!(
                    "{} samples for a {channels}x{height}x{width} image",
                    values.len()
                ),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("Image::from_vec", "non-finite sample"));
        }
        let data = Tensor::from_vec(values, (channels, height, width), &Device::Cpu)?;
        Ok(Self { data })
    }

    pub fn constant(value: f32, height: usize, width: usize) -> Result<Self> {
        Self::from_gray(vec![value; height * width], height, width)
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels(), self.height(), self.width())
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// The image as a batch of one, `[1, C, H, W]`.
    pub fn batched(&self) -> Result<Tensor> {
        Ok(self.data.unsqueeze(0)?)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            data: self.data.to_dtype(dtype)?,
        })
    }

    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self
            .data
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?)
    }

    pub fn to_vec_f64(&self) -> Result<Vec<f64>> {
        Ok(self
            .data
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?)
    }

    pub fn clamp01(&self) -> Result<Self> {
        Ok(Self {
            data: self.data.clamp(0.0, 1.0)?,
        })
    }

    /// Mirror along the x axis.
    pub fn flip_horizontal(&self) -> Result<Self> {
        let (c, h, w) = self.dims();
        let values = self.to_vec()?;
        let mut out = vec![0.0; values.len()];
        for p in 0..c * h {
            for x in 0..w {
                out[p * w + x] = values[p * w + (w - 1 - x)];
            }
        }
        Self::from_vec(out, c, h, w)
    }

    /// Averages channels into a single luminance-like channel.
    pub fn to_gray(&self) -> Result<Self> {
        if self.channels() == 1 {
            return Ok(self.clone());
        }
        Ok(Self {
            data: self.data.mean_keepdim(0)?,
        })
    }

    /// Loads an 8- or 16-bit PNG. Colour input is reduced to luminance.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let decoded = image::open(path)?;
        let (width, height) = (decoded.width() as usize, decoded.height() as usize);
        let values: Vec<f32> = match decoded {
            DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
            | DynamicImage::ImageRgb16(_)
            | DynamicImage::ImageRgba16(_) => decoded
                .to_luma16()
                .into_raw()
                .into_iter()
                .map(|v| v as f32 / 65535.0)
                .collect(),
            other => other
                .to_luma8()
                .into_raw()
                .into_iter()
                .map(|v| v as f32 / 255.0)
                .collect(),
        };
        Self::from_gray(values, height, width)
    }

    /// Writes an 8-bit grayscale PNG; samples are clamped to `[0, 1]` first.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let gray = self.to_gray()?;
        let raw: Vec<u8> = gray
            .to_vec()?
            .into_iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_raw(self.width() as u32, self.height() as u32, raw)
                .ok_or_else(|| Error::invalid("Image::save_png", "buffer size"))?;
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        buf.save(path)?;
        Ok(())
    }

    /// Writes a 16-bit grayscale PNG.
    pub fn save_png16(&self, path: impl AsRef<Path>) -> Result<()> {
        let gray = self.to_gray()?;
        let raw: Vec<u16> = gray
            .to_vec()?
            .into_iter()
            .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width() as u32, self.height() as u32, raw)
                .ok_or_else(|| Error::invalid("Image::save_png16", "buffer size"))?;
        buf.save(path.as_ref())?;
        Ok(())
    }
}
