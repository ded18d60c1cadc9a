//! Absolute-difference heat maps.
//!
//! Colormap: the classic "hot" ramp. For a normalized error `t` the RGB
//! channels are `clamp(3t)`, `clamp(3t - 1)` and `clamp(3t - 2)`, so zero is
//! black, one third is red, two thirds yellow and one white.

use std::path::Path;

use image::{ImageBuffer, Rgb};
use mrf_core::Image;

use crate::error::{HarnessError, Result};

/// `|a - b|` per pixel, min-max normalized to `[0, 1]`. A constant difference
/// maps to all zeros.
pub fn error_map(a: &Image, b: &Image) -> Result<Vec<f64>> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(HarnessError::data(format!(
            "error map inputs differ in size: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let diff: Vec<f64> = a
        .to_gray()?
        .to_vec_f64()?
        .iter()
        .zip(b.to_gray()?.to_vec_f64()?)
        .map(|(x, y)| (x - y).abs())
        .collect();
    let lo = diff.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = diff.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Ok(diff
        .into_iter()
        .map(|d| if span > 0.0 { (d - lo) / span } else { 0.0 })
        .collect())
}

/// The "hot" colormap at `t` in `[0, 1]`.
pub fn hot(t: f64) -> [u8; 3] {
    let c = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [c(3.0 * t), c(3.0 * t - 1.0), c(3.0 * t - 2.0)]
}

/// Renders [`error_map`] of `a` and `b` through [`hot`] into an RGB PNG.
pub fn write_error_map(a: &Image, b: &Image, out: &Path) -> Result<Vec<f64>> {
    let map = error_map(a, b)?;
    let raw: Vec<u8> = map.iter().flat_map(|&t| hot(t)).collect();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(a.width() as u32, a.height() as u32, raw)
        .ok_or_else(|| HarnessError::data("error map buffer size"))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    buf.save(out).map_err(|e| HarnessError::data(format!("{}: {e}", out.display())))?;
    Ok(map)
}
