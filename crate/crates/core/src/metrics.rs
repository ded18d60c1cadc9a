//! Registration and fusion quality metrics, computed in double precision on
//! single-channel images.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::image::Image;

/// Row-major single-channel samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub data: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl Plane {
    pub fn new(data: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        if data.len() != height * width || data.is_empty() {
            return Err(Error::invalid(
                "Plane::new",
                format!("{} samples for {height}x{width}", data.len()),
            ));
        }
        Ok(Self { data, height, width })
    }

    pub fn from_image(img: &Image) -> Result<Self> {
        let g = img.to_gray()?;
        Self::new(g.to_vec_f64()?, g.height(), g.width())
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Plane {
        Plane {
            data: self.data.iter().map(|&v| f(v)).collect(),
            height: self.height,
            width: self.width,
        }
    }

    fn zip(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            height: self.height,
            width: self.width,
        }
    }

    fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

fn same_shape(op: &'static str, a: &Plane, b: &Plane) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape(op, &[a.height, a.width], &[b.height, b.width]));
    }
    Ok(())
}

pub fn mse(a: &Plane, b: &Plane) -> Result<f64> {
    same_shape("mse", a, b)?;
    Ok(a.zip(b, |x, y| (x - y) * (x - y)).mean())
}

/// Global zero-normalized cross-correlation; 0 when either input is constant.
pub fn ncc(a: &Plane, b: &Plane) -> Result<f64> {
    same_shape("ncc", a, b)?;
    let (ma, mb) = (a.mean(), b.mean());
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let denom = (saa * sbb).sqrt();
    if denom <= 1e-24 {
        return Ok(0.0);
    }
    Ok((sab / denom).clamp(-1.0, 1.0))
}

/// Histogram bins used by [`mutual_information`].
pub const MI_BINS: usize = 32;

fn bin(v: f64) -> usize {
    ((v.clamp(0.0, 1.0) * MI_BINS as f64) as usize).min(MI_BINS - 1)
}

/// Mutual information in bits from a 32-bin joint histogram over `[0, 1]`.
pub fn mutual_information(a: &Plane, b: &Plane) -> Result<f64> {
    same_shape("mutual_information", a, b)?;
    let n = a.data.len() as f64;
    let mut joint = vec![0.0f64; MI_BINS * MI_BINS];
    for (&x, &y) in a.data.iter().zip(&b.data) {
        joint[bin(x) * MI_BINS + bin(y)] += 1.0;
    }
    let mut pa = vec![0.0f64; MI_BINS];
    let mut pb = vec![0.0f64; MI_BINS];
    for i in 0..MI_BINS {
        for j in 0..MI_BINS {
            let p = joint[i * MI_BINS + j] / n;
            pa[i] += p;
            pb[j] += p;
        }
    }
    let mut mi = 0.0;
    for i in 0..MI_BINS {
        for j in 0..MI_BINS {
            let p = joint[i * MI_BINS + j] / n;
            if p > 0.0 {
                mi += p * (p / (pa[i] * pb[j])).log2();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// Mean Pearson correlation of the fused image with each source.
pub fn cc_fusion(fused: &Plane, ir: &Plane, vis: &Plane) -> Result<f64> {
    Ok(0.5 * (ncc(fused, ir)? + ncc(fused, vis)?))
}

/// Sum of the mutual information between the fused image and each source.
pub fn mi_fusion(fused: &Plane, ir: &Plane, vis: &Plane) -> Result<f64> {
    Ok(mutual_information(fused, ir)? + mutual_information(fused, vis)?)
}

/// Valid-mode 2-D correlation with a separable or dense square window.
fn filter_valid(x: &Plane, win: &[f64], n: usize) -> Result<Plane> {
    if x.height < n || x.width < n {
        return Err(Error::invalid(
            "metrics",
            format!("{}x{} image is smaller than the {n}x{n} window", x.height, x.width),
        ));
    }
    let (ho, wo) = (x.height - n + 1, x.width - n + 1);
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for xo in 0..wo {
            let mut acc = 0.0;
            for i in 0..n {
                let row = &x.data[(y + i) * x.width + xo..(y + i) * x.width + xo + n];
                let wrow = &win[i * n..(i + 1) * n];
                acc += row.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
            }
            out[y * wo + xo] = acc;
        }
    }
    Ok(Plane {
        data: out,
        height: ho,
        width: wo,
    })
}

/// Normalized `n x n` Gaussian window.
pub fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let mut w = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            w.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Gaussian-window SSIM (11x11, sigma 1.5, K1 = 0.01, K2 = 0.03, unit dynamic
/// range), averaged over the positions where the window fits. Smaller images
/// use the largest odd window that fits.
pub fn ssim(a: &Plane, b: &Plane) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let side = a.height.min(a.width);
    let n = if side >= 11 { 11 } else if side % 2 == 1 { side } else { side - 1 };
    let win = gaussian_window(n, 1.5);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let ma = filter_valid(a, &win, n)?;
    let mb = filter_valid(b, &win, n)?;
    let saa = filter_valid(&a.map(|v| v * v), &win, n)?;
    let sbb = filter_valid(&b.map(|v| v * v), &win, n)?;
    let sab = filter_valid(&a.zip(b, |x, y| x * y), &win, n)?;
    let mut total = 0.0;
    for i in 0..ma.data.len() {
        let (mx, my) = (ma.data[i], mb.data[i]);
        let vx = saa.data[i] - mx * mx;
        let vy = sbb.data[i] - my * my;
        let cxy = sab.data[i] - mx * my;
        total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / ma.data.len() as f64)
}

/// Mean SSIM of the fused image against each source.
pub fn ssim_fusion(fused: &Plane, ir: &Plane, vis: &Plane) -> Result<f64> {
    Ok(0.5 * (ssim(fused, ir)? + ssim(fused, vis)?))
}

fn subsample2(x: &Plane) -> Plane {
    let (h, w) = (x.height.div_ceil(2), x.width.div_ceil(2));
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for xx in 0..w {
            data.push(x.at(2 * y, 2 * xx));
        }
    }
    Plane {
        data,
        height: h,
        width: w,
    }
}

/// Pixel-domain visual information fidelity over four scales with noise
/// variance 2 on a 0..255 intensity scale. Returns 0 for a constant reference.
/// Needs both sides to be at least 41 pixels.
pub fn vif(reference: &Plane, distorted: &Plane) -> Result<f64> {
    same_shape("vif", reference, distorted)?;
    const EPS: f64 = 1e-10;
    const SIGMA_NSQ: f64 = 2.0;
    let mut r = reference.map(|v| v * 255.0);
    let mut d = distorted.map(|v| v * 255.0);
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 1..=4 {
        let n = (1usize << (5 - scale)) + 1;
        let win = gaussian_window(n, n as f64 / 5.0);
        if scale > 1 {
            r = subsample2(&filter_valid(&r, &win, n)?);
            d = subsample2(&filter_valid(&d, &win, n)?);
        }
        let mu1 = filter_valid(&r, &win, n)?;
        let mu2 = filter_valid(&d, &win, n)?;
        let s11 = filter_valid(&r.map(|v| v * v), &win, n)?;
        let s22 = filter_valid(&d.map(|v| v * v), &win, n)?;
        let s12 = filter_valid(&r.zip(&d, |a, b| a * b), &win, n)?;
        for i in 0..mu1.data.len() {
            let (m1, m2) = (mu1.data[i], mu2.data[i]);
            let mut sg = (s11.data[i] - m1 * m1).max(0.0);
            let sd = (s22.data[i] - m2 * m2).max(0.0);
            let cross = s12.data[i] - m1 * m2;
            let mut g = cross / (sg + EPS);
            let mut sv = sd - g * cross;
            if sg < EPS {
                g = 0.0;
                sv = sd;
                sg = 0.0;
            }
            if sd < EPS {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = sd;
                g = 0.0;
            }
            if sv <= EPS {
                sv = EPS;
            }
            num += (1.0 + g * g * sg / (sv + SIGMA_NSQ)).log10();
            den += (1.0 + sg / SIGMA_NSQ).log10();
        }
    }
    if den <= 0.0 {
        return Ok(0.0);
    }
    Ok(num / den)
}

/// Mean VIF of the fused image with each source as reference.
pub fn vif_fusion(fused: &Plane, ir: &Plane, vis: &Plane) -> Result<f64> {
    Ok(0.5 * (vif(ir, fused)? + vif(vis, fused)?))
}

/// Sobel responses with zero padding: (horizontal-edge, vertical-edge).
/// Sobel responses as true convolutions with zero padding: `gx` is left minus
/// right, `gy` is bottom minus top.
fn sobel_same(x: &Plane) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (x.height as isize, x.width as isize);
    let get = |y: isize, xx: isize| {
        if y < 0 || xx < 0 || y >= h || xx >= w {
            0.0
        } else {
            x.at(y as usize, xx as usize)
        }
    };
    let mut gx = Vec::with_capacity(x.data.len());
    let mut gy = Vec::with_capacity(x.data.len());
    for y in 0..h {
        for xx in 0..w {
            gx.push(
                (get(y - 1, xx - 1) + 2.0 * get(y, xx - 1) + get(y + 1, xx - 1))
                    - (get(y - 1, xx + 1) + 2.0 * get(y, xx + 1) + get(y + 1, xx + 1)),
            );
            gy.push(
                (get(y + 1, xx - 1) + 2.0 * get(y + 1, xx) + get(y + 1, xx + 1))
                    - (get(y - 1, xx - 1) + 2.0 * get(y - 1, xx) + get(y - 1, xx + 1)),
            );
        }
    }
    (gx, gy)
}

/// Horizontal responses below this count as zero when taking orientations, so
/// round-off cannot flip a vertical orientation between `±π/2`.
const FLAT_GRADIENT: f64 = 1e-9;

struct EdgeMap {
    strength: Vec<f64>,
    angle: Vec<f64>,
}

fn edges(x: &Plane) -> EdgeMap {
    let (gx, gy) = sobel_same(x);
    let strength = gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b).sqrt()).collect();
    let angle = gx
        .iter()
        .zip(&gy)
        .map(|(&a, &b)| if a.abs() < FLAT_GRADIENT { FRAC_PI_2 } else { (b / a).atan() })
        .collect();
    EdgeMap { strength, angle }
}

const QG: (f64, f64, f64) = (0.9994, -15.0, 0.5);
const QA: (f64, f64, f64) = (0.9879, -22.0, 0.8);

/// Per-pixel edge preservation of `source` in `fused`.
fn preservation(source: &EdgeMap, fused: &EdgeMap) -> Vec<f64> {
    (0..source.strength.len())
        .map(|i| {
            let (ga, gf) = (source.strength[i], fused.strength[i]);
            let g = if ga > gf {
                gf / ga
            } else if ga < gf {
                ga / gf
            } else {
                1.0
            };
            let a = 1.0 - (source.angle[i] - fused.angle[i]).abs() / FRAC_PI_2;
            let qg = QG.0 / (1.0 + (QG.1 * (g - QG.2)).exp());
            let qa = QA.0 / (1.0 + (QA.1 * (a - QA.2)).exp());
            qg * qa
        })
        .collect()
}

/// Edge-information transfer measure: Sobel strength and orientation
/// preservation of each source in the fused image, weighted by source edge
/// strength. Equal to 0 when neither source has edges.
pub fn qabf(fused: &Plane, ir: &Plane, vis: &Plane) -> Result<f64> {
    same_shape("qabf", fused, ir)?;
    same_shape("qabf", fused, vis)?;
    let (ea, eb, ef) = (edges(ir), edges(vis), edges(fused));
    let qa = preservation(&ea, &ef);
    let qb = preservation(&eb, &ef);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..qa.len() {
        num += qa[i] * ea.strength[i] + qb[i] * eb.strength[i];
        den += ea.strength[i] + eb.strength[i];
    }
    if den <= 0.0 {
        return Ok(0.0);
    }
    Ok(num / den)
}

/// Value of [`qabf`] when the fused image reproduces every edge exactly.
pub fn qabf_perfect() -> f64 {
    QG.0 / (1.0 + (QG.1 * (1.0 - QG.2)).exp()) * QA.0 / (1.0 + (QA.1 * (1.0 - QA.2)).exp())
}

/// The registration and fusion metrics reported for one evaluation pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub mse: f64,
    pub ncc: f64,
    pub mi: f64,
    pub cc: f64,
    pub ssim: f64,
    pub vif: f64,
    pub qabf: f64,
}

impl MetricReport {
    pub const COLUMNS: [&'static str; 7] = ["mse", "ncc", "mi", "cc", "ssim", "vif", "qabf"];

    pub fn values(&self) -> [f64; 7] {
        [self.mse, self.ncc, self.mi, self.cc, self.ssim, self.vif, self.qabf]
    }

    /// Registration metrics of `aligned` against `fixed`, fusion metrics of `fused`
    /// against the two sources.
    pub fn compute(fixed: &Plane, aligned: &Plane, fused: &Plane, ir: &Plane, vis: &Plane) -> Result<Self> {
        Ok(Self {
            mse: mse(aligned, fixed)?,
            ncc: ncc(aligned, fixed)?,
            mi: mutual_information(aligned, fixed)?,
            cc: cc_fusion(fused, ir, vis)?,
            ssim: ssim_fusion(fused, ir, vis)?,
            vif: vif_fusion(fused, ir, vis)?,
            qabf: qabf(fused, ir, vis)?,
        })
    }

    /// Column-wise mean.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let mut acc = [0.0; 7];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v / n;
            }
        }
        Some(MetricReport {
            mse: acc[0],
            ncc: acc[1],
            mi: acc[2],
            cc: acc[3],
            ssim: acc[4],
            vif: acc[5],
            qabf: acc[6],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(v: &[f64], h: usize, w: usize) -> Plane {
        Plane::new(v.to_vec(), h, w).unwrap()
    }

    #[test]
    fn mse_hand_values() {
        let a = plane(&[0.0; 4], 2, 2);
        let b = plane(&[1.0; 4], 2, 2);
        assert_eq!(mse(&a, &b).unwrap(), 1.0);
        let c = plane(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9], 3, 3);
        let d = plane(&[0.0, 0.2, 0.5, 0.4, 0.4, 0.6, 0.7, 0.8, 1.0], 3, 3);
        let want = (0.01 + 0.0 + 0.04 + 0.0 + 0.01 + 0.0 + 0.0 + 0.0 + 0.01) / 9.0;
        assert!((mse(&c, &d).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn ncc_two_by_two() {
        let a = plane(&[0.0, 1.0, 2.0, 3.0], 2, 2);
        let b = plane(&[1.0, 0.0, 3.0, 2.0], 2, 2);
        // deviations (-1.5,-0.5,0.5,1.5) and (-0.5,-1.5,1.5,0.5)
        let want = (0.75 + 0.75 + 0.75 + 0.75) / 5.0;
        assert!((ncc(&a, &b).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn perfect_qabf_constant() {
        assert!((qabf_perfect() - 0.9748).abs() < 1e-4);
    }
}
