//! CPU kernels registered as candle custom ops: 2-D convolution (im2col + GEMM)
//! and backward bilinear warping with border replication.
//!
//! Both kernels are generic over `f32` and `f64` so the same code path serves
//! training (single precision) and finite-difference gradient checks (double).

use candle_core::{CpuStorage, CustomOp2, DType, Layout, Shape, Tensor, WithDType};

type CResult<T> = candle_core::Result<T>;

pub(crate) trait Real: WithDType {
    /// `c = alpha * a * b + beta * c` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n`
    /// matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout, op: &'static str) -> CResult<&'a [T]> {
    let data = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => Err(candle_core::Error::RequiresContiguous { op }),
    }
}

fn host_vec<T: WithDType>(t: &Tensor) -> CResult<Vec<T>> {
    t.contiguous()?.flatten_all()?.to_vec1::<T>()
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> CResult<Self> {
        if x.len() != 4 || k.len() != 4 {
            candle_core::bail!("conv2d expects 4-d input and kernel, got {x:?} and {k:?}");
        }
        if x[1] != k[1] {
            candle_core::bail!("conv2d channel mismatch: input {x:?}, kernel {k:?}");
        }
        let (h, w, kh, kw) = (x[2], x[3], k[2], k[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw || stride == 0 {
            candle_core::bail!("conv2d kernel {kh}x{kw} does not fit input {h}x{w} (pad {pad})");
        }
        Ok(Self {
            batch: x[0],
            c_in: x[1],
            h,
            w,
            c_out: k[0],
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn n(&self) -> usize {
        self.ho * self.wo
    }

    /// Output columns `lo..hi` whose input column for tap `kx` lies inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
        let hi = if self.w + self.pad <= kx {
            0
        } else {
            ((self.w - 1 + self.pad - kx) / self.stride + 1).min(self.wo)
        };
        (lo.min(hi), hi)
    }

    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let n = self.n();
        let zero = T::from_f64(0.0);
        for ci in 0..self.c_in {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * n..(row + 1) * n];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let seg = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            seg.fill(zero);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        seg[..lo].fill(zero);
                        seg[hi..].fill(zero);
                        if lo == hi {
                            continue;
                        }
                        let first = lo * self.stride + kx - self.pad;
                        if self.stride == 1 {
                            seg[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (v, ix) in seg[lo..hi].iter_mut().zip((first..).step_by(self.stride)) {
                                *v = src[ix];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], dx: &mut [T]) {
        let n = self.n();
        for ci in 0..self.c_in {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &col[row * n..(row + 1) * n];
                    let (lo, hi) = self.valid_cols(kx);
                    if lo == hi {
                        continue;
                    }
                    let first = lo * self.stride + kx - self.pad;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let seg = &src[oy * self.wo + lo..oy * self.wo + hi];
                        for (v, ix) in seg.iter().zip((first..).step_by(self.stride)) {
                            dst[ix] += *v;
                        }
                    }
                }
            }
        }
    }

    fn forward<T: Real>(&self, x: &[T], kernel: &[T]) -> Vec<T> {
        let (k, n) = (self.k(), self.n());
        let mut col = vec![T::from_f64(0.0); k * n];
        let mut out = vec![T::from_f64(0.0); self.batch * self.c_out * n];
        let in_stride = self.c_in * self.h * self.w;
        for b in 0..self.batch {
            self.im2col(&x[b * in_stride..(b + 1) * in_stride], &mut col);
            let dst = &mut out[b * self.c_out * n..(b + 1) * self.c_out * n];
            // SAFETY: kernel is c_out x k, col is k x n, dst is c_out x n, all row-major.
            unsafe {
                T::gemm(
                    self.c_out,
                    k,
                    n,
                    kernel.as_ptr(),
                    k as isize,
                    1,
                    col.as_ptr(),
                    n as isize,
                    1,
                    T::from_f64(0.0),
                    dst.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        out
    }

    fn backward<T: Real>(&self, x: &[T], kernel: &[T], grad: &[T]) -> (Vec<T>, Vec<T>) {
        let (k, n) = (self.k(), self.n());
        let zero = T::from_f64(0.0);
        let mut col = vec![zero; k * n];
        let mut dcol = vec![zero; k * n];
        let mut dx = vec![zero; x.len()];
        let mut dk = vec![zero; kernel.len()];
        let in_stride = self.c_in * self.h * self.w;
        for b in 0..self.batch {
            let xb = &x[b * in_stride..(b + 1) * in_stride];
            let gb = &grad[b * self.c_out * n..(b + 1) * self.c_out * n];
            self.im2col(xb, &mut col);
            // SAFETY: gb is c_out x n; col read as its transpose n x k; dk is c_out x k.
            unsafe {
                T::gemm(
                    self.c_out,
                    n,
                    k,
                    gb.as_ptr(),
                    n as isize,
                    1,
                    col.as_ptr(),
                    1,
                    n as isize,
                    T::from_f64(1.0),
                    dk.as_mut_ptr(),
                    k as isize,
                    1,
                );
                // kernel read transposed as k x c_out; gb is c_out x n; dcol is k x n.
                T::gemm(
                    k,
                    self.c_out,
                    n,
                    kernel.as_ptr(),
                    1,
                    k as isize,
                    gb.as_ptr(),
                    n as isize,
                    1,
                    zero,
                    dcol.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            self.col2im(&dcol, &mut dx[b * in_stride..(b + 1) * in_stride]);
        }
        (dx, dk)
    }
}

/// Cross-correlation with zero padding, matching the usual deep-learning
/// convolution convention. Input `[B, Cin, H, W]`, kernel `[Cout, Cin, kh, kw]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv2dOp {
    pub stride: usize,
    pub pad: usize,
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "mrf-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let g = ConvGeom::new(l1.dims(), l2.dims(), self.stride, self.pad)?;
        let shape = Shape::from((g.batch, g.c_out, g.ho, g.wo));
        let storage = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                let out = g.forward::<f32>(
                    contiguous(s1, l1, "conv2d")?,
                    contiguous(s2, l2, "conv2d")?,
                );
                CpuStorage::F32(out)
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                let out = g.forward::<f64>(
                    contiguous(s1, l1, "conv2d")?,
                    contiguous(s2, l2, "conv2d")?,
                );
                CpuStorage::F64(out)
            }
            _ => candle_core::bail!("conv2d supports matching f32 or f64 operands"),
        };
        Ok((storage, shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        kernel: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let g = ConvGeom::new(x.dims(), kernel.dims(), self.stride, self.pad)?;
        let (dx, dk) = match x.dtype() {
            DType::F32 => conv_bwd::<f32>(&g, x, kernel, grad)?,
            DType::F64 => conv_bwd::<f64>(&g, x, kernel, grad)?,
            dt => candle_core::bail!("conv2d backward: unsupported dtype {dt:?}"),
        };
        Ok((Some(dx), Some(dk)))
    }
}

fn conv_bwd<T: Real>(
    g: &ConvGeom,
    x: &Tensor,
    kernel: &Tensor,
    grad: &Tensor,
) -> CResult<(Tensor, Tensor)> {
    let (dx, dk) = g.backward::<T>(
        &host_vec::<T>(x)?,
        &host_vec::<T>(kernel)?,
        &host_vec::<T>(grad)?,
    );
    Ok((
        Tensor::from_vec(dx, x.shape(), x.device())?,
        Tensor::from_vec(dk, kernel.shape(), kernel.device())?,
    ))
}

/// Differentiable 2-D convolution of `x` with `kernel` (no bias).
pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> CResult<Tensor> {
    x.contiguous()?
        .apply_op2(&kernel.contiguous()?, Conv2dOp { stride, pad })
}

// ---------------------------------------------------------------------------
// Bilinear backward warping
// ---------------------------------------------------------------------------

/// Corner indices and weights for one bilinear sample. Sampling positions are
/// clamped to the image domain, which replicates the border.
#[derive(Debug, Clone, Copy)]
struct Tap {
    i00: usize,
    i01: usize,
    i10: usize,
    i11: usize,
    wx: f64,
    wy: f64,
    /// Whether the unclamped coordinate lay inside the domain (gradient passes).
    live_x: bool,
    live_y: bool,
}

impl Tap {
    fn new(px: f64, py: f64, h: usize, w: usize) -> Self {
        let max_x = (w - 1) as f64;
        let max_y = (h - 1) as f64;
        let live_x = (0.0..=max_x).contains(&px);
        let live_y = (0.0..=max_y).contains(&py);
        let cx = px.clamp(0.0, max_x);
        let cy = py.clamp(0.0, max_y);
        let x0 = (cx.floor() as usize).min(w.saturating_sub(2));
        let y0 = (cy.floor() as usize).min(h.saturating_sub(2));
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        Self {
            i00: y0 * w + x0,
            i01: y0 * w + x1,
            i10: y1 * w + x0,
            i11: y1 * w + x1,
            wx: cx - x0 as f64,
            wy: cy - y0 as f64,
            live_x: live_x && w > 1,
            live_y: live_y && h > 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct WarpGeom {
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
}

impl WarpGeom {
    fn new(src: &[usize], field: &[usize]) -> CResult<Self> {
        if src.len() != 4 || field.len() != 4 {
            candle_core::bail!("warp expects 4-d source and field, got {src:?} and {field:?}");
        }
        if field[1] != 2 || src[0] != field[0] || src[2] != field[2] || src[3] != field[3] {
            candle_core::bail!("warp shape mismatch: source {src:?}, field {field:?}");
        }
        Ok(Self {
            batch: src[0],
            channels: src[1],
            h: src[2],
            w: src[3],
        })
    }

    fn taps<T: Real>(&self, field: &[T], b: usize) -> Vec<Tap> {
        let hw = self.h * self.w;
        let fx = &field[(2 * b) * hw..(2 * b + 1) * hw];
        let fy = &field[(2 * b + 1) * hw..(2 * b + 2) * hw];
        (0..hw)
            .map(|p| {
                let (y, x) = (p / self.w, p % self.w);
                Tap::new(
                    x as f64 + fx[p].to_f64(),
                    y as f64 + fy[p].to_f64(),
                    self.h,
                    self.w,
                )
            })
            .collect()
    }

    fn forward<T: Real>(&self, src: &[T], field: &[T]) -> Vec<T> {
        let hw = self.h * self.w;
        let mut out = vec![T::from_f64(0.0); src.len()];
        for b in 0..self.batch {
            let taps = self.taps(field, b);
            for c in 0..self.channels {
                let base = (b * self.channels + c) * hw;
                let plane = &src[base..base + hw];
                let dst = &mut out[base..base + hw];
                for (o, t) in dst.iter_mut().zip(&taps) {
                    let (wx, wy) = (T::from_f64(t.wx), T::from_f64(t.wy));
                    let (ux, uy) = (T::from_f64(1.0 - t.wx), T::from_f64(1.0 - t.wy));
                    *o = uy * (ux * plane[t.i00] + wx * plane[t.i01])
                        + wy * (ux * plane[t.i10] + wx * plane[t.i11]);
                }
            }
        }
        out
    }

    fn backward<T: Real>(&self, src: &[T], field: &[T], grad: &[T]) -> (Vec<T>, Vec<T>) {
        let hw = self.h * self.w;
        let zero = T::from_f64(0.0);
        let mut dsrc = vec![zero; src.len()];
        let mut dfield = vec![zero; field.len()];
        for b in 0..self.batch {
            let taps = self.taps(field, b);
            for c in 0..self.channels {
                let base = (b * self.channels + c) * hw;
                let plane = &src[base..base + hw];
                let g = &grad[base..base + hw];
                for (p, t) in taps.iter().enumerate() {
                    let (wx, wy) = (T::from_f64(t.wx), T::from_f64(t.wy));
                    let (ux, uy) = (T::from_f64(1.0 - t.wx), T::from_f64(1.0 - t.wy));
                    let gp = g[p];
                    let ds = &mut dsrc[base..base + hw];
                    ds[t.i00] += gp * uy * ux;
                    ds[t.i01] += gp * uy * wx;
                    ds[t.i10] += gp * wy * ux;
                    ds[t.i11] += gp * wy * wx;
                    let (v00, v01, v10, v11) = (plane[t.i00], plane[t.i01], plane[t.i10], plane[t.i11]);
                    if t.live_x {
                        dfield[(2 * b) * hw + p] += gp * (uy * (v01 - v00) + wy * (v11 - v10));
                    }
                    if t.live_y {
                        dfield[(2 * b + 1) * hw + p] += gp * (ux * (v10 - v00) + wx * (v11 - v01));
                    }
                }
            }
        }
        (dsrc, dfield)
    }
}

/// Samples `src` at `p + field(p)` with bilinear interpolation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct WarpOp;

impl CustomOp2 for WarpOp {
    fn name(&self) -> &'static str {
        "mrf-warp"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let g = WarpGeom::new(l1.dims(), l2.dims())?;
        let storage = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => CpuStorage::F32(
                g.forward::<f32>(contiguous(s1, l1, "warp")?, contiguous(s2, l2, "warp")?),
            ),
            (CpuStorage::F64(_), CpuStorage::F64(_)) => CpuStorage::F64(
                g.forward::<f64>(contiguous(s1, l1, "warp")?, contiguous(s2, l2, "warp")?),
            ),
            _ => candle_core::bail!("warp supports matching f32 or f64 operands"),
        };
        Ok((storage, l1.shape().clone()))
    }

    fn bwd(
        &self,
        src: &Tensor,
        field: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let g = WarpGeom::new(src.dims(), field.dims())?;
        let (ds, df) = match src.dtype() {
            DType::F32 => warp_bwd::<f32>(&g, src, field, grad)?,
            DType::F64 => warp_bwd::<f64>(&g, src, field, grad)?,
            dt => candle_core::bail!("warp backward: unsupported dtype {dt:?}"),
        };
        Ok((Some(ds), Some(df)))
    }
}

fn warp_bwd<T: Real>(
    g: &WarpGeom,
    src: &Tensor,
    field: &Tensor,
    grad: &Tensor,
) -> CResult<(Tensor, Tensor)> {
    let (ds, df) = g.backward::<T>(
        &host_vec::<T>(src)?,
        &host_vec::<T>(field)?,
        &host_vec::<T>(grad)?,
    );
    Ok((
        Tensor::from_vec(ds, src.shape(), src.device())?,
        Tensor::from_vec(df, field.shape(), field.device())?,
    ))
}

/// Differentiable bilinear backward warp of `[B, C, H, W]` by a `[B, 2, H, W]` field.
pub fn warp_bilinear(src: &Tensor, field: &Tensor) -> CResult<Tensor> {
    src.contiguous()?.apply_op2(&field.contiguous()?, WarpOp)
}
