//! Central finite-difference checks of reverse-mode gradients.

use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};

/// Outcome of one gradient check over the probed coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`, 0 when both vanish.
    pub relative_error: f64,
    pub max_abs_error: f64,
    pub analytic_norm: f64,
    pub coordinates: usize,
}

/// Which coordinates of a variable to probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    All,
    /// At most this many evenly strided coordinates per variable.
    Strided(usize),
}

fn probe_indices(n: usize, probe: Probe) -> Vec<usize> {
    match probe {
        Probe::All => (0..n).collect(),
        Probe::Strided(k) if k == 0 => Vec::new(),
        Probe::Strided(k) if k >= n => (0..n).collect(),
        Probe::Strided(k) => {
            let stride = n as f64 / k as f64;
            (0..k).map(|i| ((i as f64 + 0.5) * stride) as usize).collect()
        }
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?.iter().sum())
}

/// Compares the backpropagated gradient of the scalar `f()` with respect to each
/// variable against `(f(x + h) − f(x − h)) / 2h`. Variables must be `f64`, and `f`
/// must read them through the `Var` handles so perturbations are visible.
pub fn check(vars: &[Var], f: impl Fn() -> Result<Tensor>, step: f64, probe: Probe) -> Result<GradReport> {
    for v in vars {
        if v.dtype() != DType::F64 {
            return Err(Error::invalid("gradcheck", "variables must be f64"));
        }
    }
    let loss = f()?;
    let grads = loss.backward()?;
    let (mut diff2, mut a2, mut n2, mut max_abs, mut count) = (0.0, 0.0, 0.0, 0.0f64, 0);
    for v in vars {
        let analytic = match grads.get(v.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; v.elem_count()],
        };
        let base = v.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let shape = v.shape().clone();
        let mut values = base.clone();
        for i in probe_indices(base.len(), probe) {
            values[i] = base[i] + step;
            v.set(&Tensor::from_slice(&values, &shape, v.device())?)?;
            let up = scalar(&f()?)?;
            values[i] = base[i] - step;
            v.set(&Tensor::from_slice(&values, &shape, v.device())?)?;
            let down = scalar(&f()?)?;
            values[i] = base[i];
            let numeric = (up - down) / (2.0 * step);
            let d = analytic[i] - numeric;
            diff2 += d * d;
            a2 += analytic[i] * analytic[i];
            n2 += numeric * numeric;
            max_abs = max_abs.max(d.abs());
            count += 1;
        }
        v.set(&Tensor::from_slice(&base, &shape, v.device())?)?;
    }
    let scale = a2.sqrt().max(n2.sqrt());
    Ok(GradReport {
        relative_error: if scale == 0.0 { 0.0 } else { diff2.sqrt() / scale },
        max_abs_error: max_abs,
        analytic_norm: a2.sqrt(),
        coordinates: count,
    })
}
