//! Orthonormal DCT-II along the time axis of an action column, computed
//! through a same-length complex FFT of the even/odd reordered input.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::codec::CodecError;

/// FFT plans and twiddles for one column length.
#[derive(Clone)]
pub struct DctPlan {
    len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    /// `exp(-i pi k / 2N)`.
    twiddle: Vec<Complex<f64>>,
    /// Orthonormal scale of frequency `k`.
    scale: Vec<f64>,
}

impl fmt::Debug for DctPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DctPlan").field("len", &self.len).finish()
    }
}

impl DctPlan {
    pub fn new(len: usize) -> Self {
        assert!(len > 0, "DCT length must be positive");
        let n = len as f64;
        let mut planner = FftPlanner::new();
        Self {
            len,
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
            twiddle: (0..len)
                .map(|k| Complex::from_polar(1.0, -PI * k as f64 / (2.0 * n)))
                .collect(),
            scale: (0..len)
                .map(|k| if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn check(&self, got: usize) -> Result<(), CodecError> {
        if got != self.len {
            return Err(CodecError::Shape(format!(
                "column has {got} entries, plan length is {}",
                self.len
            )));
        }
        Ok(())
    }
}

pub fn dct_forward(column: &[f64], plan: &DctPlan) -> Result<Vec<f64>, CodecError> {
    plan.check(column.len())?;
    let n = plan.len;
    let mut v = vec![Complex::new(0.0, 0.0); n];
    for k in 0..n.div_ceil(2) {
        v[k].re = column[2 * k];
    }
    for k in 0..n / 2 {
        v[n - 1 - k].re = column[2 * k + 1];
    }
    plan.forward.process(&mut v);
    Ok((0..n)
        .map(|k| plan.scale[k] * (plan.twiddle[k] * v[k]).re)
        .collect())
}

pub fn dct_inverse(coeffs: &[f64], plan: &DctPlan) -> Result<Vec<f64>, CodecError> {
    plan.check(coeffs.len())?;
    let n = plan.len;
    let y = |k: usize| if k == n { 0.0 } else { coeffs[k] / plan.scale[k] };
    let mut v: Vec<Complex<f64>> = (0..n)
        .map(|k| plan.twiddle[k].conj() * Complex::new(y(k), -y(n - k)))
        .collect();
    plan.inverse.process(&mut v);
    let mut out = vec![0.0; n];
    for k in 0..n.div_ceil(2) {
        out[2 * k] = v[k].re / n as f64;
    }
    for k in 0..n / 2 {
        out[2 * k + 1] = v[n - 1 - k].re / n as f64;
    }
    Ok(out)
}
