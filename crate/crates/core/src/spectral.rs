//! Scale normalization and Fourier analysis of voxel vectors.
//!
//! Voxel vectors of different raw lengths are brought to a common length with
//! adaptive max pooling, then described by the amplitude and phase of their
//! full two-sided discrete Fourier transform.

use std::cell::RefCell;
use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Amplitudes below this are treated as zero and get phase 0.
pub const EPS_PHASE: f64 = 1e-12;

/// A voxel vector at the experiment's canonical length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledVoxels {
    pub values: Vec<f64>,
    pub subject_id: String,
    pub stimulus_id: String,
    pub class_id: usize,
}

impl PooledVoxels {
    pub fn anonymous(values: Vec<f64>) -> Self {
        PooledVoxels {
            values,
            subject_id: String::new(),
            stimulus_id: String::new(),
            class_id: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub amplitude: Vec<f64>,
    pub phase: Vec<f64>,
    pub real: Vec<f64>,
    pub imag: Vec<f64>,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.real.len()
    }

    pub fn is_empty(&self) -> bool {
        self.real.is_empty()
    }
}

/// Bounds `[start, end)` of pooling segment `i` when reducing `v` values to `l`.
#[inline]
pub fn pool_segment(i: usize, v: usize, l: usize) -> (usize, usize) {
    let start = (i * v) / l;
    let end = ((i + 1) * v).div_ceil(l);
    (start, end)
}

/// Adaptive max pooling of a raw series to length `l`.
///
/// Output `i` is the maximum over `x[floor(i*V/L) .. ceil((i+1)*V/L))`.
pub fn adaptive_max_pool(x: &[f64], l: usize) -> Result<Vec<f64>> {
    let v = x.len();
    if l == 0 {
        return Err(Error::InvalidInput(
            "pool target length must be positive".into(),
        ));
    }
    if v < l {
        return Err(Error::shape(
            "adaptive_max_pool",
            format!(">= {l} values"),
            v,
        ));
    }
    Ok((0..l)
        .map(|i| {
            let (s, e) = pool_segment(i, v, l);
            x[s..e].iter().copied().fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// Pools a labelled voxel series, carrying its identity along.
pub fn pool_series(series: &crate::synthgen::VoxelSeries, l: usize) -> Result<PooledVoxels> {
    Ok(PooledVoxels {
        values: adaptive_max_pool(&series.values, l)?,
        subject_id: series.subject_id.clone(),
        stimulus_id: series.stimulus_id.clone(),
        class_id: series.class_id,
    })
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft_in_place(buf: &mut [Complex64], inverse: bool) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        let plan = if inverse {
            p.plan_fft_inverse(buf.len())
        } else {
            p.plan_fft_forward(buf.len())
        };
        plan.process(buf);
    });
}

/// Complex DFT coefficients of a real signal, `F[k] = sum_n x[n] exp(-i 2 pi k n / N)`.
///
/// Conjugate symmetry is imposed exactly so that `F[0]` (and `F[N/2]`) are real
/// and `F[N-k] == conj(F[k])` bit for bit.
pub fn dft_complex(x: &[f64]) -> Result<Vec<Complex64>> {
    if x.is_empty() {
        return Err(Error::InvalidInput("dft of an empty vector".into()));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("dft input[{i}] = {}", x[i])));
    }
    let n = x.len();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_in_place(&mut buf, false);
    buf[0].im = 0.0;
    if n.is_multiple_of(2) {
        buf[n / 2].im = 0.0;
    }
    for k in 1..n.div_ceil(2) {
        buf[n - k] = buf[k].conj();
    }
    Ok(buf)
}

/// `y[n] = Re sum_k c[k] exp(+i 2 pi k n / N)`: the adjoint of the real DFT,
/// used to pull spectral gradients back to the signal.
pub fn real_adjoint(coeffs: &[Complex64]) -> Vec<f64> {
    let mut buf = coeffs.to_vec();
    fft_in_place(&mut buf, true);
    buf.into_iter().map(|c| c.re).collect()
}

pub fn dft(x: &[f64]) -> Result<Spectrum> {
    let f = dft_complex(x)?;
    let real: Vec<f64> = f.iter().map(|c| c.re).collect();
    let imag: Vec<f64> = f.iter().map(|c| c.im).collect();
    let (amplitude, phase) = amplitude_phase_parts(&real, &imag);
    Ok(Spectrum {
        amplitude,
        phase,
        real,
        imag,
    })
}

/// Amplitude `sqrt(R^2 + I^2)` and principal phase `atan2(I, R)` in `(-pi, pi]`.
pub fn amplitude_phase(spectrum: &Spectrum) -> (Vec<f64>, Vec<f64>) {
    amplitude_phase_parts(&spectrum.real, &spectrum.imag)
}

pub fn amplitude_phase_parts(real: &[f64], imag: &[f64]) -> (Vec<f64>, Vec<f64>) {
    real.iter()
        .zip(imag)
        .map(|(&r, &i)| {
            let a = r.hypot(i);
            (a, phase_of(r, i, a))
        })
        .unzip()
}

#[inline]
pub(crate) fn phase_of(r: f64, i: f64, a: f64) -> f64 {
    if a < EPS_PHASE {
        0.0
    } else {
        // `+ 0.0` turns a negative zero imaginary part into +0 so that the
        // result stays in (-pi, pi].
        let p = (i + 0.0).atan2(r);
        if p <= -PI {
            PI
        } else {
            p
        }
    }
}

/// Maps an angle difference into `(-pi, pi]`.
#[inline]
pub fn wrap_angle(d: f64) -> f64 {
    let w = d - 2.0 * PI * ((d + PI) / (2.0 * PI)).floor();
    // floor maps d = pi to -pi; keep the closed end at +pi.
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

pub fn circular_shift(x: &[f64], s: usize) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    (0..n).map(|i| x[(i + n - s % n) % n]).collect()
}
