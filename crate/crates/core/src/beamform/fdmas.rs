//! Filtered delay-multiply-and-sum.
//!
//! Per pixel the signed square roots `u_i = sign(s_i) sqrt(|s_i|)` are combined
//! pairwise, `y = sum_{i<j} u_i u_j`, which is evaluated in O(N) with a running
//! suffix sum. Each depth line is then band-passed around 2·fc.

use std::f64::consts::PI;

use ndarray::{Array2, Axis, Zip};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{BeamformedData, Method};
use crate::error::{Error, Result};
use crate::geometry::DelayedTensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdmasConfig {
    /// Odd number of FIR taps.
    pub num_taps: usize,
    /// Passband edges as multiples of the center frequency.
    pub band_low: f64,
    pub band_high: f64,
}

impl Default for FdmasConfig {
    fn default() -> Self {
        FdmasConfig { num_taps: 63, band_low: 1.5, band_high: 2.5 }
    }
}

/// `sum_{i<j} sign(s_i s_j) sqrt(|s_i s_j|)` for one channel vector.
pub fn dmas_pixel<'a>(s: impl DoubleEndedIterator<Item = &'a f64>) -> f64 {
    let mut suffix = 0.0;
    let mut acc = 0.0;
    for &v in s.rev() {
        let u = v.signum() * v.abs().sqrt();
        acc += u * suffix;
        suffix += u;
    }
    acc
}

/// Linear-phase Hamming-windowed band-pass FIR. Frequencies in Hz; an upper edge at
/// or above Nyquist degenerates to a high-pass.
pub fn bandpass_taps(num_taps: usize, f_low: f64, f_high: f64, fs: f64) -> Vec<f64> {
    let nu_lo = (f_low / fs).min(0.5);
    let nu_hi = (f_high / fs).min(0.5);
    let center = (num_taps - 1) as f64 / 2.0;
    (0..num_taps)
        .map(|n| {
            let k = n as f64 - center;
            let ideal = 2.0 * nu_hi * sinc(2.0 * nu_hi * k) - 2.0 * nu_lo * sinc(2.0 * nu_lo * k);
            let window = 0.54 - 0.46 * (2.0 * PI * n as f64 / (num_taps - 1) as f64).cos();
            ideal * window
        })
        .collect()
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Pre-filter DMAS image.
pub fn fdmas_prefilter(t: &DelayedTensor) -> Array2<f64> {
    let (m, n, _) = t.shape();
    let mut out = Array2::<f64>::zeros((m, n));
    Zip::from(&mut out)
        .and(t.data.lanes(Axis(2)))
        .par_for_each(|o, lane| *o = dmas_pixel(lane.iter()));
    out
}

/// Centered ("same"-length) convolution of a line with odd-length `taps`, via FFT.
pub fn filter_line(line: &[f64], taps: &[f64]) -> Vec<f64> {
    let mut planner = FftPlanner::<f64>::new();
    let size = (line.len() + taps.len() - 1).next_power_of_two();
    let forward = planner.plan_fft_forward(size);
    let inverse = planner.plan_fft_inverse(size);
    convolve_same(line, &spectrum(taps, size, &*forward), taps.len(), &*forward, &*inverse)
}

fn spectrum(values: &[f64], size: usize, fft: &dyn rustfft::Fft<f64>) -> Vec<Complex64> {
    let mut buf = vec![Complex64::new(0.0, 0.0); size];
    for (b, &v) in buf.iter_mut().zip(values) {
        b.re = v;
    }
    fft.process(&mut buf);
    buf
}

fn convolve_same(
    line: &[f64],
    taps_spectrum: &[Complex64],
    num_taps: usize,
    forward: &dyn rustfft::Fft<f64>,
    inverse: &dyn rustfft::Fft<f64>,
) -> Vec<f64> {
    let size = taps_spectrum.len();
    let mut buf = spectrum(line, size, forward);
    for (b, h) in buf.iter_mut().zip(taps_spectrum) {
        *b *= h;
    }
    inverse.process(&mut buf);
    let offset = (num_taps - 1) / 2;
    let scale = 1.0 / size as f64;
    (0..line.len()).map(|i| buf[i + offset].re * scale).collect()
}

pub fn fdmas(t: &DelayedTensor, cfg: &FdmasConfig) -> Result<BeamformedData> {
    let probe = t.probe();
    let fc = probe.center_frequency;
    let line_rate = t.grid.axial_sampling_rate();
    if probe.sampling_frequency < 4.0 * fc || line_rate < 4.0 * fc * (1.0 - 1e-9) {
        return Err(Error::config(format!(
            "F-DMAS needs sampling at 4 x fc or more (probe {} Hz, depth lines {line_rate:.0} Hz, fc {fc} Hz)",
            probe.sampling_frequency
        )));
    }
    if t.num_channels() < 2 {
        return Err(Error::config("F-DMAS needs at least two channels"));
    }
    if cfg.num_taps.is_multiple_of(2) || !(cfg.band_high > cfg.band_low && cfg.band_low > 0.0) {
        return Err(Error::config(format!("invalid F-DMAS filter {cfg:?}")));
    }

    let pre = fdmas_prefilter(t);
    let taps = bandpass_taps(cfg.num_taps, cfg.band_low * fc, cfg.band_high * fc, line_rate);
    let (m, n) = pre.dim();
    let size = (m + taps.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let forward = planner.plan_fft_forward(size);
    let inverse = planner.plan_fft_inverse(size);
    let taps_spectrum = spectrum(&taps, size, &*forward);

    let columns: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|q| {
            let line = pre.column(q).to_vec();
            convolve_same(&line, &taps_spectrum, taps.len(), &*forward, &*inverse)
        })
        .collect();
    let values = Array2::from_shape_fn((m, n), |(p, q)| columns[q][p]);
    Ok(BeamformedData { values, method: Method::Fdmas })
}
