//! Envelope detection, log compression and 8-bit rendering.

use ndarray::Array2;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{FftNum, FftPlanner};

use crate::beamform::{BeamformedData, Method};
use crate::error::{Error, Result};

pub const DEFAULT_DYNAMIC_RANGE_DB: f64 = 60.0;

/// Imaginary part of the FFT-based analytic signal of `line` (its discrete Hilbert transform).
///
/// The operator is real and skew-symmetric, so its adjoint is `-hilbert_line`.
pub fn hilbert_line<T: FftNum + num_traits::Float>(line: &[T]) -> Vec<T> {
    analytic_signal(line).into_iter().map(|c| c.im).collect()
}

fn analytic_signal<T: FftNum + num_traits::Float>(line: &[T]) -> Vec<Complex<T>> {
    let n = line.len();
    if n == 0 {
        return Vec::new();
    }
    let mut planner = FftPlanner::<T>::new();
    let mut buf: Vec<Complex<T>> = line.iter().map(|&v| Complex::new(v, T::zero())).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    let two = T::one() + T::one();
    let half = n / 2;
    for (k, b) in buf.iter_mut().enumerate() {
        let gain = if k == 0 || (n.is_multiple_of(2) && k == half) {
            T::one()
        } else if k < n.div_ceil(2) {
            two
        } else {
            T::zero()
        };
        *b = *b * gain;
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let scale = T::one() / T::from(n).expect("length fits the float type");
    buf.iter().map(|c| *c * scale).collect()
}

/// Magnitude of the analytic signal of one line.
pub fn envelope_line(line: &[f64]) -> Vec<f64> {
    analytic_signal(line).into_iter().map(|c| c.norm()).collect()
}

/// Envelope along depth for every lateral line; all values are >= 0.
pub fn envelope(b: &BeamformedData) -> Array2<f64> {
    let (m, n) = b.values.dim();
    let columns: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|q| envelope_line(&b.values.column(q).to_vec()))
        .collect();
    Array2::from_shape_fn((m, n), |(p, q)| columns[q][p])
}

/// Log-compressed B-mode image.
#[derive(Debug, Clone, PartialEq)]
pub struct BModeImage {
    /// depth x lateral, each in `[-dynamic_range, 0]` dB.
    pub db_values: Array2<f64>,
    pub dynamic_range: f64,
    /// Envelope maximum the image was normalized by; 0 for an all-zero envelope.
    pub normalization_max: f64,
    pub method: Method,
}

impl BModeImage {
    /// `(db + DR) / DR`, in [0, 1].
    pub fn normalized(&self) -> Array2<f64> {
        let dr = self.dynamic_range;
        self.db_values.mapv(|v| (v + dr) / dr)
    }

    pub fn dim(&self) -> (usize, usize) {
        self.db_values.dim()
    }
}

/// `20 log10(env / max env)`, clamped to `[-dynamic_range, 0]`.
pub fn log_compress(env: &Array2<f64>, dynamic_range: f64, method: Method) -> Result<BModeImage> {
    if !(dynamic_range > 0.0 && dynamic_range.is_finite()) {
        return Err(Error::config(format!("dynamic range must be positive, got {dynamic_range}")));
    }
    let mut max = 0.0f64;
    for &v in env.iter() {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::Contract(format!("envelope value {v} is negative or non-finite")));
        }
        max = max.max(v);
    }
    let db_values = if max > 0.0 {
        env.mapv(|v| {
            let db = 20.0 * (v / max).log10();
            db.clamp(-dynamic_range, 0.0)
        })
    } else {
        Array2::from_elem(env.dim(), -dynamic_range)
    };
    Ok(BModeImage { db_values, dynamic_range, normalization_max: max, method })
}

/// Envelope followed by log compression.
pub fn bmode(b: &BeamformedData, dynamic_range: f64) -> Result<BModeImage> {
    log_compress(&envelope(b), dynamic_range, b.method)
}

/// 8-bit grayscale raster, row-major (rows = depth).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayRaster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Maps `[-DR, 0]` dB linearly onto `[0, 255]`, rounding half up.
pub fn render(img: &BModeImage) -> GrayRaster {
    let (height, width) = img.dim();
    let dr = img.dynamic_range;
    let pixels = img
        .db_values
        .iter()
        .map(|&db| {
            let level = ((db + dr) / dr * 255.0).clamp(0.0, 255.0);
            (level + 0.5).floor() as u8
        })
        .collect();
    GrayRaster { width, height, pixels }
}

/// PNG bytes: 8-bit grayscale, no ancillary text chunks.
pub fn encode_png(raster: &GrayRaster) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, raster.width as u32, raster.height as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Eight);
        encoder.set_compression(png::Compression::Balanced);
        let mut writer = encoder.write_header().expect("writing to a Vec cannot fail");
        writer.write_image_data(&raster.pixels).expect("raster length matches header");
    }
    out
}

pub fn decode_png(bytes: &[u8]) -> Result<GrayRaster> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| Error::Format(format!("png: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(format!("png: {e}")))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format("expected 8-bit grayscale png".into()));
    }
    buf.truncate(info.buffer_size());
    Ok(GrayRaster { width: info.width as usize, height: info.height as usize, pixels: buf })
}

pub fn render_png(img: &BModeImage) -> Vec<u8> {
    encode_png(&render(img))
}
