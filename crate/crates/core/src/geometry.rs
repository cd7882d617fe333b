//! Pixel grid and receive-delay compensation for 0° plane-wave transmits.

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{round_trip_time, ProbeConfig, RfFrame};

/// Three 2x pooling stages downstream need every image side divisible by 8.
pub const SIDE_MULTIPLE: usize = 8;

/// Image grid in depth (rows) x lateral (columns).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    pub probe: ProbeConfig,
    pub depth_px: usize,
    pub lateral_px: usize,
    pub z_min: f64,
    pub z_max: f64,
    pub x_min: f64,
    pub x_max: f64,
}

/// Grid parameters as they appear in config files; the probe is supplied separately.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub depth_px: usize,
    pub lateral_px: usize,
    /// Depth of the first row, meters.
    pub z_min: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { depth_px: 256, lateral_px: 64, z_min: 18.4e-3 }
    }
}

impl GridConfig {
    pub fn build(&self, probe: &ProbeConfig) -> Result<ImageGrid> {
        ImageGrid::aligned(probe, self.depth_px, self.lateral_px, self.z_min)
    }
}

impl ImageGrid {
    pub fn new(
        probe: ProbeConfig,
        depth_px: usize,
        lateral_px: usize,
        (z_min, z_max): (f64, f64),
        (x_min, x_max): (f64, f64),
    ) -> Result<Self> {
        probe.validate()?;
        if depth_px == 0 || lateral_px == 0 {
            return Err(Error::config("grid must have at least one pixel"));
        }
        if !depth_px.is_multiple_of(SIDE_MULTIPLE) || !lateral_px.is_multiple_of(SIDE_MULTIPLE) {
            return Err(Error::config(format!(
                "grid {depth_px} x {lateral_px} is not divisible by {SIDE_MULTIPLE} on both sides"
            )));
        }
        if !(z_min > 0.0 && z_max > z_min && x_max > x_min) {
            return Err(Error::config(format!(
                "invalid grid extent z [{z_min}, {z_max}], x [{x_min}, {x_max}]"
            )));
        }
        Ok(ImageGrid { probe, depth_px, lateral_px, z_min, z_max, x_min, x_max })
    }

    /// Grid whose rows are spaced `c / (2 fs)` apart (one RF sample of two-way travel)
    /// and whose columns span the aperture from the first to the last element.
    /// With `lateral_px == num_channels` the columns sit exactly on the elements.
    pub fn aligned(probe: &ProbeConfig, depth_px: usize, lateral_px: usize, z_min: f64) -> Result<Self> {
        let dz = probe.speed_of_sound / (2.0 * probe.sampling_frequency);
        let z_max = z_min + (depth_px.max(2) as f64 - 1.0) * dz;
        let x_max = probe.element_x(probe.num_channels - 1);
        Self::new(*probe, depth_px, lateral_px, (z_min, z_max), (-x_max, x_max))
    }

    /// 256 x 64 grid covering 18.4 mm to about 21.6 mm.
    pub fn desk(probe: &ProbeConfig) -> Result<Self> {
        GridConfig::default().build(probe)
    }

    /// 2400 x 128 grid starting at 1 mm.
    pub fn full_scale(probe: &ProbeConfig) -> Result<Self> {
        Self::aligned(probe, 2400, 128, 1e-3)
    }

    pub fn dz(&self) -> f64 {
        (self.z_max - self.z_min) / (self.depth_px as f64 - 1.0)
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.lateral_px as f64 - 1.0)
    }

    pub fn z(&self, row: usize) -> f64 {
        self.z_min + row as f64 * self.dz()
    }

    pub fn x(&self, col: usize) -> f64 {
        self.x_min + col as f64 * self.dx()
    }

    /// Sampling rate of a depth line expressed as RF time: `c / (2 dz)`.
    pub fn axial_sampling_rate(&self) -> f64 {
        self.probe.speed_of_sound / (2.0 * self.dz())
    }

    /// Nearest (row, col) to a physical position, clamped to the grid.
    pub fn nearest_pixel(&self, x: f64, z: f64) -> (usize, usize) {
        let row = ((z - self.z_min) / self.dz()).round().clamp(0.0, (self.depth_px - 1) as f64);
        let col = ((x - self.x_min) / self.dx()).round().clamp(0.0, (self.lateral_px - 1) as f64);
        (row as usize, col as usize)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.depth_px, self.lateral_px, self.probe.num_channels)
    }
}

/// Delay-compensated data cube, depth x lateral x channel.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayedTensor {
    pub data: Array3<f64>,
    pub grid: ImageGrid,
}

impl DelayedTensor {
    pub fn new(data: Array3<f64>, grid: ImageGrid) -> Result<Self> {
        if data.dim() != grid.shape() {
            return Err(Error::shape(format!(
                "tensor {:?} does not match grid {:?}",
                data.dim(),
                grid.shape()
            )));
        }
        Ok(DelayedTensor { data, grid })
    }

    pub fn probe(&self) -> &ProbeConfig {
        &self.grid.probe
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn num_channels(&self) -> usize {
        self.data.dim().2
    }

    /// Channel vector at one pixel.
    pub fn pixel(&self, row: usize, col: usize) -> ndarray::ArrayView1<'_, f64> {
        self.data.slice(ndarray::s![row, col, ..])
    }
}

/// Round-trip delay for a 0° plane-wave transmit, `(z + |p - e|) / c`.
pub fn compute_delay(pixel: (f64, f64), element_x: f64, c: f64) -> f64 {
    round_trip_time(pixel.0, pixel.1, element_x, c)
}

/// Resamples every channel at the pixel-specific round-trip time by linear
/// interpolation. Times outside the recorded window yield exactly 0.
pub fn delay_compensate(frame: &RfFrame, grid: &ImageGrid) -> Result<DelayedTensor> {
    if frame.probe != grid.probe {
        return Err(Error::config("RF frame and image grid were built for different probes"));
    }
    let probe = &grid.probe;
    let (m, n, channels) = grid.shape();
    if frame.samples.ncols() != channels {
        return Err(Error::shape(format!(
            "frame has {} channels, probe declares {channels}",
            frame.samples.ncols()
        )));
    }
    let traces: Vec<Vec<f64>> = (0..channels).map(|i| frame.samples.column(i).to_vec()).collect();
    let elements = probe.element_positions();
    let len = frame.num_samples();
    let fs = probe.sampling_frequency;
    let c = probe.speed_of_sound;

    let mut data = vec![0.0; m * n * channels];
    data.par_chunks_mut(n * channels).enumerate().for_each(|(row, out)| {
        let z = grid.z(row);
        for col in 0..n {
            let x = grid.x(col);
            for (i, trace) in traces.iter().enumerate() {
                let s = (compute_delay((x, z), elements[i], c) - frame.t0) * fs;
                out[col * channels + i] = interpolate(trace, s, len);
            }
        }
    });

    let data = Array3::from_shape_vec((m, n, channels), data).expect("length matches shape");
    Ok(DelayedTensor { data, grid: *grid })
}

#[inline]
fn interpolate(trace: &[f64], s: f64, len: usize) -> f64 {
    if !(s >= 0.0) || s > (len - 1) as f64 {
        return 0.0;
    }
    let i0 = s.floor() as usize;
    if i0 + 1 >= len {
        return trace[len - 1];
    }
    let frac = s - i0 as f64;
    (1.0 - frac) * trace[i0] + frac * trace[i0 + 1]
}
