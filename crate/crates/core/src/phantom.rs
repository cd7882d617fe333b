//! Synthetic plane-wave RF data from declarative phantom descriptions.
//!
//! A 0° plane wave insonifies every scatterer at time `z / c`; the echo reaches
//! element `i` after a further `sqrt((x - x_i)^2 + z^2) / c`. Each echo is a copy of
//! the transmit pulse (gaussian-windowed sinusoid at the center frequency) scaled by
//! the scatterer amplitude and by `1 / sqrt(r)` of the receive path. Contributions
//! add linearly. No attenuation, directivity or multiple scattering is modeled.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checksum::sha256_hex;
use crate::error::{Error, Result};

/// Pulse support is truncated at this many gaussian standard deviations.
const PULSE_SUPPORT_SIGMAS: f64 = 4.0;

/// Linear-array transducer and acquisition parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub num_channels: usize,
    /// Element pitch, meters.
    pub pitch: f64,
    /// Hz.
    pub center_frequency: f64,
    /// Hz.
    pub sampling_frequency: f64,
    /// m/s.
    pub speed_of_sound: f64,
    /// Pulse length in cycles, measured at the -6 dB points of the envelope.
    pub pulse_cycles: f64,
}

impl Default for ProbeConfig {
    /// Desk-scale 16-element linear array.
    fn default() -> Self {
        Self::with_channels(16)
    }
}

impl ProbeConfig {
    /// 7.6 MHz linear array with 0.3 mm pitch, sampled at eight times the center
    /// frequency so the 2·fc DMAS band sits well below Nyquist.
    pub fn with_channels(num_channels: usize) -> Self {
        let fc = 7.6e6;
        ProbeConfig {
            num_channels,
            pitch: 0.3e-3,
            center_frequency: fc,
            sampling_frequency: 8.0 * fc,
            speed_of_sound: 1540.0,
            pulse_cycles: 2.5,
        }
    }

    /// The full 128-channel configuration.
    pub fn full_scale() -> Self {
        Self::with_channels(128)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_channels < 2 {
            return Err(Error::config(format!(
                "probe needs at least 2 channels, got {}",
                self.num_channels
            )));
        }
        let positive = [
            ("pitch", self.pitch),
            ("center_frequency", self.center_frequency),
            ("sampling_frequency", self.sampling_frequency),
            ("speed_of_sound", self.speed_of_sound),
            ("pulse_cycles", self.pulse_cycles),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::config(format!("{name} must be positive, got {value}")));
            }
        }
        if self.sampling_frequency < 4.0 * self.center_frequency {
            return Err(Error::config(format!(
                "sampling frequency {} Hz is below 4 x center frequency {} Hz",
                self.sampling_frequency, self.center_frequency
            )));
        }
        Ok(())
    }

    /// Lateral position of element `i`; the array is centered on x = 0.
    pub fn element_x(&self, i: usize) -> f64 {
        (i as f64 - (self.num_channels as f64 - 1.0) / 2.0) * self.pitch
    }

    pub fn element_positions(&self) -> Vec<f64> {
        (0..self.num_channels).map(|i| self.element_x(i)).collect()
    }

    pub fn wavelength(&self) -> f64 {
        self.speed_of_sound / self.center_frequency
    }

    /// Standard deviation (seconds) of the gaussian pulse envelope.
    pub fn pulse_sigma(&self) -> f64 {
        let fwhm = self.pulse_cycles / self.center_frequency;
        fwhm / 2.0 / (2.0 * std::f64::consts::LN_2).sqrt()
    }

    /// Transmit pulse evaluated `tau` seconds from its peak.
    pub fn pulse(&self, tau: f64) -> f64 {
        let sigma = self.pulse_sigma();
        if tau.abs() > PULSE_SUPPORT_SIGMAS * sigma {
            return 0.0;
        }
        (-tau * tau / (2.0 * sigma * sigma)).exp() * (2.0 * PI * self.center_frequency * tau).cos()
    }

    pub fn pulse_half_support(&self) -> f64 {
        PULSE_SUPPORT_SIGMAS * self.pulse_sigma()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointTarget {
    pub x: f64,
    pub z: f64,
    pub amplitude: f64,
}

/// Circular inclusion that rescales the speckle scatterers inside it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CystRegion {
    pub x: f64,
    pub z: f64,
    pub radius: f64,
    /// Relative amplitude of the speckle inside; 0 is anechoic.
    pub echogenicity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_min: f64,
    pub x_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Rect {
    pub fn area_mm2(&self) -> f64 {
        (self.x_max - self.x_min) * (self.z_max - self.z_min) * 1e6
    }
}

/// Declarative phantom: isolated point targets plus an optional speckle field with cysts.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PhantomSpec {
    #[serde(default)]
    pub point_targets: Vec<PointTarget>,
    #[serde(default)]
    pub cyst_regions: Vec<CystRegion>,
    /// Speckle scatterers per mm² inside `speckle_region`.
    #[serde(default)]
    pub speckle_density: f64,
    #[serde(default)]
    pub speckle_region: Option<Rect>,
    #[serde(default)]
    pub rng_seed: u64,
}

/// A single resolved scatterer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scatterer {
    pub x: f64,
    pub z: f64,
    pub amplitude: f64,
}

impl PhantomSpec {
    pub fn point(x: f64, z: f64) -> Self {
        PhantomSpec {
            point_targets: vec![PointTarget { x, z, amplitude: 1.0 }],
            ..Default::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: PhantomSpec =
            toml::from_str(text).map_err(|e| Error::Format(format!("phantom config: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("phantom spec is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.point_targets {
            if !(t.z > 0.0) || !t.x.is_finite() {
                return Err(Error::config(format!("point target at ({}, {}) needs z > 0", t.x, t.z)));
            }
            if !(t.amplitude >= 0.0) {
                return Err(Error::config(format!("negative amplitude {}", t.amplitude)));
            }
        }
        for c in &self.cyst_regions {
            if !(c.z > 0.0 && c.radius > 0.0 && c.echogenicity >= 0.0) {
                return Err(Error::config(format!("invalid cyst {c:?}")));
            }
        }
        if !(self.speckle_density >= 0.0) {
            return Err(Error::config("speckle density must be non-negative"));
        }
        if let Some(r) = &self.speckle_region {
            if !(r.z_min > 0.0 && r.z_max > r.z_min && r.x_max > r.x_min) {
                return Err(Error::config(format!("invalid speckle region {r:?}")));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 over the canonical JSON form.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("phantom spec serializes"))
    }

    /// Expands the spec into concrete scatterers. Identical seeds give identical fields.
    pub fn scatterers(&self) -> Vec<Scatterer> {
        let mut out: Vec<Scatterer> = self
            .point_targets
            .iter()
            .map(|t| Scatterer { x: t.x, z: t.z, amplitude: t.amplitude })
            .collect();

        if let Some(region) = self.speckle_region {
            let count = (self.speckle_density * region.area_mm2()).round() as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
            for _ in 0..count {
                let x = region.x_min + (region.x_max - region.x_min) * rng.random::<f64>();
                let z = region.z_min + (region.z_max - region.z_min) * rng.random::<f64>();
                let mut amplitude = rng.random::<f64>();
                for cyst in &self.cyst_regions {
                    let (dx, dz) = (x - cyst.x, z - cyst.z);
                    if dx * dx + dz * dz <= cyst.radius * cyst.radius {
                        amplitude *= cyst.echogenicity;
                    }
                }
                if amplitude > 0.0 {
                    out.push(Scatterer { x, z, amplitude });
                }
            }
        }
        out
    }
}

/// Receive window of a simulated acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionWindow {
    /// Time of the first sample, seconds after transmit.
    pub t0: f64,
    pub num_samples: usize,
}

impl AcquisitionWindow {
    /// Window starting at transmit that records every echo from depths up to `z_max`
    /// for lateral positions within the aperture.
    pub fn covering_depth(probe: &ProbeConfig, z_max: f64) -> Self {
        let half_aperture = probe.element_x(probe.num_channels - 1);
        let lateral = 2.0 * half_aperture;
        let t_end = (z_max + (z_max * z_max + lateral * lateral).sqrt()) / probe.speed_of_sound
            + 1.5 * probe.pulse_half_support();
        AcquisitionWindow { t0: 0.0, num_samples: (t_end * probe.sampling_frequency).ceil() as usize + 1 }
    }

    pub fn t_end(&self, probe: &ProbeConfig) -> f64 {
        self.t0 + (self.num_samples as f64 - 1.0) / probe.sampling_frequency
    }
}

/// Raw channel data from one plane-wave transmit.
#[derive(Debug, Clone, PartialEq)]
pub struct RfFrame {
    /// time x channel.
    pub samples: Array2<f64>,
    /// Time of sample 0, seconds after transmit.
    pub t0: f64,
    pub probe: ProbeConfig,
    /// Digest of the phantom the frame was generated from (empty for external data).
    pub provenance: String,
}

impl RfFrame {
    pub fn num_samples(&self) -> usize {
        self.samples.nrows()
    }

    /// Hex SHA-256 over probe, t0 and raw samples.
    pub fn digest(&self) -> String {
        let mut bytes = serde_json::to_vec(&self.probe).expect("probe serializes");
        bytes.extend_from_slice(&self.t0.to_le_bytes());
        for v in self.samples.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        sha256_hex(&bytes)
    }
}

/// Two-way time of flight from the 0° plane-wave transmit to `(x, z)` and back to `element_x`.
#[inline]
pub fn round_trip_time(x: f64, z: f64, element_x: f64, c: f64) -> f64 {
    let dx = x - element_x;
    (z + (dx * dx + z * z).sqrt()) / c
}

pub fn synthesize_frame(
    phantom: &PhantomSpec,
    probe: &ProbeConfig,
    window: &AcquisitionWindow,
) -> Result<RfFrame> {
    phantom.validate()?;
    let mut frame = synthesize_scatterers(&phantom.scatterers(), probe, window)?;
    frame.provenance = phantom.digest();
    Ok(frame)
}

/// Simulates an explicit scatterer list. Scatterers are added in order, so the
/// result is bit-reproducible for a given list.
pub fn synthesize_scatterers(
    scatterers: &[Scatterer],
    probe: &ProbeConfig,
    window: &AcquisitionWindow,
) -> Result<RfFrame> {
    probe.validate()?;
    if window.num_samples == 0 {
        return Err(Error::config("acquisition window has no samples"));
    }
    let fs = probe.sampling_frequency;
    let c = probe.speed_of_sound;
    let support = probe.pulse_half_support();
    let elements = probe.element_positions();
    let mut samples = Array2::<f64>::zeros((window.num_samples, probe.num_channels));

    for s in scatterers {
        if !(s.z > 0.0) {
            return Err(Error::config(format!("scatterer depth {} must be positive", s.z)));
        }
        for (i, &xe) in elements.iter().enumerate() {
            let rx = ((s.x - xe).powi(2) + s.z * s.z).sqrt();
            let arrival = (s.z + rx) / c;
            let gain = s.amplitude / rx.sqrt();
            let first = ((arrival - support - window.t0) * fs).ceil();
            let last = ((arrival + support - window.t0) * fs).floor();
            if first < 0.0 || last > (window.num_samples - 1) as f64 {
                return Err(Error::OutOfWindow { x: s.x, z: s.z });
            }
            for n in first as usize..=last as usize {
                let tau = window.t0 + n as f64 / fs - arrival;
                samples[[n, i]] += gain * probe.pulse(tau);
            }
        }
    }

    Ok(RfFrame { samples, t0: window.t0, probe: *probe, provenance: String::new() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window_for(probe: &ProbeConfig) -> AcquisitionWindow {
        AcquisitionWindow::covering_depth(probe, 0.035)
    }

    fn argmax(col: impl Iterator<Item = f64>) -> usize {
        col.enumerate()
            .fold((0, f64::MIN), |best, (i, v)| if v > best.1 { (i, v) } else { best })
            .0
    }

    #[test]
    fn element_positions_are_centered() {
        let probe = ProbeConfig::default();
        let xs = probe.element_positions();
        assert!((xs[0] + xs[15]).abs() < 1e-15);
        assert!((xs[0] + 7.5 * 0.3e-3).abs() < 1e-15);
    }

    #[test]
    fn probe_rejects_undersampling() {
        let mut probe = ProbeConfig::default();
        probe.sampling_frequency = 3.0 * probe.center_frequency;
        assert!(matches!(probe.validate(), Err(Error::Config(_))));
        probe = ProbeConfig::with_channels(1);
        assert!(probe.validate().is_err());
    }

    #[test]
    fn pulse_is_half_amplitude_at_six_db_points() {
        let probe = ProbeConfig::default();
        let half = probe.pulse_cycles / probe.center_frequency / 2.0;
        let sigma = probe.pulse_sigma();
        let env = (-half * half / (2.0 * sigma * sigma)).exp();
        assert!((env - 0.5).abs() < 1e-12);
        assert_eq!(probe.pulse(0.0), 1.0);
    }

    #[test]
    fn on_axis_echo_peaks_at_two_way_time() {
        // 1 µs pitch would be too coarse, so sample much faster than the default.
        let mut probe = ProbeConfig::with_channels(2);
        probe.pitch = 1e-9; // both elements effectively at x = 0
        probe.sampling_frequency = 1e9;
        let frame = synthesize_frame(&PhantomSpec::point(0.0, 0.020), &probe, &window_for(&probe)).unwrap();
        let peak = argmax(frame.samples.column(0).iter().copied());
        let t_peak = frame.t0 + peak as f64 / probe.sampling_frequency;
        assert!((t_peak - 25.974e-6).abs() < 1e-9, "{t_peak}");
        assert!((t_peak - 2.0 * 0.020 / 1540.0).abs() <= 0.5e-9);
    }

    #[test]
    fn off_axis_element_peak_matches_brute_force_oracle() {
        let mut probe = ProbeConfig::with_channels(2);
        probe.pitch = 10e-3; // elements at -5 mm and +5 mm
        let window = window_for(&probe);
        let frame = synthesize_frame(&PhantomSpec::point(0.0, 0.020), &probe, &window).unwrap();

        let expected = (0.020 + (0.020f64.powi(2) + 0.005f64.powi(2)).sqrt()) / 1540.0;
        assert!((expected - 26.374e-6).abs() < 5e-10);

        // Oracle: evaluate the received pulse directly at every sample time.
        let oracle: Vec<f64> = (0..window.num_samples)
            .map(|n| {
                let t = window.t0 + n as f64 / probe.sampling_frequency;
                let r = (0.005f64.powi(2) + 0.020f64.powi(2)).sqrt();
                probe.pulse(t - expected) / r.sqrt()
            })
            .collect();
        let oracle_peak = argmax(oracle.iter().copied());
        for ch in 0..2 {
            assert_eq!(argmax(frame.samples.column(ch).iter().copied()), oracle_peak);
        }
        assert!((oracle_peak as f64 / probe.sampling_frequency - expected).abs() < 1.0 / probe.sampling_frequency);
    }

    #[test]
    fn empty_phantom_gives_zero_frame() {
        let probe = ProbeConfig::default();
        let frame = synthesize_frame(&PhantomSpec::default(), &probe, &window_for(&probe)).unwrap();
        assert!(frame.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deep_scatterer_is_rejected() {
        let probe = ProbeConfig::default();
        let window = AcquisitionWindow::covering_depth(&probe, 0.020);
        let err = synthesize_frame(&PhantomSpec::point(0.0, 0.030), &probe, &window).unwrap_err();
        assert!(matches!(err, Error::OutOfWindow { .. }));
    }

    #[test]
    fn speckle_field_is_seeded() {
        let spec = PhantomSpec {
            speckle_density: 5.0,
            speckle_region: Some(Rect { x_min: -2e-3, x_max: 2e-3, z_min: 15e-3, z_max: 20e-3 }),
            cyst_regions: vec![CystRegion { x: 0.0, z: 17.5e-3, radius: 1e-3, echogenicity: 0.0 }],
            rng_seed: 7,
            ..Default::default()
        };
        let a = spec.scatterers();
        assert_eq!(a, spec.scatterers());
        assert!(a.iter().all(|s| (s.x.powi(2) + (s.z - 17.5e-3).powi(2)).sqrt() > 1e-3));
        let other = PhantomSpec { rng_seed: 8, ..spec.clone() };
        assert_ne!(a, other.scatterers());
    }

    #[test]
    fn toml_round_trip() {
        let text = r#"
            rng_seed = 3
            speckle_density = 10.0

            [[point_targets]]
            x = 0.0
            z = 0.02
            amplitude = 1.0

            [speckle_region]
            x_min = -0.002
            x_max = 0.002
            z_min = 0.016
            z_max = 0.022
        "#;
        let spec = PhantomSpec::from_toml_str(text).unwrap();
        assert_eq!(spec.point_targets.len(), 1);
        assert_eq!(PhantomSpec::from_toml_str(&spec.to_toml_string()).unwrap(), spec);
        assert!(PhantomSpec::from_toml_str("[[point_targets]]\nx = 0.0\nz = -1.0\namplitude = 1.0").is_err());
    }
}
