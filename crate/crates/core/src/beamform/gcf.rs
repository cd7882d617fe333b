//! Generalized coherence factor weighting.
//!
//! For real channel data the aperture spectrum is conjugate-symmetric, so only
//! bins `0..=M0` are evaluated directly and the total energy comes from Parseval:
//! `sum_k |S(k)|^2 = N * sum_i s_i^2`.

use std::f64::consts::PI;

use ndarray::{Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use super::{das, BeamformedData, Method};
use crate::error::{Error, Result};
use crate::geometry::DelayedTensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GcfConfig {
    /// Bins `|k| <= low_freq_cutoff` count as coherent.
    pub low_freq_cutoff: usize,
}

impl Default for GcfConfig {
    fn default() -> Self {
        GcfConfig { low_freq_cutoff: 1 }
    }
}

impl GcfConfig {
    pub fn validate(&self, num_channels: usize) -> Result<()> {
        if 2 * self.low_freq_cutoff >= num_channels {
            return Err(Error::config(format!(
                "GCF cutoff {} must be below N/2 = {}",
                self.low_freq_cutoff,
                num_channels as f64 / 2.0
            )));
        }
        Ok(())
    }
}

struct Twiddles {
    cos: Vec<Vec<f64>>,
    sin: Vec<Vec<f64>>,
}

impl Twiddles {
    fn new(n: usize, m0: usize) -> Self {
        let mut cos = Vec::with_capacity(m0);
        let mut sin = Vec::with_capacity(m0);
        for k in 1..=m0 {
            let (c, s): (Vec<f64>, Vec<f64>) = (0..n)
                .map(|i| {
                    let phase = 2.0 * PI * (k * i) as f64 / n as f64;
                    (phase.cos(), phase.sin())
                })
                .unzip();
            cos.push(c);
            sin.push(s);
        }
        Twiddles { cos, sin }
    }

    fn value<'a>(&self, s: impl Iterator<Item = &'a f64> + Clone, n: usize) -> f64 {
        let mut dc = 0.0;
        let mut energy = 0.0;
        for &v in s.clone() {
            dc += v;
            energy += v * v;
        }
        let total = n as f64 * energy;
        if !(total > 0.0) {
            return 0.0;
        }
        let mut low = dc * dc;
        for (c, sn) in self.cos.iter().zip(&self.sin) {
            let (mut re, mut im) = (0.0, 0.0);
            for ((&v, cw), sw) in s.clone().zip(c).zip(sn) {
                re += v * cw;
                im -= v * sw;
            }
            low += 2.0 * (re * re + im * im);
        }
        (low / total).clamp(0.0, 1.0)
    }
}

/// GCF of one channel vector, in [0, 1]; 0 when the vector has no energy.
pub fn gcf_value(s: &[f64], low_freq_cutoff: usize) -> f64 {
    Twiddles::new(s.len(), low_freq_cutoff).value(s.iter(), s.len())
}

/// Per-pixel coherence factor map.
pub fn gcf_map(t: &DelayedTensor, cfg: &GcfConfig) -> Result<Array2<f64>> {
    let (m, n, channels) = t.shape();
    cfg.validate(channels)?;
    let tw = Twiddles::new(channels, cfg.low_freq_cutoff);
    let mut out = Array2::<f64>::zeros((m, n));
    Zip::from(&mut out)
        .and(t.data.lanes(Axis(2)))
        .par_for_each(|o, lane| *o = tw.value(lane.iter(), channels));
    Ok(out)
}

/// `GCF * DAS` per pixel.
pub fn gcf(t: &DelayedTensor, cfg: &GcfConfig) -> Result<BeamformedData> {
    let factor = gcf_map(t, cfg)?;
    let mut out = das(t, None)?;
    out.values *= &factor;
    out.method = Method::Gcf;
    Ok(out)
}
