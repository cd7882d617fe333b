//! The four reference beamformers offered to the user, plus the apodized DAS
//! used by the network head.

mod fdmas;
mod gcf;
mod mvdr;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DelayedTensor;

pub use fdmas::{bandpass_taps, dmas_pixel, fdmas, fdmas_prefilter, filter_line, FdmasConfig};
pub use gcf::{gcf, gcf_map, gcf_value, GcfConfig};
pub use mvdr::{mvdr, mvdr_pixel, mvdr_with_diagnostics, MvdrConfig, MvdrOutput, MvdrPixel};

/// Which beamformer produced an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "DAS")]
    Das,
    #[serde(rename = "FDMAS")]
    Fdmas,
    #[serde(rename = "MVDR")]
    Mvdr,
    #[serde(rename = "GCF")]
    Gcf,
    #[serde(rename = "MODEL")]
    Model,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Das, Method::Fdmas, Method::Mvdr, Method::Gcf, Method::Model];
    pub const CONVENTIONAL: [Method; 4] = [Method::Das, Method::Fdmas, Method::Mvdr, Method::Gcf];

    pub fn tag(&self) -> &'static str {
        match self {
            Method::Das => "DAS",
            Method::Fdmas => "FDMAS",
            Method::Mvdr => "MVDR",
            Method::Gcf => "GCF",
            Method::Model => "MODEL",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "das" => Ok(Method::Das),
            "fdmas" => Ok(Method::Fdmas),
            "mvdr" => Ok(Method::Mvdr),
            "gcf" => Ok(Method::Gcf),
            "model" => Ok(Method::Model),
            other => Err(Error::config(format!("unknown beamforming method '{other}'"))),
        }
    }
}

/// Beamformed RF image (pre-envelope), depth x lateral.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformedData {
    pub values: Array2<f64>,
    pub method: Method,
}

/// Per-pixel, per-channel weights; same shape as the delayed tensor, sign unconstrained.
#[derive(Debug, Clone, PartialEq)]
pub struct ApodWeights {
    pub weights: Array3<f64>,
}

impl ApodWeights {
    pub fn uniform(shape: (usize, usize, usize), value: f64) -> Self {
        ApodWeights { weights: Array3::from_elem(shape, value) }
    }
}

/// Delay-and-sum: `sum_i apod[p, q, i] * t[p, q, i]`, uniform unit weights when `apod` is `None`.
pub fn das(t: &DelayedTensor, apod: Option<&ApodWeights>) -> Result<BeamformedData> {
    let (m, n, _) = t.shape();
    let mut values = Array2::<f64>::zeros((m, n));
    match apod {
        None => {
            Zip::from(&mut values).and(t.data.lanes(ndarray::Axis(2))).for_each(|out, lane| {
                let mut acc = 0.0;
                for &v in lane.iter() {
                    acc += v;
                }
                *out = acc;
            });
        }
        Some(w) => {
            if w.weights.dim() != t.shape() {
                return Err(Error::shape(format!(
                    "apodization {:?} vs tensor {:?}",
                    w.weights.dim(),
                    t.shape()
                )));
            }
            Zip::from(&mut values)
                .and(t.data.lanes(ndarray::Axis(2)))
                .and(w.weights.lanes(ndarray::Axis(2)))
                .for_each(|out, lane, wl| {
                    let mut acc = 0.0;
                    for (&v, &a) in lane.iter().zip(wl.iter()) {
                        acc += a * v;
                    }
                    *out = acc;
                });
        }
    }
    Ok(BeamformedData { values, method: Method::Das })
}

/// Configuration of all four reference beamformers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamformerSet {
    pub fdmas: FdmasConfig,
    pub mvdr: MvdrConfig,
    pub gcf: GcfConfig,
}

impl BeamformerSet {
    pub fn for_channels(num_channels: usize) -> Self {
        BeamformerSet {
            fdmas: FdmasConfig::default(),
            mvdr: MvdrConfig::for_channels(num_channels),
            gcf: GcfConfig::default(),
        }
    }

    /// Runs one conventional method. `Method::Model` is not a conventional beamformer.
    pub fn run(&self, method: Method, t: &DelayedTensor) -> Result<BeamformedData> {
        match method {
            Method::Das => das(t, None),
            Method::Fdmas => fdmas(t, &self.fdmas),
            Method::Mvdr => mvdr(t, &self.mvdr),
            Method::Gcf => gcf(t, &self.gcf),
            Method::Model => Err(Error::config("the model image needs a trained network, not a beamformer config")),
        }
    }
}
