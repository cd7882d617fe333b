//! Contrast and resolution metrics on the linear envelope image.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::beamform::Method;
use crate::error::{Error, Result};
use crate::geometry::ImageGrid;

/// Half-width of the square window searched for the true peak around a hint.
pub const PEAK_SEARCH_HALF_WIDTH: usize = 10;
pub const MIN_REGION_PIXELS: usize = 25;

/// Circle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub row: f64,
    pub col: f64,
    pub radius: f64,
}

impl Circle {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let (dr, dc) = (row as f64 - self.row, col as f64 - self.col);
        dr * dr + dc * dc <= self.radius * self.radius
    }

    fn pixels(&self, dim: (usize, usize)) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..dim.0 {
            for c in 0..dim.1 {
                if self.contains(r, c) {
                    out.push((r, c));
                }
            }
        }
        out
    }

    fn inside(&self, dim: (usize, usize)) -> bool {
        self.row - self.radius >= 0.0
            && self.col - self.radius >= 0.0
            && self.row + self.radius <= (dim.0 - 1) as f64
            && self.col + self.radius <= (dim.1 - 1) as f64
    }
}

/// `(row, col)`.
pub type Pixel = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub target: Circle,
    pub background: Circle,
}

impl RegionSpec {
    /// Pixel lists of (target, background) after validating the regions against an image.
    pub fn resolve(&self, dim: (usize, usize)) -> Result<(Vec<Pixel>, Vec<Pixel>)> {
        for (name, c) in [("target", &self.target), ("background", &self.background)] {
            if !c.inside(dim) {
                return Err(Error::config(format!("{name} region {c:?} leaves the {dim:?} image")));
            }
        }
        let target = self.target.pixels(dim);
        let background = self.background.pixels(dim);
        for (name, px) in [("target", &target), ("background", &background)] {
            if px.len() < MIN_REGION_PIXELS {
                return Err(Error::config(format!(
                    "{name} region has {} pixels, need at least {MIN_REGION_PIXELS}",
                    px.len()
                )));
            }
        }
        if target.iter().any(|&(r, c)| self.background.contains(r, c)) {
            return Err(Error::config("target and background regions overlap"));
        }
        Ok((target, background))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastMetrics {
    pub cr: f64,
    /// `None` when both regions are constant (zero noise), so the ratio is undefined.
    pub cnr_db: Option<f64>,
}

fn mean_std(env: &Array2<f64>, px: &[(usize, usize)]) -> (f64, f64) {
    let n = px.len() as f64;
    let mean = px.iter().map(|&i| env[i]).sum::<f64>() / n;
    let var = px.iter().map(|&i| (env[i] - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// CR = |μt − μb| / max(μt, μb); CNR = 20 log10(|μt − μb| / sqrt(σt² + σb²)).
/// Standard deviations are population (1/n) estimates.
pub fn contrast_metrics(env: &Array2<f64>, regions: &RegionSpec) -> Result<ContrastMetrics> {
    let (target, background) = regions.resolve(env.dim())?;
    let (mt, st) = mean_std(env, &target);
    let (mb, sb) = mean_std(env, &background);
    Ok(contrast_from_stats(mt, st, mb, sb))
}

pub fn contrast_from_stats(mt: f64, st: f64, mb: f64, sb: f64) -> ContrastMetrics {
    let diff = (mt - mb).abs();
    let peak = mt.max(mb);
    let cr = if peak > 0.0 { diff / peak } else { 0.0 };
    let noise = (st * st + sb * sb).sqrt();
    let cnr_db = if noise > 0.0 { Some(20.0 * (diff / noise).log10()) } else { None };
    ContrastMetrics { cr, cnr_db }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Axial,
    Lateral,
}

/// Location of the maximum in the search window around `hint`.
pub fn locate_peak(env: &Array2<f64>, hint: (usize, usize)) -> Result<(usize, usize)> {
    let (m, n) = env.dim();
    if hint.0 >= m || hint.1 >= n {
        return Err(Error::config(format!("peak hint {hint:?} outside {m} x {n} image")));
    }
    let w = PEAK_SEARCH_HALF_WIDTH;
    let mut best = (hint, f64::NEG_INFINITY);
    for r in hint.0.saturating_sub(w)..=(hint.0 + w).min(m - 1) {
        for c in hint.1.saturating_sub(w)..=(hint.1 + w).min(n - 1) {
            if env[[r, c]] > best.1 {
                best = ((r, c), env[[r, c]]);
            }
        }
    }
    if !(best.1 > 0.0) {
        return Err(Error::UnboundedFwhm(format!("no positive maximum near {hint:?}")));
    }
    Ok(best.0)
}

/// Full width at half maximum in mm, with linearly interpolated crossings.
pub fn fwhm(env: &Array2<f64>, peak_hint: (usize, usize), axis: Axis, grid: &ImageGrid) -> Result<f64> {
    let peak = locate_peak(env, peak_hint)?;
    let (profile, index, spacing) = match axis {
        Axis::Axial => (env.column(peak.1).to_vec(), peak.0, grid.dz()),
        Axis::Lateral => (env.row(peak.0).to_vec(), peak.1, grid.dx()),
    };
    profile_fwhm(&profile, index).map(|px| px * spacing * 1e3)
}

/// FWHM of a 1-D profile around `peak`, in samples.
pub fn profile_fwhm(profile: &[f64], peak: usize) -> Result<f64> {
    let half = profile[peak] / 2.0;
    let mut left = None;
    for i in (0..peak).rev() {
        if profile[i] < half {
            let (a, b) = (profile[i], profile[i + 1]);
            left = Some(i as f64 + (half - a) / (b - a));
            break;
        }
    }
    let mut right = None;
    for i in peak + 1..profile.len() {
        if profile[i] < half {
            let (a, b) = (profile[i - 1], profile[i]);
            right = Some((i - 1) as f64 + (a - half) / (a - b));
            break;
        }
    }
    match (left, right) {
        (Some(l), Some(r)) => Ok(r - l),
        _ => Err(Error::UnboundedFwhm(format!(
            "profile never drops below half maximum on {} side",
            if left.is_none() { "the leading" } else { "the trailing" }
        ))),
    }
}

/// One record of the metrics table; fields are absent when the image has no matching feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: Method,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cnr_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub axial_fwhm_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lateral_fwhm_mm: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
}

impl MetricsReport {
    pub fn evaluate(
        method: Method,
        env: &Array2<f64>,
        grid: &ImageGrid,
        point: Option<(usize, usize)>,
        regions: Option<&RegionSpec>,
    ) -> Result<Self> {
        let mut report = MetricsReport {
            method,
            cr: None,
            cnr_db: None,
            axial_fwhm_mm: None,
            lateral_fwhm_mm: None,
            notes: Vec::new(),
        };
        if let Some(hint) = point {
            for axis in [Axis::Axial, Axis::Lateral] {
                match fwhm(env, hint, axis, grid) {
                    Ok(v) => match axis {
                        Axis::Axial => report.axial_fwhm_mm = Some(v),
                        Axis::Lateral => report.lateral_fwhm_mm = Some(v),
                    },
                    Err(Error::UnboundedFwhm(msg)) => report.notes.push(format!("{axis:?} FWHM: {msg}")),
                    Err(e) => return Err(e),
                }
            }
        }
        if let Some(regions) = regions {
            let c = contrast_metrics(env, regions)?;
            report.cr = Some(c.cr);
            report.cnr_db = c.cnr_db;
            if c.cnr_db.is_none() {
                report.notes.push("CNR undefined: both regions are constant".into());
            }
        }
        Ok(report)
    }
}
