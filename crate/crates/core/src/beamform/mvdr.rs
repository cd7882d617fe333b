//! Minimum-variance distortionless-response beamformer on real RF.
//!
//! Per pixel the covariance is spatially smoothed over the `K = N - L + 1`
//! length-`L` subapertures and averaged over neighbouring depth rows:
//!
//! ```text
//! R  = 1/(K * rows) * sum_rows sum_k s_k s_k^T
//! R' = R + eps * trace(R) / L * I
//! w  = R'^-1 a / (a^T R'^-1 a),   a = ones(L)
//! y  = w^T (1/K) sum_k s_k
//! ```
//!
//! The subaperture sum is built from its first row plus the shift recurrence
//! `R[a+1][b+1] = R[a][b] - s[a] s[b] + s[a+K] s[b+K]`, which costs O(L*K + L^2)
//! per snapshot instead of O(K*L^2).

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BeamformedData, Method};
use crate::error::{Error, Result};
use crate::geometry::DelayedTensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MvdrConfig {
    pub subaperture_len: usize,
    pub diagonal_loading: f64,
    /// Covariance is averaged over rows `p - d ..= p + d`, clipped at the image edge.
    pub averaging_depth_samples: usize,
}

impl MvdrConfig {
    /// `L = N/2`, loading 1/100, ±1 depth sample.
    pub fn for_channels(num_channels: usize) -> Self {
        MvdrConfig {
            subaperture_len: (num_channels / 2).max(1),
            diagonal_loading: 0.01,
            averaging_depth_samples: 1,
        }
    }

    pub fn validate(&self, num_channels: usize) -> Result<()> {
        if self.subaperture_len == 0 || self.subaperture_len > num_channels {
            return Err(Error::config(format!(
                "subaperture length {} outside 1..={num_channels}",
                self.subaperture_len
            )));
        }
        if !(self.diagonal_loading > 0.0) {
            return Err(Error::config("diagonal loading must be positive"));
        }
        Ok(())
    }
}

/// Weights chosen for one pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct MvdrPixel {
    pub weights: Vec<f64>,
    pub output: f64,
    /// The loaded covariance was singular and uniform `1/L` weights were used.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MvdrOutput {
    pub data: BeamformedData,
    /// Pixels that fell back to uniform weights, as (row, col).
    pub fallback_pixels: Vec<(usize, usize)>,
}

pub fn mvdr(t: &DelayedTensor, cfg: &MvdrConfig) -> Result<BeamformedData> {
    mvdr_with_diagnostics(t, cfg).map(|o| o.data)
}

pub fn mvdr_with_diagnostics(t: &DelayedTensor, cfg: &MvdrConfig) -> Result<MvdrOutput> {
    let (m, n, channels) = t.shape();
    cfg.validate(channels)?;
    let rows: Vec<Vec<(f64, bool)>> = (0..m)
        .into_par_iter()
        .map(|p| {
            let mut work = Workspace::new(cfg.subaperture_len);
            (0..n)
                .map(|q| {
                    let px = solve_pixel(t, cfg, p, q, &mut work, false);
                    (px.output, px.fallback)
                })
                .collect()
        })
        .collect();

    let mut fallback_pixels = Vec::new();
    let values = Array2::from_shape_fn((m, n), |(p, q)| {
        let (v, fb) = rows[p][q];
        if fb {
            fallback_pixels.push((p, q));
        }
        v
    });
    Ok(MvdrOutput { data: BeamformedData { values, method: Method::Mvdr }, fallback_pixels })
}

/// Full weight solution at a single pixel.
pub fn mvdr_pixel(t: &DelayedTensor, cfg: &MvdrConfig, row: usize, col: usize) -> Result<MvdrPixel> {
    cfg.validate(t.num_channels())?;
    let mut work = Workspace::new(cfg.subaperture_len);
    Ok(solve_pixel(t, cfg, row, col, &mut work, true))
}

struct Workspace {
    cov: Vec<f64>,
    chol: Vec<f64>,
    x: Vec<f64>,
}

impl Workspace {
    fn new(l: usize) -> Self {
        Workspace { cov: vec![0.0; l * l], chol: vec![0.0; l * l], x: vec![0.0; l] }
    }
}

fn solve_pixel(
    t: &DelayedTensor,
    cfg: &MvdrConfig,
    p: usize,
    q: usize,
    work: &mut Workspace,
    keep_weights: bool,
) -> MvdrPixel {
    let (m, _, channels) = t.shape();
    let l = cfg.subaperture_len;
    let k = channels - l + 1;

    work.cov.iter_mut().for_each(|v| *v = 0.0);
    let lo = p.saturating_sub(cfg.averaging_depth_samples);
    let hi = (p + cfg.averaging_depth_samples).min(m - 1);
    for row in lo..=hi {
        accumulate_smoothed(t.pixel(row, q), l, k, &mut work.cov);
    }
    let norm = 1.0 / (k * (hi - lo + 1)) as f64;
    let mut trace = 0.0;
    for v in work.cov.iter_mut() {
        *v *= norm;
    }
    for a in 0..l {
        trace += work.cov[a * l + a];
    }

    let s = t.pixel(p, q);
    let mean_sub: Vec<f64> = (0..l).map(|a| (0..k).map(|j| s[j + a]).sum::<f64>() / k as f64).collect();

    let loading = cfg.diagonal_loading * trace / l as f64;
    for a in 0..l {
        work.cov[a * l + a] += loading;
    }

    let solved = trace > 0.0 && trace.is_finite() && cholesky_solve_ones(&work.cov, l, &mut work.chol, &mut work.x);
    let (weights, fallback) = if solved {
        let denom: f64 = work.x.iter().sum();
        (work.x.iter().map(|v| v / denom).collect::<Vec<_>>(), false)
    } else {
        (vec![1.0 / l as f64; l], true)
    };
    let output: f64 = weights.iter().zip(&mean_sub).map(|(w, s)| w * s).sum();
    MvdrPixel { weights: if keep_weights { weights } else { Vec::new() }, output, fallback }
}

/// Adds `sum_k s_k s_k^T` over the length-`l` subapertures of `s` into `cov` (row-major l x l).
fn accumulate_smoothed(s: ArrayView1<'_, f64>, l: usize, k: usize, cov: &mut [f64]) {
    let mut block = vec![0.0; l * l];
    for b in 0..l {
        let mut acc = 0.0;
        for j in 0..k {
            acc += s[j] * s[j + b];
        }
        block[b] = acc;
    }
    for a in 0..l - 1 {
        for b in a..l - 1 {
            let next = block[a * l + b] - s[a] * s[b] + s[a + k] * s[b + k];
            block[(a + 1) * l + b + 1] = next;
        }
    }
    for a in 0..l {
        for b in a..l {
            let v = block[a * l + b];
            cov[a * l + b] += v;
            if a != b {
                cov[b * l + a] += v;
            }
        }
    }
}

/// Solves `A x = 1` for symmetric positive-definite `A`. Returns false when `A`
/// is not numerically positive definite.
fn cholesky_solve_ones(a: &[f64], l: usize, chol: &mut [f64], x: &mut [f64]) -> bool {
    for i in 0..l {
        for j in 0..=i {
            let mut sum = a[i * l + j];
            for k in 0..j {
                sum -= chol[i * l + k] * chol[j * l + k];
            }
            if i == j {
                if !(sum > 0.0) {
                    return false;
                }
                chol[i * l + i] = sum.sqrt();
            } else {
                chol[i * l + j] = sum / chol[j * l + j];
            }
        }
    }
    for i in 0..l {
        let mut sum = 1.0;
        for k in 0..i {
            sum -= chol[i * l + k] * x[k];
        }
        x[i] = sum / chol[i * l + i];
    }
    for i in (0..l).rev() {
        let mut sum = x[i];
        for k in i + 1..l {
            sum -= chol[k * l + i] * x[k];
        }
        x[i] = sum / chol[i * l + i];
    }
    x.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beamform::tests::tensor_from;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_covariance_gives_uniform_weights() {
        let l = 5;
        let mut ident = vec![0.0; l * l];
        for i in 0..l {
            ident[i * l + i] = 1.0;
        }
        let (mut chol, mut x) = (vec![0.0; l * l], vec![0.0; l]);
        assert!(cholesky_solve_ones(&ident, l, &mut chol, &mut x));
        let s: f64 = x.iter().sum();
        for v in x {
            assert!((v / s - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn recurrence_matches_direct_subaperture_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (l, k) = (6, 11);
        let mut cov = vec![0.0; l * l];
        accumulate_smoothed(ArrayView1::from(&s), l, k, &mut cov);
        for a in 0..l {
            for b in 0..l {
                let direct: f64 = (0..k).map(|j| s[j + a] * s[j + b]).sum();
                assert!((cov[a * l + b] - direct).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn all_zero_pixel_falls_back_and_outputs_zero() {
        let t = tensor_from(Array3::zeros((8, 8, 8)));
        let out = mvdr_with_diagnostics(&t, &MvdrConfig::for_channels(8)).unwrap();
        assert_eq!(out.fallback_pixels.len(), 64);
        assert!(out.data.values.iter().all(|&v| v == 0.0));
        let px = mvdr_pixel(&t, &MvdrConfig::for_channels(8), 0, 0).unwrap();
        assert!(px.fallback);
        assert_eq!(px.weights, vec![0.25; 4]);
    }

    #[test]
    fn weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = tensor_from(Array3::from_shape_fn((8, 8, 16), |_| rng.random_range(-1.0..1.0)));
        let cfg = MvdrConfig::for_channels(16);
        for p in 0..8 {
            for q in 0..8 {
                let px = mvdr_pixel(&t, &cfg, p, q).unwrap();
                assert!(!px.fallback);
                assert!((px.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_aperture_passes_signal_unchanged() {
        // A coherent on-focus pixel: every channel equal, distortionless => output equals the value.
        let t = tensor_from(Array3::from_elem((8, 8, 16), 0.7));
        let out = mvdr(&t, &MvdrConfig::for_channels(16)).unwrap();
        assert!(out.values.iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn config_validation() {
        assert!(MvdrConfig { subaperture_len: 0, ..MvdrConfig::for_channels(8) }.validate(8).is_err());
        assert!(MvdrConfig { subaperture_len: 9, ..MvdrConfig::for_channels(8) }.validate(8).is_err());
        assert!(MvdrConfig { diagonal_loading: 0.0, ..MvdrConfig::for_channels(8) }.validate(8).is_err());
    }
}
