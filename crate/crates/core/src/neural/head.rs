//! Differentiable beamforming head: weighted channel sum, envelope, log compression, MSE.

use std::f64::consts::LN_10;

use ndarray::{Array2, Array3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::beamform::{ApodWeights, BeamformedData, Method};
use crate::error::{Error, Result};
use crate::geometry::DelayedTensor;
use crate::postprocess::{bmode, hilbert_line, BModeImage};

/// Where the training loss is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossDomain {
    /// Normalized log-compressed image `(db + DR) / DR`, soft floor.
    #[default]
    Bmode,
    /// Beamformed RF divided by its peak magnitude.
    Rf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub dynamic_range: f64,
    /// Normalized level below which the floor is smoothed by `k + k tanh((u - k) / k)`.
    pub soft_knee: f64,
    pub domain: LossDomain,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { dynamic_range: crate::postprocess::DEFAULT_DYNAMIC_RANGE_DB, soft_knee: 0.05, domain: LossDomain::Bmode }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dynamic_range > 0.0 && self.dynamic_range.is_finite()) {
            return Err(Error::config("dynamic range must be positive"));
        }
        if !(self.soft_knee > 0.0 && self.soft_knee < 1.0) {
            return Err(Error::config("soft knee must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// What the head output is compared against.
#[derive(Debug, Clone)]
pub struct TrainTarget {
    pub bmode: BModeImage,
    /// Needed only for [`LossDomain::Rf`].
    pub rf: Option<BeamformedData>,
}

impl TrainTarget {
    pub fn from_beamformed(b: &BeamformedData, dynamic_range: f64) -> Result<Self> {
        Ok(TrainTarget { bmode: bmode(b, dynamic_range)?, rf: Some(b.clone()) })
    }
}

#[derive(Debug, Clone)]
pub struct HeadLoss {
    pub loss: f64,
    /// dL/dw, same layout as the apodization weights.
    pub grad: Array3<f64>,
}

/// `y[p, q] = sum_i w[p, q, i] t[p, q, i]`, summed in channel order.
pub fn apply_weights(t: &DelayedTensor, w: &ApodWeights) -> Result<BeamformedData> {
    if w.weights.dim() != t.data.dim() {
        return Err(Error::shape(format!(
            "weights {:?} do not match tensor {:?}",
            w.weights.dim(),
            t.data.dim()
        )));
    }
    let (m, n, _) = t.shape();
    let mut values = Array2::<f64>::zeros((m, n));
    Zip::from(&mut values)
        .and(t.data.lanes(Axis(2)))
        .and(w.weights.lanes(Axis(2)))
        .for_each(|o, s, a| {
            let mut acc = 0.0;
            for (&sv, &av) in s.iter().zip(a.iter()) {
                acc += av * sv;
            }
            *o = acc;
        });
    Ok(BeamformedData { values, method: Method::Model })
}

/// Evaluation-mode B-mode image of the weighted sum (hard clamp).
pub fn beamform_head(t: &DelayedTensor, w: &ApodWeights, dynamic_range: f64) -> Result<BModeImage> {
    bmode(&apply_weights(t, w)?, dynamic_range)
}

/// Soft floor and its derivative.
pub fn soft_floor(u: f64, knee: f64) -> (f64, f64) {
    if u >= knee {
        (u, 1.0)
    } else {
        let th = ((u - knee) / knee).tanh();
        (knee + knee * th, 1.0 - th * th)
    }
}

/// Loss of the weighted beamformer against `target` and its gradient with respect to `w`.
pub fn head_loss(t: &DelayedTensor, w: &ApodWeights, target: &TrainTarget, cfg: &HeadConfig) -> Result<HeadLoss> {
    cfg.validate()?;
    let y = apply_weights(t, w)?.values;
    if target.bmode.dim() != y.dim() {
        return Err(Error::shape("target image does not match the tensor grid"));
    }
    let g_y = match cfg.domain {
        LossDomain::Bmode => bmode_loss(&y, &target.bmode, cfg)?,
        LossDomain::Rf => {
            let rf = target.rf.as_ref().ok_or_else(|| Error::config("RF-domain loss needs an RF target"))?;
            if rf.values.dim() != y.dim() {
                return Err(Error::shape("RF target does not match the tensor grid"));
            }
            rf_loss(&y, &rf.values)
        }
    };
    let (loss, g_y) = g_y;
    let mut grad = t.data.clone();
    Zip::from(grad.lanes_mut(Axis(2))).and(&g_y).for_each(|mut lane, &g| lane.map_inplace(|v| *v *= g));
    Ok(HeadLoss { loss, grad })
}

fn bmode_loss(y: &Array2<f64>, target: &BModeImage, cfg: &HeadConfig) -> Result<(f64, Array2<f64>)> {
    let (m, n) = y.dim();
    let count = (m * n) as f64;
    let goal = target.normalized();
    let mut h = Array2::<f64>::zeros((m, n));
    for q in 0..n {
        let line = hilbert_line(&y.column(q).to_vec());
        h.column_mut(q).assign(&ndarray::Array1::from(line));
    }
    let power = Zip::from(y).and(&h).map_collect(|&a, &b| a * a + b * b);

    let mut pmax = 0.0;
    let mut arg = (0, 0);
    for ((p, q), &v) in power.indexed_iter() {
        if v > pmax {
            pmax = v;
            arg = (p, q);
        }
    }

    let a = 10.0 / (cfg.dynamic_range * LN_10);
    let mut loss = 0.0;
    let mut g_p = Array2::<f64>::zeros((m, n));
    let mut g_pmax = 0.0;
    for ((idx, &p), &goal_v) in power.indexed_iter().zip(goal.iter()) {
        let u = if pmax > 0.0 && p > 0.0 { 1.0 + a * (p / pmax).ln() } else { f64::NEG_INFINITY };
        let (value, slope) = if u.is_finite() { soft_floor(u, cfg.soft_knee) } else { (0.0, 0.0) };
        let diff = value - goal_v;
        loss += diff * diff;
        if slope == 0.0 {
            continue;
        }
        let g_u = 2.0 * diff / count * slope;
        g_p[idx] = g_u * a / p;
        g_pmax -= g_u * a / pmax;
    }
    loss /= count;
    if pmax > 0.0 {
        g_p[arg] += g_pmax;
    }

    // p = y^2 + (Hy)^2  =>  dL/dy = 2 y g_p + H^T (2 h g_p) = 2 y g_p - H (2 h g_p)
    let mut g_y = Array2::<f64>::zeros((m, n));
    for q in 0..n {
        let weighted: Vec<f64> = (0..m).map(|p| 2.0 * h[[p, q]] * g_p[[p, q]]).collect();
        let back = hilbert_line(&weighted);
        for p in 0..m {
            g_y[[p, q]] = 2.0 * y[[p, q]] * g_p[[p, q]] - back[p];
        }
    }
    Ok((loss, g_y))
}

fn rf_loss(y: &Array2<f64>, target: &Array2<f64>) -> (f64, Array2<f64>) {
    let count = y.len() as f64;
    let normalize = |a: &Array2<f64>| {
        let mut peak = 0.0;
        let mut arg = (0, 0);
        for (idx, &v) in a.indexed_iter() {
            if v.abs() > peak {
                peak = v.abs();
                arg = idx;
            }
        }
        (peak, arg)
    };
    let (ypk, yarg) = normalize(y);
    let (tpk, _) = normalize(target);
    let goal = if tpk > 0.0 { target / tpk } else { target.clone() };
    if ypk == 0.0 {
        let loss = goal.iter().map(|v| v * v).sum::<f64>() / count;
        return (loss, Array2::zeros(y.dim()));
    }
    let r = y / ypk;
    let diff = &r - &goal;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / count;
    let g_r = diff.mapv(|d| 2.0 * d / count);
    let g_peak: f64 = -g_r.iter().zip(y.iter()).map(|(g, v)| g * v).sum::<f64>() / (ypk * ypk);
    let mut g_y = g_r / ypk;
    g_y[yarg] += g_peak * y[yarg].signum();
    (loss, g_y)
}
