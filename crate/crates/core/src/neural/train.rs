use serde::{Deserialize, Serialize};

use super::head::{apply_weights, head_loss, HeadConfig, TrainTarget};
use super::layers::{Layer, Mode, Param};
use super::tensor::Real;
use super::unet::{tensor_from_delayed, tensor_from_weights, weights_from_tensor, UNet, UNetConfig};
use crate::beamform::{ApodWeights, BeamformedData};
use crate::error::{Error, Result};
use crate::geometry::DelayedTensor;
use crate::postprocess::{bmode, BModeImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub head: HeadConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, head: HeadConfig::default() }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("adam eps must be positive"));
        }
        self.head.validate()
    }
}

/// Adam moment estimates, one slot per parameter in visiting order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: &TrainConfig, net: &mut impl Layer<T>) -> Self {
        let mut m = Vec::new();
        net.visit_params(&mut |p| m.push(vec![T::zero(); p.value.len()]));
        let v = m.clone();
        Adam { learning_rate: cfg.learning_rate, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, step: 0, m, v }
    }

    /// One bias-corrected update of every parameter from its accumulated gradient.
    pub fn update(&mut self, net: &mut impl Layer<T>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let lr = T::lit(self.learning_rate);
        let eps = T::lit(self.eps);
        let mut slot = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        net.visit_params(&mut |p: &mut Param<T>| {
            let (m, v) = (&mut ms[slot], &mut vs[slot]);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p.value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            slot += 1;
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub loss: f64,
    pub step: u64,
    pub grad_norm: f64,
}

/// Network, optimizer state and loss configuration.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub net: UNet<T>,
    pub adam: Adam<T>,
    pub train: TrainConfig,
}

impl<T: Real> Model<T> {
    pub fn new(unet: UNetConfig, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        let mut net = UNet::new(unet)?;
        let adam = Adam::new(&train, &mut net);
        Ok(Model { net, adam, train })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.net.config
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    /// Predicted apodization weights.
    pub fn predict_weights(&mut self, t: &DelayedTensor, mode: Mode) -> Result<ApodWeights> {
        self.net.predict(t, mode)
    }

    /// Evaluation-mode beamformed data of the model.
    pub fn beamform(&mut self, t: &DelayedTensor) -> Result<BeamformedData> {
        let w = self.predict_weights(t, Mode::Eval)?;
        apply_weights(t, &w)
    }

    /// Evaluation-mode B-mode image (hard clamp), as shown to the user.
    pub fn bmode(&mut self, t: &DelayedTensor) -> Result<BModeImage> {
        bmode(&self.beamform(t)?, self.train.head.dynamic_range)
    }

    /// Training loss of the current parameters without updating anything.
    pub fn evaluate_loss(&mut self, t: &DelayedTensor, target: &TrainTarget, mode: Mode) -> Result<f64> {
        let buffers = self.snapshot_buffers();
        let w = self.predict_weights(t, mode)?;
        self.restore_buffers(buffers);
        Ok(head_loss(t, &w, target, &self.train.head)?.loss)
    }

    /// Forward, backward and one Adam update. On a non-finite loss or gradient the
    /// parameters, optimizer state and running statistics are left untouched.
    pub fn train_step(&mut self, t: &DelayedTensor, target: &TrainTarget) -> Result<StepReport> {
        let buffers = self.snapshot_buffers();
        let x = tensor_from_delayed::<T>(t);
        let y = self.net.forward(&x, Mode::Train)?;
        let w = weights_from_tensor(&y);
        let head = head_loss(t, &w, target, &self.train.head)?;
        let grad_norm = head.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !head.loss.is_finite() || !grad_norm.is_finite() {
            self.restore_buffers(buffers);
            return Err(Error::NonFiniteLoss(if head.loss.is_finite() { grad_norm } else { head.loss }));
        }
        self.net.zero_grad();
        self.net.backward(&tensor_from_weights::<T>(&head.grad))?;
        let mut finite = true;
        self.net.visit_params(&mut |p| finite &= p.grad.iter().all(|g| g.is_finite()));
        if !finite {
            self.restore_buffers(buffers);
            self.net.zero_grad();
            return Err(Error::NonFiniteLoss(f64::NAN));
        }
        self.adam.update(&mut self.net);
        Ok(StepReport { loss: head.loss, step: self.adam.step, grad_norm })
    }

    fn snapshot_buffers(&mut self) -> Vec<Vec<T>> {
        let mut out = Vec::new();
        self.net.visit_buffers(&mut |b| out.push(b.value.clone()));
        out
    }

    fn restore_buffers(&mut self, saved: Vec<Vec<T>>) {
        let mut it = saved.into_iter();
        self.net.visit_buffers(&mut |b| b.value = it.next().expect("same buffer count"));
    }
}
