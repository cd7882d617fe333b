//! Central finite-difference checks of the hand-written backward passes (64-bit).
//!
//! Each check projects the layer output on a random tensor `r`, so the scalar
//! `L = sum(r * f(x))` has gradient `backward(r)`. A sample of input and parameter
//! coordinates is perturbed by `+-h` and the resulting slopes are compared with the
//! analytic gradient through `|a - n|_2 / max(|a|_2, |n|_2)`.
//!
//! A coordinate whose central differences at `h` and `h / 2` disagree sits within
//! `h` of a non-differentiable point (a ReLU or max-pool switch); it is skipped and
//! counted in [`GradReport::skipped`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::head::{head_loss, HeadConfig, LossDomain, TrainTarget};
use super::layers::{
    upsample2, upsample2_backward, AntiRectifier, BatchNorm2d, Conv2d, ConvBnAntirect, DoubleConv, Layer, MaxPool2,
    Mode, Param,
};
use super::tensor::Tensor4;
use super::unet::{tensor_from_delayed, tensor_from_weights, weights_from_tensor, UNet, UNetConfig};
use crate::beamform::{ApodWeights, BeamformedData, Method};
use crate::error::Result;
use crate::geometry::{DelayedTensor, ImageGrid};
use crate::phantom::ProbeConfig;

pub const STEP: f64 = 1e-5;
/// Input coordinates sampled per check.
const INPUT_SAMPLES: usize = 24;
/// Coordinates sampled per parameter tensor.
const PARAM_SAMPLES: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub rel_error: f64,
    pub coordinates: usize,
    pub skipped: usize,
}

/// A layer under test with an explicit forward/backward pair.
pub trait Checkable {
    fn fwd(&mut self, x: &Tensor4<f64>) -> Result<Tensor4<f64>>;
    fn bwd(&mut self, g: &Tensor4<f64>) -> Result<Tensor4<f64>>;
    fn visit(&mut self, _f: &mut dyn FnMut(&mut Param<f64>)) {}
}

impl Checkable for Conv2d<f64> {
    fn fwd(&mut self, x: &Tensor4<f64>) -> Result<Tensor4<f64>> {
        self.forward(x, Mode::Train)
    }
    fn bwd(&mut self, g: &Tensor4<f64>) -> Result<Tensor4<f64>> {
        self.backward(g)
    }
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        self.visit_params(f)
    }
}

impl Checkable for BatchNorm2d<f64> {
    fn fwd(&mut self, x: &Tensor4<f64>) -> Result<Tensor4<f64>> {
        self.forward(x, Mode::Train)
    }
    fn bwd(&mut self, g: &Tensor4<f64>) -> Result<Tensor4<f64>> {
        self.backward(g)
    }
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        self.visit_params(f)
    }
}

impl Checkable for AntiRectifier<f64> {
    fn fwd(&mut self, x: &Tensor4<f64>) -> Result<Tensor4<f64>> {
        Ok(self.forward(x, Mode::Train))
    }
    fn bwd(&mut self, g: &Tensor4<f64>) -> Result<Tensor4<f64>> {
        self.backward(g)
    }
}

impl Checkable for MaxPool2 {
    fn fwd(&mut self, x: &Tensor4<f64>) -> Result<Tensor4<f64>> {
        self.forward(x, Mode::Train)
    }
    fn bwd(&mut self, g: &Tensor4<f64>) -> Result<Tensor4<f64>> {
        self.backward(g)
    }
}

/// Nearest-neighbour 2x upsampling as a checkable unit.
pub struct Upsample2;

impl Checkable for Upsample2 {
    fn fwd(&mut self, x: &Tensor4<f64>) -> Result<Tensor4<f64>> {
        Ok(upsample2(x))
    }
    fn bwd(&mut self, g: &Tensor4<f64>) -> Result<Tensor4<f64>> {
        Ok(upsample2_backward(g))
    }
}

impl Checkable for ConvBnAntirect<f64> {
    fn fwd(&mut self, x: &Tensor4<f64>) -> Result<Tensor4<f64>> {
        self.forward(x, Mode::Train)
    }
    fn bwd(&mut self, g: &Tensor4<f64>) -> Result<Tensor4<f64>> {
        self.backward(g)
    }
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        self.visit_params(f)
    }
}

impl Checkable for DoubleConv<f64> {
    fn fwd(&mut self, x: &Tensor4<f64>) -> Result<Tensor4<f64>> {
        self.forward(x, Mode::Train)
    }
    fn bwd(&mut self, g: &Tensor4<f64>) -> Result<Tensor4<f64>> {
        self.backward(g)
    }
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        self.visit_params(f)
    }
}

impl Checkable for UNet<f64> {
    fn fwd(&mut self, x: &Tensor4<f64>) -> Result<Tensor4<f64>> {
        self.forward(x, Mode::Train)
    }
    fn bwd(&mut self, g: &Tensor4<f64>) -> Result<Tensor4<f64>> {
        self.backward(g)
    }
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        self.visit_params(f)
    }
}

pub fn random_tensor(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> Tensor4<f64> {
    Tensor4::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central difference of `eval` around `v`, or `None` near a kink.
fn slope(v: f64, mut eval: impl FnMut(f64) -> Result<f64>) -> Result<Option<f64>> {
    let central = |h: f64, eval: &mut dyn FnMut(f64) -> Result<f64>| -> Result<f64> {
        Ok((eval(v + h)? - eval(v - h)?) / (2.0 * h))
    };
    let coarse = central(STEP, &mut eval)?;
    let fine = central(0.5 * STEP, &mut eval)?;
    let center = eval(v)?;
    // rounding noise of the finer difference
    let noise = 64.0 * f64::EPSILON * (center.abs() + 1.0) / (0.5 * STEP);
    let scale = coarse.abs().max(fine.abs());
    Ok(((coarse - fine).abs() <= 1e-5 * scale + noise).then_some(coarse))
}

/// Collects analytic/numeric pairs and skip counts.
#[derive(Default)]
struct Pairs {
    analytic: Vec<f64>,
    numeric: Vec<f64>,
    skipped: usize,
}

impl Pairs {
    fn push(&mut self, analytic: f64, numeric: Option<f64>) {
        match numeric {
            Some(n) => {
                self.analytic.push(analytic);
                self.numeric.push(n);
            }
            None => self.skipped += 1,
        }
    }

    fn report(self, name: &str) -> GradReport {
        GradReport {
            name: name.to_string(),
            rel_error: relative_error(&self.analytic, &self.numeric),
            coordinates: self.analytic.len(),
            skipped: self.skipped,
        }
    }
}

fn dot(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

/// Gets or sets coordinate `i` of the `k`-th visited parameter.
fn param_at<L: Checkable + ?Sized>(layer: &mut L, k: usize, i: usize, set: Option<f64>) -> f64 {
    let mut slot = 0;
    let mut out = 0.0;
    layer.visit(&mut |p| {
        if slot == k {
            if let Some(v) = set {
                p.value[i] = v;
            }
            out = p.value[i];
        }
        slot += 1;
    });
    out
}

/// Finite-difference check of `layer` at input `x`.
pub fn check_layer<L: Checkable + ?Sized>(name: &str, layer: &mut L, x: &Tensor4<f64>, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = layer.fwd(x)?;
    let r = random_tensor(&mut rng, y.channels, y.height, y.width);
    layer.visit(&mut |p| p.zero_grad());
    let gx = layer.bwd(&r)?;

    let mut pairs = Pairs::default();
    let mut probe = x.clone();
    for _ in 0..INPUT_SAMPLES.min(x.data.len()) {
        let i = rng.random_range(0..x.data.len());
        let n = slope(x.data[i], |v| {
            probe.data[i] = v;
            Ok(dot(&r, &layer.fwd(&probe)?))
        })?;
        pairs.push(gx.data[i], n);
    }

    let mut grads: Vec<Vec<f64>> = Vec::new();
    layer.visit(&mut |p| grads.push(p.grad.clone()));
    for (k, g) in grads.iter().enumerate() {
        for _ in 0..PARAM_SAMPLES.min(g.len()) {
            let i = rng.random_range(0..g.len());
            let v = param_at(layer, k, i, None);
            let n = slope(v, |u| {
                param_at(layer, k, i, Some(u));
                Ok(dot(&r, &layer.fwd(x)?))
            })?;
            pairs.push(g[i], n);
        }
    }
    Ok(pairs.report(name))
}

/// Small delayed tensor of random samples for head checks.
pub fn random_delayed(rng: &mut impl Rng, m: usize, n: usize, channels: usize) -> DelayedTensor {
    let probe = ProbeConfig::with_channels(channels);
    let grid = ImageGrid::aligned(&probe, m, n, 0.016).expect("valid small grid");
    let data = ndarray::Array3::from_shape_simple_fn((m, n, channels), || rng.random_range(-1.0..1.0));
    DelayedTensor::new(data, grid).expect("shape matches grid")
}

/// Head + MSE gradient with respect to the apodization weights.
pub fn check_head(domain: LossDomain, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n, c) = (16, 8, 8);
    let t = random_delayed(&mut rng, m, n, c);
    let w = ndarray::Array3::from_shape_simple_fn((m, n, c), || rng.random_range(-1.0..1.0));
    let other = ndarray::Array2::from_shape_simple_fn((m, n), || rng.random_range(-1.0..1.0));
    let target = TrainTarget::from_beamformed(&BeamformedData { values: other, method: Method::Das }, 60.0)?;
    // a narrow range puts part of the image on the soft floor
    let cfg = HeadConfig { dynamic_range: 20.0, domain, ..HeadConfig::default() };
    let analytic_full = head_loss(&t, &ApodWeights { weights: w.clone() }, &target, &cfg)?.grad;

    let mut pairs = Pairs::default();
    let mut probe = w.clone();
    for _ in 0..48 {
        let idx = (rng.random_range(0..m), rng.random_range(0..n), rng.random_range(0..c));
        let num = slope(w[idx], |v| {
            probe[idx] = v;
            Ok(head_loss(&t, &ApodWeights { weights: probe.clone() }, &target, &cfg)?.loss)
        })?;
        pairs.push(analytic_full[idx], num);
    }
    Ok(pairs.report(match domain {
        LossDomain::Bmode => "head+mse (b-mode)",
        LossDomain::Rf => "head+mse (rf)",
    }))
}

/// Loss gradient with respect to U-Net parameters through the full network, head and MSE.
pub fn check_pipeline(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n, c) = (16, 16, 4);
    let t = random_delayed(&mut rng, m, n, c);
    let other = ndarray::Array2::from_shape_simple_fn((m, n), || rng.random_range(-1.0..1.0));
    let target = TrainTarget::from_beamformed(&BeamformedData { values: other, method: Method::Das }, 60.0)?;
    let cfg = HeadConfig::default();
    let mut net = UNet::<f64>::new(UNetConfig { in_channels: c, stem_channels: 4, out_channels: c, seed })?;
    let x = tensor_from_delayed::<f64>(&t);

    let loss = |net: &mut UNet<f64>| -> Result<f64> {
        let w = weights_from_tensor(&net.forward(&x, Mode::Train)?);
        Ok(head_loss(&t, &w, &target, &cfg)?.loss)
    };
    let w = weights_from_tensor(&net.forward(&x, Mode::Train)?);
    let head = head_loss(&t, &w, &target, &cfg)?;
    net.zero_grad();
    net.backward(&tensor_from_weights::<f64>(&head.grad))?;

    let mut grads: Vec<Vec<f64>> = Vec::new();
    net.visit_params(&mut |p| grads.push(p.grad.clone()));
    let mut pairs = Pairs::default();
    for (k, g) in grads.iter().enumerate() {
        for _ in 0..2.min(g.len()) {
            let i = rng.random_range(0..g.len());
            let v = param_at(&mut net, k, i, None);
            let n = slope(v, |u| {
                param_at(&mut net, k, i, Some(u));
                loss(&mut net)
            })?;
            pairs.push(g[i], n);
        }
    }
    Ok(pairs.report("u-net+head+mse"))
}

/// Every layer type plus the head and the end-to-end pipeline, on tensors of at most 8 x 16 x 16.
pub fn check_all(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let x = random_tensor(&mut rng, 4, 16, 16);
    out.push(check_layer("conv3x3", &mut Conv2d::new("c", 4, 6, 3, &mut rng), &x, seed)?);
    out.push(check_layer("conv1x1", &mut Conv2d::new("c", 4, 6, 1, &mut rng), &x, seed)?);
    let mut bn = BatchNorm2d::new("bn", 4);
    bn.gamma.value = (0..4).map(|_| rng.random_range(0.5..1.5)).collect();
    bn.beta.value = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
    out.push(check_layer("batchnorm", &mut bn, &x, seed)?);
    out.push(check_layer("anti-rectifier", &mut AntiRectifier::new(), &x, seed)?);
    out.push(check_layer("maxpool2", &mut MaxPool2::new(), &x, seed)?);
    out.push(check_layer("upsample2", &mut Upsample2, &random_tensor(&mut rng, 4, 8, 8), seed)?);
    out.push(check_layer("conv+bn+anti-rectifier", &mut ConvBnAntirect::new("b", 4, 3, &mut rng), &x, seed)?);
    out.push(check_layer("double-conv", &mut DoubleConv::new("d", 4, 8, &mut rng), &x, seed)?);
    let mut net = UNet::new(UNetConfig { in_channels: 4, stem_channels: 4, out_channels: 4, seed })?;
    out.push(check_layer("u-net", &mut net, &random_tensor(&mut rng, 4, 16, 16), seed)?);
    out.push(check_head(LossDomain::Bmode, seed)?);
    out.push(check_head(LossDomain::Rf, seed)?);
    out.push(check_pipeline(seed)?);
    Ok(out)
}
