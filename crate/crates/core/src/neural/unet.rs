use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{upsample2, upsample2_backward, Buffer, Conv2d, DoubleConv, Layer, MaxPool2, Mode, Param};
use super::tensor::{Real, Tensor4};
use crate::beamform::ApodWeights;
use crate::checksum::sha256_hex;
use crate::error::{Error, Result};
use crate::geometry::DelayedTensor;

/// Number of pooling levels.
pub const DEPTH_LEVELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Channel width after the stem block (post-activation, so the stem convs emit half).
    pub stem_channels: usize,
    pub out_channels: usize,
    pub seed: u64,
}

impl UNetConfig {
    /// 16-channel probe, 16-wide stem.
    pub fn desk() -> Self {
        Self::for_channels(16, 16)
    }

    /// 128-channel probe, 64-wide stem.
    pub fn full_scale() -> Self {
        Self::for_channels(128, 64)
    }

    pub fn for_channels(channels: usize, stem_channels: usize) -> Self {
        UNetConfig { in_channels: channels, stem_channels, out_channels: channels, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("U-Net channel counts must be positive"));
        }
        if self.stem_channels < 2 || !self.stem_channels.is_multiple_of(2) {
            return Err(Error::config(format!(
                "stem width {} must be even and at least 2",
                self.stem_channels
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Input height and width must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << DEPTH_LEVELS
    }
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone)]
struct UpLevel<T> {
    reduce: Conv2d<T>,
    block: DoubleConv<T>,
    /// Channels of the upsampled path after `reduce` (used to split the concat gradient).
    skip_channels: usize,
}

/// Encoder/decoder with skip connections mapping a delayed tensor to per-channel weights.
#[derive(Debug, Clone)]
pub struct UNet<T> {
    pub config: UNetConfig,
    stem: DoubleConv<T>,
    down: Vec<(MaxPool2, DoubleConv<T>)>,
    up: Vec<UpLevel<T>>,
    head: Conv2d<T>,
}

impl<T: Real> UNet<T> {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let s = config.stem_channels;
        let stem = DoubleConv::new("stem", config.in_channels, s, &mut rng);
        let mut down = Vec::with_capacity(DEPTH_LEVELS);
        let mut width = s;
        for level in 0..DEPTH_LEVELS {
            down.push((MaxPool2::new(), DoubleConv::new(&format!("down{level}"), width, 2 * width, &mut rng)));
            width *= 2;
        }
        let mut up = Vec::with_capacity(DEPTH_LEVELS);
        for level in 0..DEPTH_LEVELS {
            let half = width / 2;
            up.push(UpLevel {
                reduce: Conv2d::new(&format!("up{level}.reduce"), width, half, 1, &mut rng),
                block: DoubleConv::new(&format!("up{level}.block"), width, half, &mut rng),
                skip_channels: half,
            });
            width = half;
        }
        let head = Conv2d::new("head", s, config.out_channels, 1, &mut rng);
        Ok(UNet { config, stem, down, up, head })
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        let k = self.config.spatial_multiple();
        if !x.height.is_multiple_of(k) || !x.width.is_multiple_of(k) {
            return Err(Error::config(format!(
                "U-Net input {} x {} is not divisible by {k}",
                x.height, x.width
            )));
        }
        if x.channels != self.config.in_channels {
            return Err(Error::shape(format!(
                "U-Net expects {} channels, got {}",
                self.config.in_channels, x.channels
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(DEPTH_LEVELS);
        let mut h = self.stem.forward(x, mode)?;
        for (pool, block) in &mut self.down {
            let pooled = pool.forward(&h, mode)?;
            skips.push(h);
            h = block.forward(&pooled, mode)?;
        }
        for level in &mut self.up {
            let skip = skips.pop().expect("one skip per level");
            let reduced = level.reduce.forward(&upsample2(&h), mode)?;
            h = level.block.forward(&skip.concat(&reduced)?, mode)?;
        }
        self.head.forward(&h, mode)
    }

    /// Backward of the last `Mode::Train` forward; accumulates parameter gradients.
    pub fn backward(&mut self, gy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut g = self.head.backward(gy)?;
        let mut skip_grads = Vec::with_capacity(DEPTH_LEVELS);
        for level in self.up.iter_mut().rev() {
            let gcat = level.block.backward(&g)?;
            let (gskip, greduced) = gcat.split(level.skip_channels);
            skip_grads.push(gskip);
            g = upsample2_backward(&level.reduce.backward(&greduced)?);
        }
        for (pool, block) in self.down.iter_mut().rev() {
            let gpooled = block.backward(&g)?;
            g = pool.backward(&gpooled)?;
            g.add_assign(&skip_grads.pop().expect("one skip per level"));
        }
        self.stem.backward(&g)
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    pub fn num_parameters(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.len());
        n
    }

    /// Copies of all parameter values in visiting order.
    pub fn param_values(&mut self) -> Vec<Vec<T>> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push(p.value.clone()));
        out
    }

    /// Predicts apodization weights for `t` (input is RMS-normalized first).
    pub fn predict(&mut self, t: &DelayedTensor, mode: Mode) -> Result<ApodWeights> {
        let x = tensor_from_delayed::<T>(t);
        let y = self.forward(&x, mode)?;
        Ok(weights_from_tensor(&y))
    }
}

impl<T: Real> Layer<T> for UNet<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.stem.visit_params(f);
        for (_, block) in &mut self.down {
            block.visit_params(f);
        }
        for level in &mut self.up {
            level.reduce.visit_params(f);
            level.block.visit_params(f);
        }
        self.head.visit_params(f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Buffer<T>)) {
        self.stem.visit_buffers(f);
        for (_, block) in &mut self.down {
            block.visit_buffers(f);
        }
        for level in &mut self.up {
            level.block.visit_buffers(f);
        }
    }
}

/// Channels-first copy of `t`, scaled to unit RMS (left as is when all zero).
pub fn tensor_from_delayed<T: Real>(t: &DelayedTensor) -> Tensor4<T> {
    let (m, n, c) = t.shape();
    let energy: f64 = t.data.iter().map(|v| v * v).sum();
    let rms = (energy / t.data.len().max(1) as f64).sqrt();
    let scale = if rms > 0.0 { 1.0 / rms } else { 1.0 };
    Tensor4::from_fn(c, m, n, |ch, p, q| T::lit(t.data[[p, q, ch]] * scale))
}

/// Reorders a `[channels, depth, lateral]` tensor into depth x lateral x channel weights.
pub fn weights_from_tensor<T: Real>(y: &Tensor4<T>) -> ApodWeights {
    let weights = ndarray::Array3::from_shape_fn((y.height, y.width, y.channels), |(p, q, c)| y.at(c, p, q).as_f64());
    ApodWeights { weights }
}

/// Inverse of [`weights_from_tensor`].
pub fn tensor_from_weights<T: Real>(w: &ndarray::Array3<f64>) -> Tensor4<T> {
    let (m, n, c) = w.dim();
    Tensor4::from_fn(c, m, n, |ch, p, q| T::lit(w[[p, q, ch]]))
}
