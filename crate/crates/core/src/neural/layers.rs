//! Layers with hand-written backward passes.
//!
//! Every layer caches what its backward pass needs during a `Mode::Train`
//! forward. `backward` accumulates parameter gradients and returns the gradient
//! with respect to the layer input. Work is split across output (or input)
//! channels only, and each channel is reduced in a fixed order, so results do
//! not depend on the thread count.

use rand::Rng;
use rayon::prelude::*;

use super::tensor::{Real, Tensor4};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(name: String, shape: Vec<usize>, value: Vec<T>) -> Self {
        let grad = vec![T::zero(); value.len()];
        Param { name, shape, value, grad }
    }

    pub fn zeros(name: String, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self::new(name, shape, vec![T::zero(); len])
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Non-trainable state that still belongs in a checkpoint (batch-norm running stats).
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Vec<T>,
}

/// Visitor over parameters and buffers in a fixed, deterministic order.
pub trait Layer<T: Real> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>));
    fn visit_buffers(&mut self, _f: &mut dyn FnMut(&mut Buffer<T>)) {}
}

/// Same-padded 2-D convolution with odd square kernel.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `[out][in][ky][kx]`.
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor4<T>>,
}

impl<T: Real> Conv2d<T> {
    /// He-uniform kernels, zero bias.
    pub fn new(name: &str, in_channels: usize, out_channels: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let len = out_channels * in_channels * kernel * kernel;
        let weight: Vec<T> = (0..len).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            weight: Param::new(format!("{name}.weight"), vec![out_channels, in_channels, kernel, kernel], weight),
            bias: Param::zeros(format!("{name}.bias"), vec![out_channels]),
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        if x.channels != self.in_channels {
            return Err(Error::shape(format!(
                "{}: expected {} input channels, got {}",
                self.weight.name, self.in_channels, x.channels
            )));
        }
        let (h, w) = (x.height, x.width);
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let taps = self.in_channels * k * k;
        let mut out = Tensor4::zeros(self.out_channels, h, w);
        let weight = &self.weight.value;
        let bias = &self.bias.value;
        out.data.par_chunks_mut(h * w).enumerate().for_each(|(o, plane)| {
            plane.iter_mut().for_each(|v| *v = bias[o]);
            for c in 0..self.in_channels {
                let src = x.plane(c);
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = weight[o * taps + (c * k + ky) * k + kx];
                        let dy = ky as isize - pad;
                        let dx = kx as isize - pad;
                        shifted_axpy(plane, src, wv, dy, dx, h, w);
                    }
                }
            }
        });
        if mode == Mode::Train {
            self.input = Some(x.clone());
        }
        Ok(out)
    }

    pub fn backward(&mut self, gy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let x = self.input.take().ok_or_else(|| Error::Contract("conv backward without train forward".into()))?;
        gy.check_shape(self.out_channels, x.height, x.width, &self.weight.name)?;
        let (h, w) = (x.height, x.width);
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let taps = self.in_channels * k * k;

        for o in 0..self.out_channels {
            let mut acc = T::zero();
            for &g in gy.plane(o) {
                acc += g;
            }
            self.bias.grad[o] += acc;
        }

        self.weight.grad.par_chunks_mut(taps).enumerate().for_each(|(o, gw)| {
            let g = gy.plane(o);
            for c in 0..self.in_channels {
                let src = x.plane(c);
                for ky in 0..k {
                    for kx in 0..k {
                        let dy = ky as isize - pad;
                        let dx = kx as isize - pad;
                        gw[(c * k + ky) * k + kx] += shifted_dot(g, src, dy, dx, h, w);
                    }
                }
            }
        });

        let weight = &self.weight.value;
        let mut gx = Tensor4::zeros(self.in_channels, h, w);
        gx.data.par_chunks_mut(h * w).enumerate().for_each(|(c, plane)| {
            for o in 0..self.out_channels {
                let g = gy.plane(o);
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = weight[o * taps + (c * k + ky) * k + kx];
                        let dy = pad - ky as isize;
                        let dx = pad - kx as isize;
                        shifted_axpy(plane, g, wv, dy, dx, h, w);
                    }
                }
            }
        });
        Ok(gx)
    }
}

impl<T: Real> Layer<T> for Conv2d<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// `dst[y][x] += a * src[y + dy][x + dx]` wherever the source index is inside the plane.
#[inline]
fn shifted_axpy<T: Real>(dst: &mut [T], src: &[T], a: T, dy: isize, dx: isize, h: usize, w: usize) {
    let (x_lo, x_hi) = valid_range(dx, w);
    if x_lo >= x_hi {
        return;
    }
    let (y_lo, y_hi) = valid_range(dy, h);
    for y in y_lo..y_hi {
        let sy = (y as isize + dy) as usize;
        let d = &mut dst[y * w + x_lo..y * w + x_hi];
        let s_start = (sy * w) as isize + x_lo as isize + dx;
        let s = &src[s_start as usize..s_start as usize + (x_hi - x_lo)];
        for (dv, &sv) in d.iter_mut().zip(s) {
            *dv += a * sv;
        }
    }
}

/// `sum_{y,x} g[y][x] * src[y + dy][x + dx]` over valid source indices.
#[inline]
fn shifted_dot<T: Real>(g: &[T], src: &[T], dy: isize, dx: isize, h: usize, w: usize) -> T {
    let (x_lo, x_hi) = valid_range(dx, w);
    let (y_lo, y_hi) = valid_range(dy, h);
    let mut acc = T::zero();
    if x_lo >= x_hi {
        return acc;
    }
    for y in y_lo..y_hi {
        let sy = (y as isize + dy) as usize;
        let gr = &g[y * w + x_lo..y * w + x_hi];
        let s_start = ((sy * w) as isize + x_lo as isize + dx) as usize;
        let s = &src[s_start..s_start + (x_hi - x_lo)];
        for (&gv, &sv) in gr.iter().zip(s) {
            acc += gv * sv;
        }
    }
    acc
}

/// Output indices `i` for which `i + shift` is inside `0..len`.
#[inline]
fn valid_range(shift: isize, len: usize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift.max(0)).max(0) as usize;
    (lo.min(len), hi)
}

/// Per-channel batch normalization over the spatial positions of the single sample.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Buffer<T>,
    pub running_var: Buffer<T>,
    /// Fraction of the old running statistic kept at each update.
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
enum BnCache<T> {
    Train { x_hat: Tensor4<T>, inv_std: Vec<T> },
    Eval,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            channels,
            gamma: Param::new(format!("{name}.gamma"), vec![channels], vec![T::one(); channels]),
            beta: Param::zeros(format!("{name}.beta"), vec![channels]),
            running_mean: Buffer { name: format!("{name}.running_mean"), value: vec![T::zero(); channels] },
            running_var: Buffer { name: format!("{name}.running_var"), value: vec![T::one(); channels] },
            momentum: 0.9,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        if x.channels != self.channels {
            return Err(Error::shape(format!("{}: channel mismatch", self.gamma.name)));
        }
        let n = x.plane_len();
        let eps = T::lit(self.eps);
        let mut out = Tensor4::zeros(x.channels, x.height, x.width);
        match mode {
            Mode::Train => {
                let mut x_hat = Tensor4::zeros(x.channels, x.height, x.width);
                let mut inv_std = vec![T::zero(); self.channels];
                let keep = T::lit(self.momentum);
                let fresh = T::one() - keep;
                let nt = T::lit(n as f64);
                for c in 0..self.channels {
                    let src = x.plane(c);
                    let mean = src.iter().copied().sum::<T>() / nt;
                    let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
                    let istd = T::one() / (var + eps).sqrt();
                    inv_std[c] = istd;
                    let (g, b) = (self.gamma.value[c], self.beta.value[c]);
                    for ((o, xh), &v) in out.plane_mut(c).iter_mut().zip(x_hat.plane_mut(c)).zip(src) {
                        *xh = (v - mean) * istd;
                        *o = g * *xh + b;
                    }
                    let unbiased = if n > 1 { var * nt / T::lit((n - 1) as f64) } else { var };
                    self.running_mean.value[c] = keep * self.running_mean.value[c] + fresh * mean;
                    self.running_var.value[c] = keep * self.running_var.value[c] + fresh * unbiased;
                }
                self.cache = Some(BnCache::Train { x_hat, inv_std });
            }
            Mode::Eval => {
                for c in 0..self.channels {
                    let istd = T::one() / (self.running_var.value[c] + eps).sqrt();
                    let mean = self.running_mean.value[c];
                    let (g, b) = (self.gamma.value[c], self.beta.value[c]);
                    for (o, &v) in out.plane_mut(c).iter_mut().zip(x.plane(c)) {
                        *o = g * (v - mean) * istd + b;
                    }
                }
                self.cache = Some(BnCache::Eval);
            }
        }
        Ok(out)
    }

    /// Backward of the last forward. After an eval forward the running statistics are
    /// constants, so only the affine part contributes.
    pub fn backward(&mut self, gy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let cache = self.cache.take().ok_or_else(|| Error::Contract("batch-norm backward without forward".into()))?;
        let n = gy.plane_len();
        let nt = T::lit(n as f64);
        let mut gx = Tensor4::zeros(gy.channels, gy.height, gy.width);
        match cache {
            BnCache::Train { x_hat, inv_std } => {
                for c in 0..self.channels {
                    let g = gy.plane(c);
                    let xh = x_hat.plane(c);
                    let sum_g = g.iter().copied().sum::<T>();
                    let sum_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
                    self.gamma.grad[c] += sum_gx;
                    self.beta.grad[c] += sum_g;
                    let scale = self.gamma.value[c] * inv_std[c] / nt;
                    for ((o, &gv), &xv) in gx.plane_mut(c).iter_mut().zip(g).zip(xh) {
                        *o = scale * (nt * gv - sum_g - xv * sum_gx);
                    }
                }
            }
            BnCache::Eval => {
                // x_hat is recomputable from gamma/beta only with the input; eval
                // backward is only used for input gradients.
                for c in 0..self.channels {
                    let istd = T::one() / (self.running_var.value[c] + T::lit(self.eps)).sqrt();
                    let scale = self.gamma.value[c] * istd;
                    for (o, &gv) in gx.plane_mut(c).iter_mut().zip(gy.plane(c)) {
                        *o = scale * gv;
                    }
                }
            }
        }
        Ok(gx)
    }
}

impl<T: Real> Layer<T> for BatchNorm2d<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Buffer<T>)) {
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

/// Subtracts the cross-channel mean at every position, then emits
/// `[relu(x_hat), relu(-x_hat)]`, doubling the channel count.
#[derive(Debug, Clone, Default)]
pub struct AntiRectifier<T> {
    centered: Option<Tensor4<T>>,
}

impl<T: Real> AntiRectifier<T> {
    pub fn new() -> Self {
        AntiRectifier { centered: None }
    }

    pub fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Tensor4<T> {
        let centered = center_channels(x);
        let c = x.channels;
        let mut out = Tensor4::zeros(2 * c, x.height, x.width);
        let n = x.plane_len();
        let (pos, neg) = out.data.split_at_mut(c * n);
        for ((p, q), &v) in pos.iter_mut().zip(neg.iter_mut()).zip(&centered.data) {
            *p = v.max(T::zero());
            *q = (-v).max(T::zero());
        }
        if mode == Mode::Train {
            self.centered = Some(centered);
        }
        out
    }

    pub fn backward(&mut self, gy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let centered = self
            .centered
            .take()
            .ok_or_else(|| Error::Contract("anti-rectifier backward without train forward".into()))?;
        let c = centered.channels;
        gy.check_shape(2 * c, centered.height, centered.width, "anti-rectifier gradient")?;
        let n = centered.plane_len();
        let (gpos, gneg) = gy.data.split_at(c * n);
        let mut g_hat = Tensor4::zeros(c, centered.height, centered.width);
        for (((g, &v), &a), &b) in g_hat.data.iter_mut().zip(&centered.data).zip(gpos).zip(gneg) {
            *g = if v > T::zero() {
                a
            } else if v < T::zero() {
                -b
            } else {
                T::zero()
            };
        }
        Ok(center_channels(&g_hat))
    }
}

/// `x - mean_c(x)` at each spatial position. Self-adjoint, so also used for the backward pass.
fn center_channels<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let n = x.plane_len();
    let mut mean = vec![T::zero(); n];
    for c in 0..x.channels {
        for (m, &v) in mean.iter_mut().zip(x.plane(c)) {
            *m += v;
        }
    }
    let inv = T::one() / T::lit(x.channels as f64);
    mean.iter_mut().for_each(|m| *m *= inv);
    let mut out = x.clone();
    for c in 0..x.channels {
        for (o, &m) in out.plane_mut(c).iter_mut().zip(&mean) {
            *o -= m;
        }
    }
    out
}

/// 2x2 max pooling with stride 2.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    argmax: Option<(Vec<usize>, [usize; 3])>,
}

impl MaxPool2 {
    pub fn new() -> Self {
        MaxPool2 { argmax: None }
    }

    pub fn forward<T: Real>(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        if !x.height.is_multiple_of(2) || !x.width.is_multiple_of(2) {
            return Err(Error::shape(format!("cannot pool odd size {} x {}", x.height, x.width)));
        }
        let (h2, w2) = (x.height / 2, x.width / 2);
        let mut out = Tensor4::zeros(x.channels, h2, w2);
        let mut arg = vec![0usize; x.channels * h2 * w2];
        for c in 0..x.channels {
            for y in 0..h2 {
                for xx in 0..w2 {
                    let mut best_idx = (c * x.height + 2 * y) * x.width + 2 * xx;
                    let mut best = x.data[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (c * x.height + 2 * y + dy) * x.width + 2 * xx + dx;
                        if x.data[idx] > best {
                            best = x.data[idx];
                            best_idx = idx;
                        }
                    }
                    let o = (c * h2 + y) * w2 + xx;
                    out.data[o] = best;
                    arg[o] = best_idx;
                }
            }
        }
        if mode == Mode::Train {
            self.argmax = Some((arg, [x.channels, x.height, x.width]));
        }
        Ok(out)
    }

    pub fn backward<T: Real>(&mut self, gy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (arg, [c, h, w]) =
            self.argmax.take().ok_or_else(|| Error::Contract("pool backward without train forward".into()))?;
        let mut gx = Tensor4::zeros(c, h, w);
        for (&idx, &g) in arg.iter().zip(&gy.data) {
            gx.data[idx] += g;
        }
        Ok(gx)
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let (h, w) = (x.height * 2, x.width * 2);
    let mut out = Tensor4::zeros(x.channels, h, w);
    for c in 0..x.channels {
        let src = x.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * x.width + xx / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2x2 block.
pub fn upsample2_backward<T: Real>(gy: &Tensor4<T>) -> Tensor4<T> {
    let (h, w) = (gy.height / 2, gy.width / 2);
    let mut gx = Tensor4::zeros(gy.channels, h, w);
    for c in 0..gy.channels {
        let src = gy.plane(c);
        let dst = gx.plane_mut(c);
        for y in 0..gy.height {
            for xx in 0..gy.width {
                dst[(y / 2) * w + xx / 2] += src[y * gy.width + xx];
            }
        }
    }
    gx
}

/// Convolution, batch norm and anti-rectifier. Emits `2 * filters` channels.
#[derive(Debug, Clone)]
pub struct ConvBnAntirect<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    pub act: AntiRectifier<T>,
}

impl<T: Real> ConvBnAntirect<T> {
    pub fn new(name: &str, in_channels: usize, filters: usize, rng: &mut impl Rng) -> Self {
        ConvBnAntirect {
            conv: Conv2d::new(&format!("{name}.conv"), in_channels, filters, 3, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), filters),
            act: AntiRectifier::new(),
        }
    }

    pub fn out_channels(&self) -> usize {
        2 * self.conv.out_channels
    }

    pub fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let y = self.conv.forward(x, mode)?;
        let y = self.bn.forward(&y, mode)?;
        Ok(self.act.forward(&y, mode))
    }

    pub fn backward(&mut self, gy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let g = self.act.backward(gy)?;
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g)
    }
}

impl<T: Real> Layer<T> for ConvBnAntirect<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_params(f);
        self.bn.visit_params(f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Buffer<T>)) {
        self.bn.visit_buffers(f);
    }
}

/// Two [`ConvBnAntirect`] blocks; maps `in_channels` to `out_channels` (even).
#[derive(Debug, Clone)]
pub struct DoubleConv<T> {
    pub first: ConvBnAntirect<T>,
    pub second: ConvBnAntirect<T>,
}

impl<T: Real> DoubleConv<T> {
    pub fn new(name: &str, in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        let filters = out_channels / 2;
        DoubleConv {
            first: ConvBnAntirect::new(&format!("{name}.0"), in_channels, filters, rng),
            second: ConvBnAntirect::new(&format!("{name}.1"), out_channels, filters, rng),
        }
    }

    pub fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let y = self.first.forward(x, mode)?;
        self.second.forward(&y, mode)
    }

    pub fn backward(&mut self, gy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let g = self.second.backward(gy)?;
        self.first.backward(&g)
    }
}

impl<T: Real> Layer<T> for DoubleConv<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.first.visit_params(f);
        self.second.visit_params(f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Buffer<T>)) {
        self.first.visit_buffers(f);
        self.second.visit_buffers(f);
    }
}
