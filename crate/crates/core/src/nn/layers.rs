//! Layers with explicit forward caches and hand-written backward passes.
//!
//! A forward call returns the output together with a [`Cache`]; backward
//! consumes that cache, so the same layer can be evaluated several times
//! (e.g. the discriminator on real and on reconstructed images) before
//! gradients are propagated.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::gemm::{
    batch_to_channel_major, channel_to_batch_major, col2im, gemm, im2col, Window,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Batch-norm behaviour: batch statistics while training, running
/// statistics for inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Debug)]
pub struct Conv2d {
    /// `[out, in, k, k]`
    pub weight: Tensor,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    /// `[in, out, k, k]`
    pub weight: Tensor,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv(Conv2d),
    ConvT(ConvTranspose2d),
    BatchNorm(BatchNorm2d),
    LeakyRelu(f32),
    Relu,
    Tanh,
    Sigmoid,
}

/// Whatever a layer must remember from forward to run backward.
#[derive(Debug)]
pub enum Cache {
    Input(Tensor),
    Output(Tensor),
    Norm {
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        mode: Mode,
        dims: (usize, usize, usize),
    },
}

fn normal_tensor<R: Rng>(shape: &[usize], mean: f32, std: f32, rng: &mut R) -> Tensor {
    let dist = Normal::new(mean, std).expect("valid normal parameters");
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = dist.sample(rng));
    t
}

impl Conv2d {
    pub fn init<R: Rng>(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        Conv2d {
            weight: normal_tensor(&[cout, cin, k, k], 0.0, 0.02, rng),
            stride,
            pad,
        }
    }

    fn window(&self, x: &Tensor) -> Result<Window> {
        let (n, c, h, w) = x.dims4()?;
        let ws = self.weight.shape();
        if c != ws[1] {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                ws[1]
            )));
        }
        Window::new(n, c, h, w, ws[2], self.stride, self.pad)
            .ok_or_else(|| Error::Shape(format!("input {h}x{w} smaller than kernel")))
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.window(x)?;
        let cout = self.weight.shape()[0];
        let cols = im2col(x.data(), &g);
        let mut y = vec![0.0f32; cout * g.col_cols()];
        gemm(cout, g.col_rows(), g.col_cols(), self.weight.data(), false, &cols, false, 0.0, &mut y);
        let y = channel_to_batch_major(&y, g.n, cout, g.oh * g.ow);
        Tensor::new(vec![g.n, cout, g.oh, g.ow], y)
    }

    fn backward(&self, x: &Tensor, dy: &Tensor, dw: &mut Tensor) -> Result<Tensor> {
        let g = self.window(x)?;
        let cout = self.weight.shape()[0];
        let cols = im2col(x.data(), &g);
        let dy_cm = batch_to_channel_major(dy.data(), g.n, cout, g.oh * g.ow);
        gemm(cout, g.col_cols(), g.col_rows(), &dy_cm, false, &cols, true, 1.0, dw.data_mut());
        let mut dcols = vec![0.0f32; g.col_rows() * g.col_cols()];
        gemm(g.col_rows(), cout, g.col_cols(), self.weight.data(), true, &dy_cm, false, 0.0, &mut dcols);
        Tensor::new(x.shape().to_vec(), col2im(&dcols, &g))
    }
}

impl ConvTranspose2d {
    pub fn init<R: Rng>(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        ConvTranspose2d {
            weight: normal_tensor(&[cin, cout, k, k], 0.0, 0.02, rng),
            stride,
            pad,
        }
    }

    /// Window over the *output*, whose sliding positions are the input pixels.
    fn window(&self, x: &Tensor) -> Result<(Window, usize)> {
        let (n, c, h, w) = x.dims4()?;
        let ws = self.weight.shape();
        if c != ws[0] {
            return Err(Error::Shape(format!(
                "transposed conv expects {} input channels, got {c}",
                ws[0]
            )));
        }
        let k = ws[2];
        let oh = (h - 1) * self.stride + k;
        let ow = (w - 1) * self.stride + k;
        if oh < 2 * self.pad + 1 || ow < 2 * self.pad + 1 {
            return Err(Error::Shape("transposed conv output collapses".into()));
        }
        let g = Window::new(n, ws[1], oh - 2 * self.pad, ow - 2 * self.pad, k, self.stride, self.pad)
            .ok_or_else(|| Error::Shape("transposed conv geometry".into()))?;
        debug_assert_eq!((g.oh, g.ow), (h, w));
        Ok((g, c))
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (g, cin) = self.window(x)?;
        let s = g.oh * g.ow;
        let x_cm = batch_to_channel_major(x.data(), g.n, cin, s);
        let mut cols = vec![0.0f32; g.col_rows() * g.col_cols()];
        gemm(g.col_rows(), cin, g.col_cols(), self.weight.data(), true, &x_cm, false, 0.0, &mut cols);
        Tensor::new(vec![g.n, g.c, g.h, g.w], col2im(&cols, &g))
    }

    fn backward(&self, x: &Tensor, dy: &Tensor, dw: &mut Tensor) -> Result<Tensor> {
        let (g, cin) = self.window(x)?;
        let s = g.oh * g.ow;
        let dcols = im2col(dy.data(), &g);
        let x_cm = batch_to_channel_major(x.data(), g.n, cin, s);
        gemm(cin, g.col_cols(), g.col_rows(), &x_cm, false, &dcols, true, 1.0, dw.data_mut());
        let mut dx = vec![0.0f32; cin * g.col_cols()];
        gemm(cin, g.col_rows(), g.col_cols(), self.weight.data(), false, &dcols, false, 0.0, &mut dx);
        Tensor::new(x.shape().to_vec(), channel_to_batch_major(&dx, g.n, cin, s))
    }
}

impl BatchNorm2d {
    pub fn init<R: Rng>(channels: usize, rng: &mut R) -> Self {
        BatchNorm2d {
            gamma: normal_tensor(&[channels], 1.0, 0.02, rng),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
        }
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Cache)> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.gamma.numel() {
            return Err(Error::Shape(format!(
                "batch norm over {} channels, got {c}",
                self.gamma.numel()
            )));
        }
        let s = h * w;
        let m = (n * s) as f64;
        let xd = x.data();
        let mut xhat = vec![0.0f32; xd.len()];
        let mut inv_std = vec![0.0f32; c];
        let mut y = vec![0.0f32; xd.len()];
        for ch in 0..c {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut sum = 0.0f64;
                    let mut sq = 0.0f64;
                    for b in 0..n {
                        for v in &xd[(b * c + ch) * s..(b * c + ch + 1) * s] {
                            sum += *v as f64;
                            sq += (*v as f64) * (*v as f64);
                        }
                    }
                    let mean = sum / m;
                    let var = (sq / m - mean * mean).max(0.0);
                    let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean as f32;
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * unbiased as f32;
                    (mean as f32, var as f32)
                }
                Mode::Eval => (self.running_mean.data()[ch], self.running_var.data()[ch]),
            };
            let is = 1.0 / (var + BN_EPS).sqrt();
            inv_std[ch] = is;
            let (gm, bt) = (self.gamma.data()[ch], self.beta.data()[ch]);
            for b in 0..n {
                let r = (b * c + ch) * s..(b * c + ch + 1) * s;
                for i in r {
                    let xh = (xd[i] - mean) * is;
                    xhat[i] = xh;
                    y[i] = gm * xh + bt;
                }
            }
        }
        Ok((
            Tensor::new(x.shape().to_vec(), y)?,
            Cache::Norm {
                xhat,
                inv_std,
                mode,
                dims: (n, c, s),
            },
        ))
    }

    fn backward(
        &self,
        cache: &Cache,
        dy: &Tensor,
        dgamma: &mut Tensor,
        dbeta: &mut Tensor,
    ) -> Result<Tensor> {
        let Cache::Norm {
            xhat,
            inv_std,
            mode,
            dims: (n, c, s),
        } = cache
        else {
            return Err(Error::Contract("batch norm cache mismatch".into()));
        };
        let (n, c, s) = (*n, *c, *s);
        let dyd = dy.data();
        let mut dx = vec![0.0f32; dyd.len()];
        let m = (n * s) as f32;
        for ch in 0..c {
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xh = 0.0f64;
            for b in 0..n {
                for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                    sum_dy += dyd[i] as f64;
                    sum_dy_xh += (dyd[i] * xhat[i]) as f64;
                }
            }
            dgamma.data_mut()[ch] += sum_dy_xh as f32;
            dbeta.data_mut()[ch] += sum_dy as f32;
            let g = self.gamma.data()[ch] * inv_std[ch];
            for b in 0..n {
                for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                    dx[i] = match mode {
                        Mode::Train => {
                            g / m * (m * dyd[i] - sum_dy as f32 - xhat[i] * sum_dy_xh as f32)
                        }
                        Mode::Eval => g * dyd[i],
                    };
                }
            }
        }
        Tensor::new(dy.shape().to_vec(), dx)
    }
}

fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn map(x: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = f(*v));
    y
}

impl BatchNorm2d {
    fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.gamma.numel() {
            return Err(Error::Shape(format!(
                "batch norm over {} channels, got {c}",
                self.gamma.numel()
            )));
        }
        let s = h * w;
        let mut y = x.clone();
        let yd = y.data_mut();
        for ch in 0..c {
            let is = 1.0 / (self.running_var.data()[ch] + BN_EPS).sqrt();
            let mean = self.running_mean.data()[ch];
            let (gm, bt) = (self.gamma.data()[ch], self.beta.data()[ch]);
            for b in 0..n {
                for v in &mut yd[(b * c + ch) * s..(b * c + ch + 1) * s] {
                    *v = gm * ((*v - mean) * is) + bt;
                }
            }
        }
        Ok(y)
    }
}

impl Layer {
    /// Inference-mode forward without caches.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Layer::Conv(l) => l.forward(x)?,
            Layer::ConvT(l) => l.forward(x)?,
            Layer::BatchNorm(l) => l.eval(x)?,
            Layer::LeakyRelu(s) => {
                let s = *s;
                map(x, |v| if v > 0.0 { v } else { s * v })
            }
            Layer::Relu => map(x, |v| v.max(0.0)),
            Layer::Tanh => map(x, f32::tanh),
            Layer::Sigmoid => map(x, sigmoid),
        })
    }

    /// Number of trainable tensors this layer owns.
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv(_) | Layer::ConvT(_) => 1,
            Layer::BatchNorm(_) => 2,
            _ => 0,
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Layer::Conv(l) => vec![("weight", &l.weight)],
            Layer::ConvT(l) => vec![("weight", &l.weight)],
            Layer::BatchNorm(l) => vec![("gamma", &l.gamma), ("beta", &l.beta)],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv(l) => vec![&mut l.weight],
            Layer::ConvT(l) => vec![&mut l.weight],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            _ => vec![],
        }
    }

    pub fn buffers(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Layer::BatchNorm(l) => vec![
                ("running_mean", &l.running_mean),
                ("running_var", &l.running_var),
            ],
            _ => vec![],
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::BatchNorm(l) => vec![&mut l.running_mean, &mut l.running_var],
            _ => vec![],
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Cache)> {
        Ok(match self {
            Layer::Conv(l) => (l.forward(x)?, Cache::Input(x.clone())),
            Layer::ConvT(l) => (l.forward(x)?, Cache::Input(x.clone())),
            Layer::BatchNorm(l) => return l.forward(x, mode),
            Layer::LeakyRelu(slope) => {
                let s = *slope;
                (map(x, |v| if v > 0.0 { v } else { s * v }), Cache::Input(x.clone()))
            }
            Layer::Relu => {
                let y = map(x, |v| v.max(0.0));
                (y.clone(), Cache::Output(y))
            }
            Layer::Tanh => {
                let y = map(x, f32::tanh);
                (y.clone(), Cache::Output(y))
            }
            Layer::Sigmoid => {
                let y = map(x, sigmoid);
                (y.clone(), Cache::Output(y))
            }
        })
    }

    /// Propagate `dy` to the layer input, accumulating parameter gradients
    /// into `grads` (one slot per parameter, in [`Layer::params`] order).
    pub fn backward(&self, cache: &Cache, dy: &Tensor, grads: &mut [Tensor]) -> Result<Tensor> {
        let mismatch = || Error::Contract("layer cache mismatch".into());
        match (self, cache) {
            (Layer::Conv(l), Cache::Input(x)) => l.backward(x, dy, &mut grads[0]),
            (Layer::ConvT(l), Cache::Input(x)) => l.backward(x, dy, &mut grads[0]),
            (Layer::BatchNorm(l), c @ Cache::Norm { .. }) => {
                let (dg, db) = grads.split_at_mut(1);
                l.backward(c, dy, &mut dg[0], &mut db[0])
            }
            (Layer::LeakyRelu(s), Cache::Input(x)) => {
                let mut dx = dy.clone();
                for (d, v) in dx.data_mut().iter_mut().zip(x.data()) {
                    if *v <= 0.0 {
                        *d *= s;
                    }
                }
                Ok(dx)
            }
            (Layer::Relu, Cache::Output(y)) => {
                let mut dx = dy.clone();
                for (d, v) in dx.data_mut().iter_mut().zip(y.data()) {
                    if *v <= 0.0 {
                        *d = 0.0;
                    }
                }
                Ok(dx)
            }
            (Layer::Tanh, Cache::Output(y)) => {
                let mut dx = dy.clone();
                for (d, v) in dx.data_mut().iter_mut().zip(y.data()) {
                    *d *= 1.0 - v * v;
                }
                Ok(dx)
            }
            (Layer::Sigmoid, Cache::Output(y)) => {
                let mut dx = dy.clone();
                for (d, v) in dx.data_mut().iter_mut().zip(y.data()) {
                    *d *= v * (1.0 - v);
                }
                Ok(dx)
            }
            _ => Err(mismatch()),
        }
    }
}
