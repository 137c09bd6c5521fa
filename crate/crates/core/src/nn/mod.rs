//! Minimal convolutional building blocks with manual backpropagation.

mod gemm;
pub mod layers;

pub use layers::{BatchNorm2d, Cache, Conv2d, ConvTranspose2d, Layer, Mode};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A feed-forward stack of layers.
#[derive(Clone, Debug, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

/// Per-layer caches recorded by [`Sequential::forward`].
#[derive(Debug)]
pub struct Tape {
    caches: Vec<Cache>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tape)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur: Option<Tensor> = None;
        for layer in &mut self.layers {
            let input = cur.as_ref().unwrap_or(x);
            let (y, cache) = layer.forward(input, mode)?;
            caches.push(cache);
            cur = Some(y);
        }
        Ok((cur.unwrap_or_else(|| x.clone()), Tape { caches }))
    }

    /// Inference-mode evaluation (running batch-norm statistics).
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur: Option<Tensor> = None;
        for layer in &self.layers {
            cur = Some(layer.infer(cur.as_ref().unwrap_or(x))?);
        }
        Ok(cur.unwrap_or_else(|| x.clone()))
    }

    /// Backpropagate `dy`; parameter gradients are added into `grads`, which
    /// must be laid out like [`Sequential::zero_grads`].
    pub fn backward(&self, tape: &Tape, dy: &Tensor, grads: &mut [Tensor]) -> Result<Tensor> {
        if tape.caches.len() != self.layers.len() || grads.len() != self.param_count() {
            return Err(Error::Contract("tape or gradient buffer does not match network".into()));
        }
        let mut offset = grads.len();
        let mut g = dy.clone();
        for (layer, cache) in self.layers.iter().zip(&tape.caches).rev() {
            let k = layer.param_count();
            offset -= k;
            g = layer.backward(cache, &g, &mut grads[offset..offset + k])?;
        }
        Ok(g)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.params().map(|(_, t)| Tensor::zeros(t.shape())).collect()
    }

    /// Trainable tensors with stable names such as `"3.weight"`.
    pub fn params(&self) -> impl Iterator<Item = (String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.params().into_iter().map(move |(n, t)| (format!("{i}.{n}"), t)))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut)
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffers(&self) -> impl Iterator<Item = (String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.buffers().into_iter().map(move |(n, t)| (format!("{i}.{n}"), t)))
    }

    pub fn buffers_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::buffers_mut)
    }

    /// Parameters followed by buffers, in a fixed order.
    pub fn state(&self) -> Vec<(String, &Tensor)> {
        self.params().chain(self.buffers()).collect()
    }

    pub fn state_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        let mut bufs: Vec<&mut Tensor> = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Conv(c) => out.push(&mut c.weight),
                Layer::ConvT(c) => out.push(&mut c.weight),
                Layer::BatchNorm(b) => {
                    out.push(&mut b.gamma);
                    out.push(&mut b.beta);
                    bufs.push(&mut b.running_mean);
                    bufs.push(&mut b.running_var);
                }
                _ => {}
            }
        }
        out.extend(bufs);
        out
    }
}
