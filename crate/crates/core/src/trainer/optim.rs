use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

/// Adam over an ordered list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new<'a>(cfg: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        Adam { cfg, step: 0, m, v }
    }

    pub fn reset(&mut self) {
        self.step = 0;
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn apply(&mut self, params: Vec<&mut Tensor>, grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::Shape(format!(
                    "optimizer slot {:?} vs gradient {:?}",
                    m.shape(),
                    g.shape()
                )));
            }
            let (pd, gd) = (p.data_mut(), g.data());
            for i in 0..pd.len() {
                let gi = gd[i];
                let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
                let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                pd[i] -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = AdamConfig { lr: 0.05, beta1: 0.5, beta2: 0.999, eps: 1e-8 };
        let mut x = Tensor::new(vec![2], vec![3.0, -2.0]).unwrap();
        let mut opt = Adam::new(cfg, [&x]);
        for _ in 0..500 {
            let g = Tensor::new(vec![2], x.data().iter().map(|v| 2.0 * v).collect()).unwrap();
            opt.apply(vec![&mut x], &[&g]).unwrap();
        }
        assert!(x.max_abs() < 1e-2, "{:?}", x.data());
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let cfg = AdamConfig { lr: 0.1, beta1: 0.5, beta2: 0.999, eps: 1e-8 };
        let mut x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let before = x.clone();
        let mut opt = Adam::new(cfg, [&x]);
        let g = Tensor::zeros(&[3]);
        opt.apply(vec![&mut x], &[&g]).unwrap();
        assert_eq!(x, before);
    }
}
