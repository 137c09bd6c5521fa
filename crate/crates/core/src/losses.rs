//! GANomaly training objectives and their gradients.
//!
//! Every loss returns its value together with the gradient with respect to
//! each direct input, so the trainer can push them into the networks. The
//! functions are generic over the float type; training uses `f32`, the
//! finite-difference checks also run in `f64`.
//!
//! Batches are flat row-major slices with `batch` rows.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability clamp for the discriminator cross entropy.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_adv: f64,
    pub w_con: f64,
    pub w_enc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_adv: 1.0,
            w_con: 20.0,
            w_enc: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(w_adv: f64, w_con: f64, w_enc: f64) -> Self {
        LossWeights { w_adv, w_con, w_enc }
    }

    pub fn problems(&self) -> Vec<String> {
        [("w_adv", self.w_adv), ("w_con", self.w_con), ("w_enc", self.w_enc)]
            .into_iter()
            .filter(|(_, w)| !(w.is_finite() && *w >= 0.0))
            .map(|(n, w)| format!("train.loss_weights.{n} must be finite and >= 0, got {w}"))
            .collect()
    }
}

/// A loss value with the gradients for its two inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad<T> {
    pub value: T,
    pub grad_a: Vec<T>,
    pub grad_b: Vec<T>,
}

fn check_pair<T>(a: &[T], b: &[T], batch: usize, what: &str) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "{what}: inputs have {} and {} elements",
            a.len(),
            b.len()
        )));
    }
    if batch == 0 || !a.len().is_multiple_of(batch) || a.is_empty() {
        return Err(Error::Shape(format!(
            "{what}: {} elements cannot form {batch} rows",
            a.len()
        )));
    }
    Ok(a.len() / batch)
}

fn cast<T: Float>(v: f64) -> T {
    T::from(v).expect("representable constant")
}

/// Feature matching: `‖mean(f_real) − mean(f_fake)‖₂` over batch-mean
/// feature vectors (squared norm when `squared`).
///
/// At exactly zero distance the un-squared norm is not differentiable; the
/// gradient is reported as zero there.
pub fn adversarial_loss<T: Float>(
    f_real: &[T],
    f_fake: &[T],
    batch: usize,
    squared: bool,
) -> Result<LossGrad<T>> {
    let dim = check_pair(f_real, f_fake, batch, "adversarial loss")?;
    let nb = cast::<T>(batch as f64);
    let mut diff = vec![T::zero(); dim];
    for row in 0..batch {
        for j in 0..dim {
            diff[j] = diff[j] + (f_real[row * dim + j] - f_fake[row * dim + j]) / nb;
        }
    }
    let sq = diff.iter().fold(T::zero(), |s, d| s + *d * *d);
    let (value, coef) = if squared {
        (sq, cast::<T>(2.0) / nb)
    } else {
        let norm = sq.sqrt();
        let coef = if norm > T::zero() { T::one() / (norm * nb) } else { T::zero() };
        (norm, coef)
    };
    let mut grad_a = vec![T::zero(); f_real.len()];
    let mut grad_b = vec![T::zero(); f_real.len()];
    for row in 0..batch {
        for j in 0..dim {
            let g = diff[j] * coef;
            grad_a[row * dim + j] = g;
            grad_b[row * dim + j] = -g;
        }
    }
    Ok(LossGrad { value, grad_a, grad_b })
}

/// Mean absolute difference over all elements (L1 reconstruction loss).
pub fn contextual_loss<T: Float>(x: &[T], x_hat: &[T]) -> Result<LossGrad<T>> {
    check_pair(x, x_hat, 1, "contextual loss")?;
    let n = cast::<T>(x.len() as f64);
    let mut value = T::zero();
    let mut grad_a = Vec::with_capacity(x.len());
    for (a, b) in x.iter().zip(x_hat) {
        let d = *a - *b;
        value = value + d.abs();
        let s = if d > T::zero() {
            T::one()
        } else if d < T::zero() {
            -T::one()
        } else {
            T::zero()
        };
        grad_a.push(s / n);
    }
    let grad_b = grad_a.iter().map(|g| -*g).collect();
    Ok(LossGrad {
        value: value / n,
        grad_a,
        grad_b,
    })
}

/// Batch mean of the per-sample latent distance `‖z − ẑ‖₂`
/// (squared when `squared`).
pub fn encoder_loss<T: Float>(z: &[T], z_hat: &[T], batch: usize, squared: bool) -> Result<LossGrad<T>> {
    let dim = check_pair(z, z_hat, batch, "encoder loss")?;
    let nb = cast::<T>(batch as f64);
    let mut value = T::zero();
    let mut grad_a = vec![T::zero(); z.len()];
    for row in 0..batch {
        let r = row * dim..(row + 1) * dim;
        let sq = z[r.clone()]
            .iter()
            .zip(&z_hat[r.clone()])
            .fold(T::zero(), |s, (a, b)| s + (*a - *b) * (*a - *b));
        let (v, coef) = if squared {
            (sq, cast::<T>(2.0) / nb)
        } else {
            let norm = sq.sqrt();
            (norm, if norm > T::zero() { T::one() / (norm * nb) } else { T::zero() })
        };
        value = value + v;
        for i in r {
            grad_a[i] = (z[i] - z_hat[i]) * coef;
        }
    }
    let grad_b = grad_a.iter().map(|g| -*g).collect();
    Ok(LossGrad {
        value: value / nb,
        grad_a,
        grad_b,
    })
}

/// Batch mean of `−ln p_real − ln(1 − p_fake)`, probabilities clamped to
/// `[ε, 1 − ε]`. Gradients are zero where the clamp is active.
pub fn discriminator_loss<T: Float>(p_real: &[T], p_fake: &[T]) -> Result<LossGrad<T>> {
    check_pair(p_real, p_fake, 1, "discriminator loss")?;
    let eps = cast::<T>(BCE_EPS);
    let hi = T::one() - eps;
    let n = cast::<T>(p_real.len() as f64);
    let clamp = |p: T| if p < eps { eps } else if p > hi { hi } else { p };
    let inside = |p: T| p >= eps && p <= hi;
    let mut value = T::zero();
    let mut grad_a = Vec::with_capacity(p_real.len());
    let mut grad_b = Vec::with_capacity(p_real.len());
    for (r, f) in p_real.iter().zip(p_fake) {
        let (cr, cf) = (clamp(*r), clamp(*f));
        value = value - cr.ln() - (T::one() - cf).ln();
        grad_a.push(if inside(*r) { -T::one() / (cr * n) } else { T::zero() });
        grad_b.push(if inside(*f) { T::one() / ((T::one() - cf) * n) } else { T::zero() });
    }
    Ok(LossGrad {
        value: value / n,
        grad_a,
        grad_b,
    })
}

/// `w_adv·l_adv + w_con·l_con + w_enc·l_enc`.
pub fn generator_total_loss(l_adv: f64, l_con: f64, l_enc: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("l_adv", l_adv), ("l_con", l_con), ("l_enc", l_enc)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} is not finite: {v}")));
        }
    }
    Ok(w.w_adv * l_adv + w.w_con * l_con + w.w_enc * l_enc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adversarial_identity_and_hand_value() {
        let f = [0.3f64, -1.2, 0.5, 0.0];
        assert_eq!(adversarial_loss(&f, &f, 2, false).unwrap().value, 0.0);
        let l = adversarial_loss(&[1.0f64, 0.0], &[0.0, 1.0], 1, false).unwrap();
        assert!((l.value - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn adversarial_is_homogeneous() {
        let a = [0.1f64, 0.7, -0.4, 0.2];
        let b = [0.5f64, -0.3, 0.9, 0.1];
        let base = adversarial_loss(&a, &b, 2, false).unwrap().value;
        for c in [-3.0, 0.5, 2.0] {
            let sa: Vec<f64> = a.iter().map(|v| v * c).collect();
            let sb: Vec<f64> = b.iter().map(|v| v * c).collect();
            let scaled = adversarial_loss(&sa, &sb, 2, false).unwrap().value;
            assert!((scaled - base * f64::abs(c)).abs() < 1e-12);
        }
    }

    #[test]
    fn contextual_cases() {
        let x = [0.2f64, -0.4, 0.9];
        assert_eq!(contextual_loss(&x, &x).unwrap().value, 0.0);
        let l = contextual_loss(&[1.0f64; 8], &[-1.0; 8]).unwrap();
        assert_eq!(l.value, 2.0);
        // two samples of two elements, swapped batch order
        let a = [0.1f64, 0.2, 0.3, 0.4];
        let b = [0.0f64, 0.5, -0.3, 0.4];
        let a_sw = [0.3f64, 0.4, 0.1, 0.2];
        let b_sw = [-0.3f64, 0.4, 0.0, 0.5];
        let v1 = contextual_loss(&a, &b).unwrap().value;
        let v2 = contextual_loss(&a_sw, &b_sw).unwrap().value;
        assert!((v1 - v2).abs() < 1e-15);
    }

    #[test]
    fn encoder_cases() {
        let z = [0.5f64, 0.1];
        assert_eq!(encoder_loss(&z, &z, 1, false).unwrap().value, 0.0);
        let l = encoder_loss(&[3.0f64, 4.0], &[0.0, 0.0], 1, false).unwrap();
        assert_eq!(l.value, 5.0);
        let r = encoder_loss(&[0.0f64, 0.0], &[3.0, 4.0], 1, false).unwrap();
        assert_eq!(l.value, r.value);
        let sq = encoder_loss(&[3.0f64, 4.0], &[0.0, 0.0], 1, true).unwrap();
        assert_eq!(sq.value, 25.0);
    }

    #[test]
    fn total_loss_cases() {
        let w = LossWeights::default();
        assert_eq!(generator_total_loss(1.0, 1.0, 1.0, &w).unwrap(), 22.0);
        assert_eq!(generator_total_loss(0.0, 0.0, 0.0, &w).unwrap(), 0.0);
        let proj = LossWeights::new(0.0, 1.0, 0.0);
        assert_eq!(generator_total_loss(5.0, 3.0, 7.0, &proj).unwrap(), 3.0);
        assert!(matches!(
            generator_total_loss(f64::NAN, 0.0, 0.0, &w),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn discriminator_cases() {
        let e = BCE_EPS;
        let perfect = discriminator_loss(&[1.0 - e], &[e]).unwrap().value;
        assert!(perfect < 1e-6);
        let half = discriminator_loss(&[0.5f64, 0.5], &[0.5, 0.5]).unwrap().value;
        assert!((half - 2.0 * 2f64.ln()).abs() < 1e-12);
        let worst = discriminator_loss(&[0.0f64], &[1.0]).unwrap().value;
        assert!(worst.is_finite());
        assert!((worst - 2.0 * (1.0 / e).ln()).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch() {
        assert!(matches!(
            adversarial_loss(&[1.0f64, 2.0], &[1.0], 1, false),
            Err(Error::Shape(_))
        ));
        assert!(matches!(contextual_loss(&[1.0f64], &[]), Err(Error::Shape(_))));
        assert!(matches!(
            encoder_loss(&[1.0f64, 2.0, 3.0], &[1.0, 2.0, 3.0], 2, false),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().problems().is_empty());
        assert_eq!(LossWeights::new(-1.0, f64::INFINITY, 0.0).problems().len(), 2);
    }
}
