//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{domain_err, shape_err, Error, Result};
use crate::{Scalar, Tensor};

/// Hyper-parameters of [`AdamW`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

#[derive(Debug, Clone)]
struct Moments<T> {
    shape: Vec<usize>,
    m: Vec<T>,
    v: Vec<T>,
}

/// Optimizer state: one pair of moment buffers per parameter slot.
///
/// Parameters must be passed to [`AdamW::step`] in the same order every call.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    moments: Vec<Option<Moments<T>>>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, moments: Vec::new(), step: 0 }
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr` to every tensor with
    /// `requires_grad`, reading `tensor.grad` (absent gradient counts as zero).
    /// Frozen tensors are left untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(domain_err!("learning rate must be positive, got {lr}"));
        }
        if self.moments.is_empty() {
            self.moments = vec![None; params.len()];
        } else if self.moments.len() != params.len() {
            return Err(shape_err!(
                "optimizer tracks {} parameters but received {}",
                self.moments.len(),
                params.len()
            ));
        }
        for (i, p) in params.iter().enumerate() {
            if let Some(g) = &p.grad {
                if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient in parameter {i} (shape {:?}) at element {j} before step {}",
                        p.shape(),
                        self.step + 1
                    )));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (lr_t, eps, decay) = (T::of(lr), T::of(c.eps), T::of(lr * c.weight_decay));
        let (bc1, bc2) = (T::of(bc1), T::of(bc2));
        for (slot, p) in self.moments.iter_mut().zip(params.iter_mut()) {
            if !p.requires_grad {
                continue;
            }
            let st = slot.get_or_insert_with(|| Moments {
                shape: p.shape().to_vec(),
                m: vec![T::zero(); p.len()],
                v: vec![T::zero(); p.len()],
            });
            if st.shape != p.shape() {
                return Err(shape_err!("moment shape {:?} vs parameter {:?}", st.shape, p.shape()));
            }
            let grad = p.grad.take();
            let zeros;
            let g: &[T] = match &grad {
                Some(g) => g,
                None => {
                    zeros = vec![T::zero(); p.len()];
                    &zeros
                }
            };
            for (((w, &gi), m), v) in p.data_mut().iter_mut().zip(g).zip(st.m.iter_mut()).zip(st.v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * gi;
                *v = b2 * *v + (T::one() - b2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w - lr_t * m_hat / (v_hat.sqrt() + eps) - decay * *w;
            }
            p.grad = grad;
        }
        Ok(())
    }
}

/// Cosine annealing from `base_lr` at step 0 to exactly 0 at `total_steps`, no warmup.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(domain_err!("total_steps must be at least 1"));
    }
    if step > total_steps {
        return Err(domain_err!("step {step} exceeds total_steps {total_steps}"));
    }
    if step == total_steps {
        return Ok(0.0);
    }
    Ok(base_lr * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(w: f64) -> Tensor<f64> {
        Tensor::scalar(w).trainable()
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let mut w = Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap().trainable();
        w.grad = Some(vec![0.0; 3]);
        let before = w.clone();
        opt.step(&mut [&mut w], 0.1).unwrap();
        assert!(w.bit_eq(&before));
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let mut w = scalar_param(0.0);
        w.grad = Some(vec![1.0]);
        opt.step(&mut [&mut w], 0.1).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        assert!((w.data()[0] + 0.1).abs() < 1e-8, "{}", w.data()[0]);
    }

    #[test]
    fn decoupled_decay_shrinks_by_lr_lambda_w() {
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.5, ..Default::default() });
        let mut w = scalar_param(2.0);
        w.grad = Some(vec![0.0]);
        opt.step(&mut [&mut w], 0.1).unwrap();
        assert!((w.data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn frozen_tensors_never_change() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut frozen = Tensor::<f64>::from_f64(&[2], &[1.0, 2.0]).unwrap();
        frozen.grad = Some(vec![5.0, 5.0]);
        let mut live = scalar_param(1.0);
        live.grad = Some(vec![1.0]);
        let before = frozen.clone();
        for _ in 0..3 {
            opt.step(&mut [&mut frozen, &mut live], 0.1).unwrap();
        }
        assert!(frozen.bit_eq(&before));
        assert_eq!(opt.steps(), 3);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut opt = AdamW::<f32>::new(AdamWConfig::default());
        let mut w = Tensor::scalar(1.0f32).trainable();
        w.grad = Some(vec![f32::NAN]);
        let err = opt.step(&mut [&mut w], 0.1).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
        assert_eq!(w.data()[0], 1.0);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn nonpositive_lr_rejected() {
        let mut opt = AdamW::<f64>::new(AdamWConfig::default());
        let mut w = scalar_param(1.0);
        assert!(opt.step(&mut [&mut w], 0.0).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 1000, 2e-4).unwrap(), 2e-4);
        assert_eq!(cosine_lr(1000, 1000, 2e-4).unwrap(), 0.0);
        assert!((cosine_lr(500, 1000, 2e-4).unwrap() - 1e-4).abs() < 1e-18);
        assert!(cosine_lr(1001, 1000, 2e-4).is_err());
        assert!(cosine_lr(0, 0, 2e-4).is_err());
    }

    #[test]
    fn cosine_schedule_is_monotone() {
        let lrs: Vec<f64> = (0..=100).map(|t| cosine_lr(t, 100, 1.0).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
