//! Adaptive-moment optimizer with bias correction.

use alloc::vec::Vec;

use crate::checkpoint::Blob;
use crate::error::{bail, Result};
use crate::params::Params;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        AdamConfig {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!(Config, "learning rate must be positive, got {}", self.lr);
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            bail!(Config, "momentum coefficients must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &Params<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.value.shape()))
            .collect();
        Adam {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`; entries without a gradient are left untouched.
    pub fn step(&mut self, params: &mut Params<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        debug_assert_eq!(grads.len(), params.len());
        self.step += 1;
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        let bc1 = 1.0 - libm::pow(b1, self.step as f64);
        let bc2 = 1.0 - libm::pow(b2, self.step as f64);
        let step_size = T::of(lr / bc1);
        let bc2_sqrt = T::of(libm::sqrt(bc2));
        let eps = T::of(self.config.eps);
        let (b1, b2) = (T::of(b1), T::of(b2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !params.entries()[i].trainable {
                continue;
            }
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = params.value_mut(i).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                *p -= step_size * *m / ((*v).sqrt() / bc2_sqrt + eps);
            }
        }
    }

    pub fn export(&self, prefix: &str, params: &Params<T>, out: &mut Vec<Blob>) {
        out.push(Blob::from_u64s(
            &alloc::format!("{prefix}step"),
            &[self.step],
        ));
        for (i, e) in params.entries().iter().enumerate() {
            out.push(Blob::from_tensor(
                &alloc::format!("{prefix}m/{}", e.name),
                &self.first[i],
            ));
            out.push(Blob::from_tensor(
                &alloc::format!("{prefix}v/{}", e.name),
                &self.second[i],
            ));
        }
    }

    pub fn import(&mut self, prefix: &str, params: &Params<T>, blobs: &[Blob]) -> Result<()> {
        let find = |name: &str| blobs.iter().find(|b| b.name == name);
        let Some(step) = find(&alloc::format!("{prefix}step")) else {
            bail!(Checkpoint, "missing optimizer state {}step", prefix);
        };
        self.step = step.to_u64s()?.first().copied().unwrap_or(0);
        for (i, e) in params.entries().iter().enumerate() {
            for (kind, slot) in [("m", &mut self.first[i]), ("v", &mut self.second[i])] {
                let key = alloc::format!("{prefix}{kind}/{}", e.name);
                let Some(b) = find(&key) else {
                    bail!(Checkpoint, "missing optimizer state {}", key);
                };
                let t = b.to_tensor::<T>()?;
                if t.shape() != e.value.shape() {
                    bail!(Checkpoint, "optimizer state {} has wrong shape", key);
                }
                *slot = t;
            }
        }
        Ok(())
    }
}

/// Constant rate for the first half of training, then linear decay to zero.
pub fn linear_decay_second_half(base_lr: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let half = total_steps / 2;
    if step < half {
        base_lr
    } else {
        let remaining = (total_steps - step) as f64;
        let span = (total_steps - half) as f64;
        base_lr * (remaining / span).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn minimizes_quadratic() {
        let mut params = Params::<f64>::new();
        params.push("x", Tensor::full(Shape::new(1, 1, 1, 2), 3.0), true);
        let mut opt = Adam::new(AdamConfig::new(0.1, 0.9, 0.999), &params);
        for _ in 0..500 {
            let g = params.value(0).map(|v| 2.0 * (v - 1.0));
            opt.step(&mut params, &[Some(g)], 0.1);
        }
        for &v in params.value(0).data() {
            assert!((v - 1.0).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = Params::<f64>::new();
        params.push("x", Tensor::full(Shape::new(1, 1, 1, 1), 0.0), true);
        let mut opt = Adam::new(AdamConfig::new(0.01, 0.5, 0.999), &params);
        opt.step(&mut params, &[Some(Tensor::scalar(4.0))], 0.01);
        assert!((params.value(0).item() + 0.01).abs() < 1e-9);
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut params = Params::<f64>::new();
        params.push("b", Tensor::scalar(1.0), false);
        let mut opt = Adam::new(AdamConfig::new(0.1, 0.5, 0.999), &params);
        opt.step(&mut params, &[Some(Tensor::scalar(1.0))], 0.1);
        assert_eq!(params.value(0).item(), 1.0);
    }

    #[test]
    fn decay_schedule() {
        assert_eq!(linear_decay_second_half(1.0, 0, 100), 1.0);
        assert_eq!(linear_decay_second_half(1.0, 49, 100), 1.0);
        assert_eq!(linear_decay_second_half(1.0, 50, 100), 1.0);
        assert!((linear_decay_second_half(1.0, 75, 100) - 0.5).abs() < 1e-12);
        assert_eq!(linear_decay_second_half(1.0, 100, 100), 0.0);
    }
}
