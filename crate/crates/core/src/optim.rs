//! Adam and the warmup + cosine learning-rate schedule.

use alloc::collections::BTreeMap;
use alloc::string::String;

use crate::array::DenseArray;
use crate::error::{dim_err, Error, Result};
use crate::tape::Gradients;

/// Linear warmup to `peak`, then cosine decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub total_steps: usize,
    pub warmup_fraction: f64,
}

impl LrSchedule {
    pub fn new(peak: f64, total_steps: usize, warmup_fraction: f64) -> Result<Self> {
        if !(peak > 0.0) || !peak.is_finite() {
            return Err(Error::Config(alloc::format!("peak learning rate must be positive, got {peak}")));
        }
        if !(0.0..1.0).contains(&warmup_fraction) {
            return Err(Error::Config(alloc::format!("warmup fraction {warmup_fraction} outside [0, 1)")));
        }
        Ok(Self { peak, total_steps: total_steps.max(1), warmup_fraction })
    }

    pub fn warmup_steps(&self) -> usize {
        libm::ceil(self.warmup_fraction * self.total_steps as f64) as usize
    }

    /// Learning rate for the zero-based update `step`.
    pub fn at(&self, step: usize) -> f64 {
        let w = self.warmup_steps();
        if step < w {
            return self.peak * (step + 1) as f64 / w as f64;
        }
        let span = (self.total_steps - w).max(1) as f64;
        let progress = ((step - w) as f64 / span).min(1.0);
        0.5 * self.peak * (1.0 + libm::cos(core::f64::consts::PI * progress))
    }
}

/// Adam with bias correction. Moments are created lazily per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, DenseArray>,
    v: BTreeMap<String, DenseArray>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }
}

impl Adam {
    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient and passes `trainable`.
    pub fn update(
        &mut self,
        params: &mut BTreeMap<String, DenseArray>,
        grads: &Gradients,
        lr: f64,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::Numeric(alloc::format!("non-finite gradient for {name}")));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        for (name, p) in params.iter_mut() {
            if !trainable(name) {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != p.shape() {
                return Err(dim_err!("gradient for {name} has shape {:?}, parameter {:?}", g.shape(), p.shape()));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| DenseArray::zeros(p.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| DenseArray::zeros(p.shape()));
            let it = p.values_mut().iter_mut().zip(g.values()).zip(m.values_mut().iter_mut().zip(v.values_mut()));
            for ((w, &gi), (mi, vi)) in it {
                let gi = gi as f64;
                let mn = self.beta1 * *mi as f64 + (1.0 - self.beta1) * gi;
                let vn = self.beta2 * *vi as f64 + (1.0 - self.beta2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                let upd = lr * (mn / bc1) / (libm::sqrt(vn / bc2) + self.eps);
                *w = (*w as f64 - upd) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    #[test]
    fn schedule_shape() {
        let s = LrSchedule::new(0.01, 100, 0.05).unwrap();
        assert_eq!(s.warmup_steps(), 5);
        assert!((s.at(0) - 0.002).abs() < 1e-12);
        assert!((s.at(4) - 0.01).abs() < 1e-12);
        assert!((s.at(5) - 0.01).abs() < 1e-12);
        assert!(s.at(50) < s.at(20));
        assert!(s.at(99) < 1e-4);
        assert!(LrSchedule::new(0.0, 10, 0.05).is_err());
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), DenseArray::from_rows(&[&[1.0, -2.0]]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), DenseArray::from_rows(&[&[0.3, -5.0]]).unwrap());
        let mut adam = Adam::default();
        adam.update(&mut params, &grads, 0.1, |_| true).unwrap();
        let w = params["w"].values();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), DenseArray::from_rows(&[&[3.0]]).unwrap());
        let mut adam = Adam::default();
        for _ in 0..500 {
            let w = params["w"].values()[0];
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), DenseArray::scalar(2.0 * (w - 1.0)));
            adam.update(&mut params, &grads, 0.05, |_| true).unwrap();
        }
        assert!((params["w"].values()[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn frozen_and_nonfinite() {
        let mut params = BTreeMap::new();
        params.insert("a".to_string(), DenseArray::scalar(1.0));
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), DenseArray::scalar(1.0));
        let mut adam = Adam::default();
        adam.update(&mut params, &grads, 0.1, |n| n != "a").unwrap();
        assert_eq!(params["a"].values(), &[1.0]);
        grads.insert("a".to_string(), DenseArray::scalar(f32::NAN));
        assert!(matches!(adam.update(&mut params, &grads, 0.1, |_| true), Err(Error::Numeric(_))));
    }
}
