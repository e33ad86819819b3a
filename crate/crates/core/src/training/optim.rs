use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result, Tensor};

/// Exponentially decaying learning rate `lr0 * decay^step`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr0: f64,
    pub decay: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { lr0: 1e-3, decay: 0.99995 }
    }
}

impl Schedule {
    pub fn at(&self, step: u64) -> f64 {
        self.lr0 * self.decay.powf(step as f64)
    }
}

/// The default schedule, `1e-3 * 0.99995^step`.
pub fn lr_at(step: u64) -> f64 {
    Schedule::default().at(step)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, scaled by the learning rate.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Some gradient entries were NaN or infinite; nothing was changed.
    SkippedNonFinite { count: usize },
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<S = f32> {
    pub config: AdamConfig,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    steps: u64,
}

impl<S: Real> Adam<S> {
    pub fn new(config: AdamConfig, params: &[Tensor<S>]) -> Self {
        let zeros = || params.iter().map(|p| alloc::vec![S::zero(); p.len()]).collect();
        Self { config, m: zeros(), v: zeros(), steps: 0 }
    }

    /// Updates applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [Tensor<S>], grads: &[Vec<S>], lr: f64) -> Result<StepOutcome> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "adam",
                format!("{} parameters, {} gradients, state for {}", params.len(), grads.len(), self.m.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(Error::shape("adam", format!("parameter {i}: {} values, gradient {}", p.len(), g.len())));
            }
        }
        let bad = grads.iter().flatten().filter(|g| !g.is_finite()).count();
        if bad > 0 {
            return Ok(StepOutcome::SkippedNonFinite { count: bad });
        }
        self.steps += 1;
        let c = self.config;
        let (b1, b2) = (S::from_f64(c.beta1), S::from_f64(c.beta2));
        let bc1 = 1.0 - c.beta1.powf(self.steps as f64);
        let bc2 = 1.0 - c.beta2.powf(self.steps as f64);
        let step = S::from_f64(lr / bc1);
        let root_bc2 = S::from_f64(bc2.sqrt());
        let eps = S::from_f64(c.eps);
        let decay = S::from_f64(1.0 - lr * c.weight_decay);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (S::one() - b1) * g;
                *v = b2 * *v + (S::one() - b2) * g * g;
                *w = *w * decay - step * *m / (v.sqrt() / root_bc2 + eps);
            }
        }
        Ok(StepOutcome::Applied)
    }
}

#[cfg(test)]
mod tests {
    use alloc::vec;

    use super::*;

    #[test]
    fn schedule_values() {
        assert_eq!(lr_at(0), 1e-3);
        assert!((lr_at(100_000) - 6.7379e-6).abs() < 1e-9);
        assert!((1..50).all(|s| lr_at(s) < lr_at(s - 1)));
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut p = vec![Tensor::new(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let mut adam = Adam::new(AdamConfig::default(), &p);
        for _ in 0..5 {
            adam.step(&mut p, &[vec![0.0; 3]], 1e-2).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let mut p = vec![Tensor::new(vec![1], vec![0.0f64]).unwrap()];
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let mut last = 0.0;
        for _ in 0..200 {
            adam.step(&mut p, &[vec![3.7]], 1e-3).unwrap();
            let now = p[0].data()[0];
            assert!(((last - now) - 1e-3).abs() < 1e-8, "{}", last - now);
            last = now;
        }
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = vec![Tensor::new(vec![1], vec![1.0f64]).unwrap()];
        let mut adam = Adam::new(AdamConfig::default(), &p);
        for _ in 0..500 {
            let x = p[0].data()[0];
            adam.step(&mut p, &[vec![2.0 * (x - 0.3)]], 1e-2).unwrap();
        }
        let x = p[0].data()[0];
        assert!((x - 0.3).powi(2) < 1e-6, "{x}");
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut p = vec![Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap()];
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let out = adam.step(&mut p, &[vec![f32::NAN, 1.0]], 1e-3).unwrap();
        assert_eq!(out, StepOutcome::SkippedNonFinite { count: 1 });
        assert_eq!(p[0].data(), &[1.0, 2.0]);
        assert_eq!(adam.steps(), 0);
    }
}
