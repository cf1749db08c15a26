//! AdamW with decoupled weight decay, and the warmup + cosine schedule.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use std::collections::HashMap;

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Decay is skipped for normalization scales/shifts, biases, and gate
/// logits, the usual exclusion set for transformer-style training.
pub fn decay_applies(name: &str) -> bool {
    !(name.ends_with(".gamma")
        || name.ends_with(".beta")
        || name.ends_with(".bias")
        || name.ends_with(".b_c")
        || name.ends_with(".gate"))
}

/// AdamW state: first/second moment per parameter plus the step counter.
pub struct AdamW<T: Scalar> {
    pub cfg: AdamWConfig,
    step: u64,
    lr: f64,
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            lr: 0.0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Start an optimizer step at the given learning rate.
    pub fn begin_step(&mut self, lr: f64) {
        self.step += 1;
        self.lr = lr;
    }

    /// Bias-corrected AdamW update for one parameter. `grad` of `None`
    /// stands for an all-zero gradient (a branch skipped by stochastic
    /// depth): moments decay and decoupled weight decay still applies.
    pub fn update(&mut self, name: &str, param: &mut Tensor<T>, grad: Option<&[T]>) -> Result<()> {
        debug_assert!(self.step > 0, "call begin_step before update");
        let n = param.numel();
        if let Some(g) = grad {
            if g.len() != n {
                return Err(Error::Shape(format!(
                    "gradient for '{name}' has {} elements, parameter has {n}",
                    g.len()
                )));
            }
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient for parameter '{name}' contains {bad}"
                )));
            }
        }
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - self.cfg.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - self.cfg.beta2.powi(self.step as i32));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.cfg.eps);
        let decay = if decay_applies(name) {
            T::from_f64(self.lr * self.cfg.weight_decay)
        } else {
            T::zero()
        };
        let data = param.data_mut();
        for i in 0..n {
            let g = grad.map_or(T::zero(), |g| g[i]);
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            // decoupled decay first, then the Adam step
            data[i] = data[i] - decay * data[i];
            data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Linear warmup into a cosine decay.
#[derive(Debug, Clone)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub floor_lr: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup ({}) cannot exceed total steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Learning rate at `step`. During warmup the rate climbs linearly from
/// `base/warmup`; afterwards it follows `floor + (base-floor) * (1 +
/// cos(pi * progress)) / 2` down to the floor at `total_steps`.
pub fn cosine_lr(step: usize, s: &Schedule) -> f64 {
    if s.warmup_steps > 0 && step < s.warmup_steps {
        return s.base_lr * (step + 1) as f64 / s.warmup_steps as f64;
    }
    if s.total_steps <= s.warmup_steps {
        return s.base_lr;
    }
    let progress =
        (step - s.warmup_steps) as f64 / (s.total_steps - s.warmup_steps) as f64;
    let progress = progress.min(1.0);
    s.floor_lr + (s.base_lr - s.floor_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> Schedule {
        Schedule {
            base_lr: 0.1,
            warmup_steps: 10,
            total_steps: 110,
            floor_lr: 0.001,
        }
    }

    #[test]
    fn warmup_and_endpoints() {
        let s = sched();
        assert!((cosine_lr(0, &s) - 0.01).abs() < 1e-15);
        assert!((cosine_lr(10, &s) - 0.1).abs() < 1e-15);
        assert!((cosine_lr(110, &s) - 0.001).abs() < 1e-15);
        // halfway through the decay: cos(pi/2) = 0
        assert!((cosine_lr(60, &s) - (0.1 + 0.001) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn monotone_nonincreasing_after_warmup() {
        let s = sched();
        let mut prev = f64::INFINITY;
        for step in s.warmup_steps..=s.total_steps {
            let lr = cosine_lr(step, &s);
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }

    #[test]
    fn zero_grads_and_zero_decay_leave_params_alone() {
        let mut opt = AdamW::<f64>::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let mut p = Tensor::full(&[3], 1.5);
        opt.begin_step(0.1);
        opt.update("w.weight", &mut p, Some(&[0.0, 0.0, 0.0])).unwrap();
        assert_eq!(p.data(), &[1.5, 1.5, 1.5]);
    }

    #[test]
    fn first_step_closed_form() {
        // One scalar, g = 1: m_hat = 1, v_hat = 1, delta = -lr / (1 + eps).
        let mut opt = AdamW::<f64>::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let mut p = Tensor::full(&[1], 0.0);
        opt.begin_step(0.1);
        opt.update("w.weight", &mut p, Some(&[1.0])).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-12);
        assert!((p.data()[0] + 0.1).abs() < 1e-6);
    }

    /// Ten steps on a quadratic against an independently written scalar
    /// AdamW. The reference carries its own bias-correction algebra
    /// (explicit running powers) rather than reusing the implementation's.
    #[test]
    fn ten_step_trajectory_matches_scalar_reference() {
        let (b1, b2, eps, lr, wd) = (0.9, 0.999, 1e-8, 0.05, 0.01);
        let mut opt = AdamW::<f64>::new(AdamWConfig {
            beta1: b1,
            beta2: b2,
            eps,
            weight_decay: wd,
        });
        let mut p = Tensor::full(&[1], 2.0);

        let mut x = 2.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let (mut b1p, mut b2p) = (1.0f64, 1.0f64);
        for _ in 0..10 {
            // loss = 0.5 * x^2, gradient = x (evaluated pre-update)
            let g_ref = x;
            b1p *= b1;
            b2p *= b2;
            m = b1 * m + (1.0 - b1) * g_ref;
            v = b2 * v + (1.0 - b2) * g_ref * g_ref;
            let mh = m / (1.0 - b1p);
            let vh = v / (1.0 - b2p);
            x -= lr * wd * x;
            x -= lr * mh / (vh.sqrt() + eps);

            let g_impl = p.data()[0];
            opt.begin_step(lr);
            opt.update("w.weight", &mut p, Some(&[g_impl])).unwrap();
        }
        assert!((p.data()[0] - x).abs() < 1e-12);
    }

    #[test]
    fn decay_exclusions() {
        assert!(decay_applies("stages.0.blocks.0.morphfc.w_h"));
        assert!(decay_applies("head.weight"));
        assert!(!decay_applies("head.bias"));
        assert!(!decay_applies("stages.0.blocks.0.norm_s.gamma"));
        assert!(!decay_applies("stages.0.blocks.0.norm_s.beta"));
        assert!(!decay_applies("stages.0.blocks.0.morphfc.b_c"));
        assert!(!decay_applies("stages.0.blocks.0.morphfc.gate"));
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut opt = AdamW::<f64>::new(AdamWConfig::default());
        let mut p = Tensor::full(&[1], 1.0);
        opt.begin_step(0.1);
        let err = opt.update("stages.0.blocks.1.morphfc.w_v", &mut p, Some(&[f64::NAN]));
        match err {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("morphfc.w_v")),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}
