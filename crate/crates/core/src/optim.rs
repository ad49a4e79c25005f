//! AdamW with a linear-warmup cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, Parameter};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_fraction: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr", "must be positive"));
        }
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !in_unit(self.betas.0) || !in_unit(self.betas.1) {
            return Err(Error::config("betas", "both must lie in (0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("warmup_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then cosine decay to zero at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, total_steps: u64, warmup_fraction: f64) -> Self {
        let warmup_steps = (warmup_fraction * total_steps as f64).round() as u64;
        Self {
            base_lr,
            total_steps,
            warmup_steps: warmup_steps.min(total_steps),
        }
    }

    /// Learning rate used by the `step`-th update (1-based).
    pub fn lr(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.base_lr;
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.base_lr * 0.5 * (1.0 + (PI * progress).cos())
    }
}

#[derive(Clone, Debug)]
struct Moments {
    first: Tensor,
    second: Tensor,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    config: OptimizerConfig,
    schedule: CosineSchedule,
    step_count: u64,
    moments: BTreeMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(config: OptimizerConfig, total_steps: u64) -> Result<Self> {
        config.validate()?;
        if total_steps == 0 {
            return Err(Error::invalid("total_steps must be positive"));
        }
        let schedule = CosineSchedule::new(config.base_lr, total_steps, config.warmup_fraction);
        Ok(Self {
            config,
            schedule,
            step_count: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn schedule(&self) -> &CosineSchedule {
        &self.schedule
    }

    /// Learning rate the next call to [`AdamW::step`] will use.
    pub fn next_lr(&self) -> f64 {
        self.schedule.lr(self.step_count + 1)
    }

    /// One update over `params`. Frozen parameters are skipped untouched;
    /// every trainable one must carry a gradient, which is cleared.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a mut Parameter>,
    {
        let params: Vec<&mut Parameter> = params.into_iter().filter(|p| p.trainable).collect();
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGradient(p.id().raw()));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let lr = self.schedule.lr(self.step_count);
        let (b1, b2) = self.config.betas;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let wd = self.config.weight_decay;
        let eps = self.config.eps;

        for p in params {
            let grad = p.grad.take().expect("checked above");
            let m = self.moments.entry(p.id()).or_insert_with(|| Moments {
                first: Tensor::zeros(grad.shape()),
                second: Tensor::zeros(grad.shape()),
            });
            let value = p.value_mut();
            let data = value.data_mut();
            let m1 = m.first.data_mut();
            let m2 = m.second.data_mut();
            for (i, &g) in grad.data().iter().enumerate() {
                m1[i] = b1 * m1[i] + (1.0 - b1) * g;
                m2[i] = b2 * m2[i] + (1.0 - b2) * g * g;
                let mhat = m1[i] / bc1;
                let vhat = m2[i] / bc2;
                data[i] -= lr * wd * data[i];
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            if !value.is_finite() {
                return Err(Error::NonFinite("optimizer step".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_midpoint() {
        let s = CosineSchedule::new(1e-4, 100, 0.1);
        assert_eq!(s.warmup_steps, 10);
        assert!((s.lr(5) - 5e-5).abs() < 1e-20);
    }

    #[test]
    fn cosine_endpoint_is_zero() {
        let s = CosineSchedule::new(1e-4, 100, 0.1);
        assert!(s.lr(100).abs() < 1e-20);
        assert!(s.lr(150).abs() < 1e-20);
    }

    #[test]
    fn schedule_is_continuous_at_warmup_boundary() {
        let s = CosineSchedule::new(1e-4, 1000, 0.1);
        let w = s.warmup_steps;
        let warm = s.base_lr * w as f64 / w as f64;
        let progress = 0.0_f64;
        let cos = s.base_lr * 0.5 * (1.0 + (PI * progress).cos());
        assert!((warm - cos).abs() < 1e-12);
        assert!((s.lr(w) - s.lr(w + 1)).abs() < 1e-4 * 1e-5);
    }

    #[test]
    fn lr_never_exceeds_base() {
        let s = CosineSchedule::new(3e-3, 257, 0.1);
        for step in 0..=300 {
            let lr = s.lr(step);
            assert!((0.0..=3e-3).contains(&lr), "step {step}: {lr}");
        }
    }

    #[test]
    fn zero_grad_zero_decay_leaves_param() {
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, 10).unwrap();
        let mut p = Parameter::new(Tensor::scalar(1.0));
        p.grad = Some(Tensor::scalar(0.0));
        opt.step([&mut p]).unwrap();
        assert_eq!(p.value().item(), 1.0);
        assert!(p.grad.is_none());
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut opt = AdamW::new(OptimizerConfig::default(), 10).unwrap();
        let mut p = Parameter::new(Tensor::scalar(1.0));
        assert!(matches!(opt.step([&mut p]), Err(Error::MissingGradient(_))));
    }

    #[test]
    fn frozen_params_are_bit_identical() {
        let mut opt = AdamW::new(OptimizerConfig::default(), 10).unwrap();
        let mut frozen = Parameter::frozen(Tensor::row(&[0.3, -0.7]));
        frozen.grad = Some(Tensor::row(&[1.0, 1.0]));
        let before = frozen.value().clone();
        let mut live = Parameter::new(Tensor::row(&[0.3, -0.7]));
        live.grad = Some(Tensor::row(&[1.0, 1.0]));
        opt.step([&mut frozen, &mut live]).unwrap();
        assert_eq!(frozen.value(), &before);
        assert_ne!(live.value(), &before);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // With bias correction the first Adam direction is g/(|g|+eps).
        let cfg = OptimizerConfig {
            base_lr: 0.1,
            warmup_fraction: 0.0,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, 4).unwrap();
        let mut p = Parameter::new(Tensor::scalar(2.0));
        p.grad = Some(Tensor::scalar(3.0));
        let lr = opt.next_lr();
        opt.step([&mut p]).unwrap();
        let decayed = 2.0 - lr * 0.5 * 2.0;
        let expected = decayed - lr * 3.0 / (3.0 + 1e-8);
        assert!((p.value().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = OptimizerConfig {
            base_lr: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, 500).unwrap();
        let mut p = Parameter::new(Tensor::vector(&[3.0, -2.0]));
        for _ in 0..500 {
            let g = p.value().scale(2.0);
            p.grad = Some(g);
            opt.step([&mut p]).unwrap();
        }
        assert!(p.value().norm() < 1e-2, "{:?}", p.value());
    }
}
