//! AdamW and the warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{Module, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, grad_clip: Some(1.0) }
    }
}

/// Linear warmup from 0 to `peak`, then cosine decay to 0 at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    /// Warmup covers `ceil(warmup_fraction * total_steps)` steps (at least one).
    pub fn new(peak: f64, warmup_fraction: f64, total_steps: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&warmup_fraction) {
            return Err(invalid(format!("warmup fraction {warmup_fraction} outside [0, 1)")));
        }
        if !(peak.is_finite() && peak >= 0.0) {
            return Err(invalid(format!("peak learning rate {peak} must be finite and non-negative")));
        }
        let warmup_steps = ((warmup_fraction * total_steps as f64).ceil() as u64).max(1);
        Ok(Self { peak, warmup_steps, total_steps })
    }

    pub fn at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return if self.total_steps <= self.warmup_steps { self.peak } else { 0.0 };
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Adam with decoupled weight decay. Moment buffers follow the parameter
/// order of the module it is stepped with; decay applies to matrices only.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub steps: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, steps: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Applies one update to every parameter whose name passes `trainable`.
    pub fn step<M: Module<T>>(
        &mut self,
        params: &mut M,
        grads: &M,
        lr: f64,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<StepStats> {
        let g = grads.named_params("");
        let mut p = params.named_params_mut("");
        if g.len() != p.len() {
            return Err(Error::ShapeMismatch { expected: format!("{} gradient tensors", p.len()), got: g.len().to_string() });
        }
        if self.m.is_empty() {
            self.m = p.iter().map(|(_, t)| Tensor::zeros(&t.shape)).collect();
            self.v = self.m.clone();
        } else if self.m.len() != p.len() || self.m.iter().zip(&p).any(|(m, (_, t))| m.shape != t.shape) {
            return Err(invalid("optimizer state does not match the parameter layout"));
        }

        let mut sq = 0.0;
        for ((name, gt), _) in g.iter().zip(&p) {
            if trainable(name) {
                sq += gt.data.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>();
            }
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.steps, loss: grad_norm });
        }
        let scale = match self.config.grad_clip {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };

        self.steps += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        let (b1, b2, eps, scale) = (T::lit(c.beta1), T::lit(c.beta2), T::lit(c.eps), T::lit(scale));
        let (one, step_size, bc2_sqrt) = (T::one(), T::lit(lr / bc1), T::lit(bc2.sqrt()));
        let decay = T::lit(1.0 - lr * c.weight_decay);
        for (i, ((name, pt), (_, gt))) in p.iter_mut().zip(&g).enumerate() {
            if !trainable(name) {
                continue;
            }
            let apply_decay = pt.shape.len() >= 2;
            let (m, v) = (&mut self.m[i].data, &mut self.v[i].data);
            for j in 0..pt.data.len() {
                let gj = gt.data[j] * scale;
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mut w = pt.data[j];
                if apply_decay {
                    w = w * decay;
                }
                pt.data[j] = w - step_size * m[j] / (v[j].sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(StepStats { grad_norm, clipped: scale < one })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;

    #[test]
    fn schedule_shape() {
        let s = LrSchedule::new(2e-4, 0.04, 1000).unwrap();
        assert_eq!(s.warmup_steps, 40);
        assert_eq!(s.at(0), 0.0);
        assert!((s.at(40) - 2e-4).abs() <= 1e-9);
        assert!((s.at(20) - 1e-4).abs() < 1e-15);
        assert!(s.at(999) < 1e-9);
        assert_eq!(s.at(1000), 0.0);
        for t in 40..999 {
            assert!(s.at(t + 1) <= s.at(t));
        }
    }

    #[test]
    fn schedule_rejects_bad_fraction() {
        assert!(LrSchedule::new(1e-3, 1.0, 10).is_err());
        assert!(LrSchedule::new(1e-3, -0.1, 10).is_err());
    }

    #[test]
    fn tiny_schedule_has_one_warmup_step() {
        let s = LrSchedule::new(1.0, 0.04, 5).unwrap();
        assert_eq!(s.warmup_steps, 1);
        assert_eq!(s.at(1), 1.0);
    }

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        let mut p = Linear::<f64>::zeros(2, 2);
        p.w.data = vec![1.0, -1.0, 0.5, 2.0];
        let mut g = p.zeroed();
        g.w.data = vec![0.3, -0.2, 0.0, 4.0];
        g.b.data = vec![1.0, -1.0];
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, grad_clip: None, ..Default::default() });
        let before = p.clone();
        opt.step(&mut p, &g, 0.1, |_| true).unwrap();
        for (j, (&a, &b)) in p.w.data.iter().zip(&before.w.data).enumerate() {
            let expect = if g.w.data[j] == 0.0 { 0.0 } else { -0.1 * g.w.data[j].signum() };
            assert!((a - b - expect).abs() < 1e-6, "{j}: {a} {b}");
        }
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut p = Linear::<f64>::zeros(2, 2);
        let mut g = p.zeroed();
        g.w.fill(1.0);
        g.b.fill(1.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut p, &g, 0.1, |n| n.ends_with(".b")).unwrap();
        assert!(p.w.data.iter().all(|&x| x == 0.0));
        assert!(p.b.data.iter().all(|&x| x != 0.0));
    }

    #[test]
    fn clipping_reports_norm() {
        let mut p = Linear::<f64>::zeros(1, 1);
        let mut g = p.zeroed();
        g.w.data = vec![3.0];
        g.b.data = vec![4.0];
        let mut opt = AdamW::new(AdamWConfig::default());
        let stats = opt.step(&mut p, &g, 0.1, |_| true).unwrap();
        assert_eq!(stats.grad_norm, 5.0);
        assert!(stats.clipped);
    }
}
