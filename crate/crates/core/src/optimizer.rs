//! AdamW with a linear-warmup, cosine-annealed learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Fraction of `total_steps` spent in linear warmup.
    pub warmup_fraction: f64,
    pub total_steps: usize,
}

impl OptimizerConfig {
    /// Values of the reference CLIP recipe (lr 5e-4, betas 0.9/0.99,
    /// eps 1e-8, weight decay 0.2, 20% warmup).
    pub fn reference(total_steps: usize) -> Self {
        Self {
            base_lr: 5e-4,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            weight_decay: 0.2,
            warmup_fraction: 0.2,
            total_steps,
        }
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).round() as usize
    }

    /// Learning rate at optimizer step `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let step = step.min(self.total_steps);
        let warmup = self.warmup_steps();
        if step < warmup {
            return self.base_lr * step as f64 / warmup as f64;
        }
        let span = self.total_steps - warmup;
        if span == 0 {
            return self.base_lr;
        }
        let progress = (step - warmup) as f64 / span as f64;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Moment estimates for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: usize,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, num_params: usize) -> Self {
        Self {
            config,
            step: 0,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.step)
    }

    /// One decoupled-weight-decay Adam update at the scheduled rate.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        let lr = self.current_lr();
        self.step_with_lr(params, grads, lr)
    }

    /// Same as [`step`](Self::step) but with an explicit learning rate.
    pub fn step_with_lr(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        let n = self.first_moment.len();
        if params.len() != n || grads.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "optimizer tracks {n} parameters, got {} params and {} grads",
                params.len(),
                grads.len()
            )));
        }
        if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonfiniteGradient(k));
        }
        let c = self.config;
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            *p -= lr * c.weight_decay * *p;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            if m_hat != 0.0 {
                *p -= lr * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(total: usize) -> OptimizerConfig {
        OptimizerConfig {
            base_lr: 0.01,
            ..OptimizerConfig::reference(total)
        }
    }

    #[test]
    fn schedule_endpoints() {
        let c = cfg(100);
        assert_eq!(c.lr_at(0), 0.0);
        assert_eq!(c.warmup_steps(), 20);
        assert_eq!(c.lr_at(20), 0.01);
        assert!(c.lr_at(100).abs() < 1e-12);
        assert!((c.lr_at(10) - 0.005).abs() < 1e-15);
        // Midpoint of the cosine span.
        assert!((c.lr_at(60) - 0.005).abs() < 1e-12);
    }

    #[test]
    fn schedule_continuous_at_warmup_boundary() {
        let c = cfg(1000);
        let w = c.warmup_steps();
        let left = c.base_lr * (w as f64) / (w as f64);
        assert!((left - c.lr_at(w)).abs() < 1e-12);
        assert!((c.lr_at(w - 1) - c.lr_at(w)).abs() < 2.0 * c.base_lr / w as f64);
        assert!((c.lr_at(w + 1) - c.base_lr).abs() < 1e-4 * c.base_lr);
    }

    #[test]
    fn schedule_without_warmup_or_span() {
        let c = OptimizerConfig {
            warmup_fraction: 0.0,
            ..cfg(10)
        };
        assert_eq!(c.lr_at(0), 0.01);
        let c = OptimizerConfig {
            warmup_fraction: 1.0,
            ..cfg(10)
        };
        assert_eq!(c.lr_at(10), 0.01);
    }

    #[test]
    fn hand_evaluated_step() {
        let c = OptimizerConfig {
            base_lr: 0.1,
            beta1: 0.0,
            beta2: 0.0,
            epsilon: 0.0,
            weight_decay: 0.0,
            warmup_fraction: 0.0,
            total_steps: 10,
        };
        let mut s = OptimizerState::new(c, 1);
        let mut p = [1.0];
        s.step_with_lr(&mut p, &[1.0], 0.1).unwrap();
        assert_eq!(p[0], 0.9);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let c = OptimizerConfig {
            weight_decay: 0.0,
            warmup_fraction: 0.0,
            ..cfg(10)
        };
        let mut s = OptimizerState::new(c, 3);
        let mut p = [1.0, -2.0, 0.5];
        s.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, [1.0, -2.0, 0.5]);
        assert_eq!(s.first_moment, vec![0.0; 3]);
        assert_eq!(s.second_moment, vec![0.0; 3]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn weight_decay_shrinks_geometrically() {
        let c = OptimizerConfig {
            weight_decay: 0.2,
            ..cfg(10)
        };
        let mut s = OptimizerState::new(c, 1);
        let mut p = [2.0];
        let lr = 0.05;
        for k in 1..=5 {
            s.step_with_lr(&mut p, &[0.0], lr).unwrap();
            let expected = 2.0 * (1.0 - lr * 0.2f64).powi(k);
            assert!((p[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut s = OptimizerState::new(cfg(10), 2);
        let mut p = [0.0; 2];
        assert!(matches!(
            s.step(&mut p, &[0.0, f64::NAN]),
            Err(Error::NonfiniteGradient(1))
        ));
        assert!(matches!(s.step(&mut p, &[0.0]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn quadratic_loss_decreases_after_warmup() {
        // f(θ) = (θ − 3)², gradient 2(θ − 3).
        let c = OptimizerConfig {
            base_lr: 0.01,
            weight_decay: 0.0,
            ..OptimizerConfig::reference(200)
        };
        let mut s = OptimizerState::new(c, 1);
        let mut p = [0.0];
        let mut prev = f64::INFINITY;
        for step in 0..200 {
            let g = 2.0 * (p[0] - 3.0);
            s.step(&mut p, &[g]).unwrap();
            let loss = (p[0] - 3.0f64).powi(2);
            if step > c.warmup_steps() {
                assert!(loss <= prev, "step {step}: {loss} > {prev}");
            }
            prev = loss;
        }
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut s = OptimizerState::new(cfg(50), 2);
            let mut p = [0.3, -0.7];
            for i in 0..50 {
                let g = [p[0] * 1.5 + i as f64 * 0.01, (p[1] - 1.0).sin()];
                s.step(&mut p, &g).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
