use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    /// Adam with weight decay folded into the gradient (L2 penalty).
    Adam,
    /// Adam with decoupled weight decay.
    Adamw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    /// Cosine annealing from `lr0` down to zero at `total_steps`.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub lr0: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Schedule,
    /// Length of the annealing horizon; ignored for a constant schedule.
    /// Zero means "set by the trainer from the number of updates".
    pub total_steps: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            algorithm: Algorithm::Adamw,
            lr0: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: Schedule::Constant,
            total_steps: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config("lr0", "must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay", "must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas", "must lie in [0, 1)"));
        }
        if self.eps <= 0.0 {
            return Err(Error::config("eps", "must be positive"));
        }
        Ok(())
    }

    /// Learning rate for a zero-based step index.
    pub fn learning_rate(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr0,
            Schedule::Cosine => {
                if self.total_steps == 0 {
                    return self.lr0;
                }
                let progress = step.min(self.total_steps) as f64 / self.total_steps as f64;
                0.5 * self.lr0 * (1.0 + (PI * progress).cos())
            }
        }
    }
}

/// Adam moment buffers for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    step: usize,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, num_params: usize) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            first: vec![0.0; num_params],
            second: vec![0.0; num_params],
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update in place. A non-finite gradient is refused and
    /// leaves both parameters and moments untouched.
    pub fn step_flat(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::dim("optimizer step", self.first.len(), grads.len()));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("gradient at optimizer step {}", self.step)));
        }
        let c = &self.config;
        let lr = c.learning_rate(self.step);
        let t = (self.step + 1) as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for i in 0..params.len() {
            let mut g = grads[i];
            if c.algorithm == Algorithm::Adam {
                g += c.weight_decay * params[i];
            }
            self.first[i] = c.beta1 * self.first[i] + (1.0 - c.beta1) * g;
            self.second[i] = c.beta2 * self.second[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.first[i] / bias1;
            let v_hat = self.second[i] / bias2;
            if c.algorithm == Algorithm::Adamw {
                params[i] -= lr * c.weight_decay * params[i];
            }
            params[i] -= lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        self.step += 1;
        Ok(())
    }

    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let mut flat = params.to_flat();
        self.step_flat(&mut flat, &grads.to_flat())?;
        params.set_flat(&flat)
    }
}

pub fn global_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm<P: ParamSet>(grads: &mut P, max_norm: f64) -> f64 {
    let mut flat = grads.to_flat();
    let norm = global_norm(&flat);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        flat.iter_mut().for_each(|g| *g *= scale);
        grads.set_flat(&flat).expect("same layout");
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Linear;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut opt = Optimizer::new(OptimizerConfig::default(), 3).unwrap();
        let mut p = vec![1.0, -2.0, 0.5];
        opt.step_flat(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn positive_gradient_decreases_parameter() {
        let cfg = OptimizerConfig {
            lr0: 0.1,
            ..Default::default()
        };
        let mut opt = Optimizer::new(cfg, 1).unwrap();
        let mut p = vec![1.0];
        opt.step_flat(&mut p, &[1.0]).unwrap();
        assert!(p[0] < 1.0);
        // first Adam step moves by ~lr
        assert_abs_diff_eq!(p[0], 0.9, epsilon = 1e-6);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = OptimizerConfig {
            lr0: 4e-4,
            schedule: Schedule::Cosine,
            total_steps: 100,
            ..Default::default()
        };
        assert_eq!(cfg.learning_rate(0), 4e-4);
        assert_abs_diff_eq!(cfg.learning_rate(100), 0.0, epsilon = 1e-18);
        assert_abs_diff_eq!(cfg.learning_rate(50), 2e-4, epsilon = 1e-15);
        assert!(cfg.learning_rate(30) > cfg.learning_rate(31));
    }

    #[test]
    fn non_finite_gradient_is_refused() {
        let mut opt = Optimizer::new(OptimizerConfig::default(), 2).unwrap();
        let mut p = vec![1.0, 1.0];
        assert!(matches!(
            opt.step_flat(&mut p, &[f64::NAN, 0.0]),
            Err(Error::Numeric(_))
        ));
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn invalid_learning_rate_rejected() {
        let cfg = OptimizerConfig {
            lr0: 0.0,
            ..Default::default()
        };
        assert!(matches!(Optimizer::new(cfg, 1), Err(Error::Config { .. })));
    }

    #[test]
    fn steps_are_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lin = Linear::new(&mut rng, 4, 3);
        let mut g = lin.clone();
        g.weight.mapv_inplace(|v| v * 0.7 - 0.1);
        let cfg = OptimizerConfig {
            weight_decay: 1e-3,
            schedule: Schedule::Cosine,
            total_steps: 10,
            ..Default::default()
        };
        let run = || {
            let mut p = lin.clone();
            let mut opt = Optimizer::new(cfg.clone(), p.num_params()).unwrap();
            for _ in 0..5 {
                opt.step(&mut p, &g).unwrap();
            }
            p.to_flat()
        };
        let a: Vec<u64> = run().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = run().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Linear::new(&mut rng, 6, 4);
        g.weight.mapv_inplace(|v| v * 50.0);
        let before = clip_global_norm(&mut g, 0.5);
        assert!(before > 0.5);
        assert_abs_diff_eq!(global_norm(&g.to_flat()), 0.5, epsilon = 1e-9);
    }
}
