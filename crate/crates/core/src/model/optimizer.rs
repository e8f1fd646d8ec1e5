//! SGD with momentum, Nesterov option, and L2 weight decay, plus the two
//! learning-rate schedules the trainers use.

use serde::{Deserialize, Serialize};

use super::{scalar, Scalar};
use crate::error::{Error, Result};

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if self.nesterov && self.momentum == 0.0 {
            return Err(Error::config("nesterov requires momentum > 0"));
        }
        Ok(())
    }
}

/// Mutable optimizer state: one momentum buffer entry per parameter.
#[derive(Debug, Clone)]
pub struct SgdState<F: Scalar> {
    pub velocity: Vec<F>,
    /// Number of steps taken; first step seeds the buffer with the raw
    /// gradient to match the reference semantics.
    pub steps: u64,
}

impl<F: Scalar> SgdState<F> {
    pub fn new(num_params: usize) -> Self {
        Self {
            velocity: vec![F::zero(); num_params],
            steps: 0,
        }
    }

    /// One update: g ← grad + wd·θ; v ← μ·v + g; θ ← θ − lr·(g + μ·v) for
    /// Nesterov, θ ← θ − lr·v otherwise. Aborts on non-finite gradients.
    pub fn step(
        &mut self,
        config: &SgdConfig,
        lr: f64,
        params: &mut [F],
        grads: &[F],
    ) -> Result<()> {
        debug_assert_eq!(params.len(), grads.len());
        debug_assert_eq!(params.len(), self.velocity.len());
        let mu = scalar::<F>(config.momentum);
        let wd = scalar::<F>(config.weight_decay);
        let lr = scalar::<F>(lr);
        let first = self.steps == 0;
        for ((p, &g_raw), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if !g_raw.is_finite() {
                return Err(Error::invalid("non-finite gradient in optimizer step"));
            }
            let g = g_raw + wd * *p;
            if config.momentum == 0.0 {
                *p = *p - lr * g;
            } else {
                *v = if first { g } else { mu * *v + g };
                let d = if config.nesterov { g + mu * *v } else { *v };
                *p = *p - lr * d;
            }
        }
        self.steps += 1;
        Ok(())
    }
}

/// Learning-rate schedule evaluated per optimizer step or epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// lr(t) = lr₀ · ½(1 + cos(π·t/total)) over `total` steps.
    Cosine { total_steps: u64 },
    /// Multiply by `factor` when t/total crosses each milestone fraction.
    Piecewise {
        total_steps: u64,
        milestones: Vec<f64>,
        factor: f64,
    },
}

impl LrSchedule {
    pub fn at(&self, base_lr: f64, step: u64) -> f64 {
        match self {
            LrSchedule::Constant => base_lr,
            LrSchedule::Cosine { total_steps } => {
                let t = (step as f64 / (*total_steps).max(1) as f64).min(1.0);
                base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
            LrSchedule::Piecewise {
                total_steps,
                milestones,
                factor,
            } => {
                let t = step as f64 / (*total_steps).max(1) as f64;
                let crossed = milestones.iter().filter(|&&m| t >= m).count() as i32;
                base_lr * factor.powi(crossed)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn plain_sgd_step() {
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            nesterov: false,
            weight_decay: 0.0,
        };
        let mut state = SgdState::<f64>::new(2);
        let mut p = vec![1.0, -2.0];
        state.step(&cfg, 0.1, &mut p, &[0.5, -1.0]).unwrap();
        assert_abs_diff_eq!(p[0], 0.95, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], -1.9, epsilon = 1e-12);
    }

    #[test]
    fn momentum_accumulates() {
        let cfg = SgdConfig {
            lr: 1.0,
            momentum: 0.9,
            nesterov: false,
            weight_decay: 0.0,
        };
        let mut state = SgdState::<f64>::new(1);
        let mut p = vec![0.0];
        // step 1: v = g = 1 → p = -1
        state.step(&cfg, 1.0, &mut p, &[1.0]).unwrap();
        assert_abs_diff_eq!(p[0], -1.0, epsilon = 1e-12);
        // step 2: v = 0.9·1 + 1 = 1.9 → p = -2.9
        state.step(&cfg, 1.0, &mut p, &[1.0]).unwrap();
        assert_abs_diff_eq!(p[0], -2.9, epsilon = 1e-12);
    }

    #[test]
    fn weight_decay_pulls_to_zero() {
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            nesterov: false,
            weight_decay: 0.5,
        };
        let mut state = SgdState::<f64>::new(1);
        let mut p = vec![2.0];
        state.step(&cfg, 0.1, &mut p, &[0.0]).unwrap();
        // g = 0 + 0.5·2 = 1 → p = 2 − 0.1 = 1.9
        assert_abs_diff_eq!(p[0], 1.9, epsilon = 1e-12);
    }

    #[test]
    fn nonfinite_gradient_rejected() {
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            nesterov: false,
            weight_decay: 0.0,
        };
        let mut state = SgdState::<f64>::new(1);
        let mut p = vec![0.0];
        assert!(state.step(&cfg, 0.1, &mut p, &[f64::NAN]).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = LrSchedule::Cosine { total_steps: 100 };
        assert_abs_diff_eq!(s.at(0.03, 0), 0.03, epsilon = 1e-12);
        assert_abs_diff_eq!(s.at(0.03, 50), 0.015, epsilon = 1e-12);
        assert!(s.at(0.03, 100) < 1e-12);
    }

    #[test]
    fn piecewise_schedule_milestones() {
        let s = LrSchedule::Piecewise {
            total_steps: 100,
            milestones: vec![0.5, 0.75],
            factor: 0.1,
        };
        assert_abs_diff_eq!(s.at(0.1, 49), 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(s.at(0.1, 50), 0.01, epsilon = 1e-12);
        assert_abs_diff_eq!(s.at(0.1, 75), 0.001, epsilon = 1e-12);
        assert_abs_diff_eq!(s.at(0.1, 99), 0.001, epsilon = 1e-12);
    }
}
