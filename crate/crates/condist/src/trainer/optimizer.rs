//! Adaptive-moment optimizer with global gradient-norm clipping.

use crate::{Error, Result};

/// First/second moment accumulators and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Update hyperparameters, independent of parameter count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Added to the root second moment for stability.
    pub eps: f64,
    /// Global gradient-norm ceiling; gradients above it are rescaled onto
    /// it before entering the moments. Non-positive disables clipping.
    pub clip_norm: f64,
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {}", self.learning_rate)));
        }
        for (what, b) in [("first", self.beta1), ("second", self.beta2)] {
            if !(b.is_finite() && (0.0..1.0).contains(&b)) {
                return Err(Error::InvalidArgument(format!("{what} moment constant {b}")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::InvalidArgument(format!("optimizer epsilon {}", self.eps)));
        }
        Ok(())
    }
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Adam { m: vec![0.0; n_params], v: vec![0.0; n_params], step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    #[cfg(test)]
    pub(crate) fn first_moments(&self) -> &[f64] {
        &self.m
    }

    /// Applies one update in place and returns the pre-clip global
    /// gradient norm.
    pub fn step(&mut self, theta: &mut [f64], grads: &[f64], cfg: &AdamConfig) -> Result<f64> {
        cfg.validate()?;
        if theta.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer built for {} parameters, got {}/{}",
                self.m.len(),
                theta.len(),
                grads.len()
            )));
        }
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite { what: "gradient norm", value: norm });
        }
        let scale = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            cfg.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let bias1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bias2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for i in 0..theta.len() {
            let g = grads[i] * scale;
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            theta[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> AdamConfig {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 3.125e-4,
            clip_norm: 10.0,
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut opt = Adam::new(3);
        let mut theta = vec![1.0, -2.0, 0.5];
        let before = theta.clone();
        for _ in 0..5 {
            opt.step(&mut theta, &[0.0, 0.0, 0.0], &cfg()).unwrap();
        }
        assert_eq!(theta, before);
        assert_eq!(opt.steps_taken(), 5);
    }

    #[test]
    fn clipping_rescales_before_the_moments() {
        let mut opt = Adam::new(2);
        let mut theta = vec![0.0, 0.0];
        // Norm 20 against a ceiling of 10: each component halves.
        let grads = vec![12.0, 16.0];
        let norm = opt.step(&mut theta, &grads, &cfg()).unwrap();
        assert_eq!(norm, 20.0);
        assert!((opt.first_moments()[0] - 0.1 * 6.0).abs() <= 1e-15);
        assert!((opt.first_moments()[1] - 0.1 * 8.0).abs() <= 1e-15);
    }

    #[test]
    fn small_gradients_pass_unclipped() {
        let mut opt = Adam::new(2);
        let mut theta = vec![0.0, 0.0];
        let norm = opt.step(&mut theta, &[3.0, 4.0], &cfg()).unwrap();
        assert_eq!(norm, 5.0);
        assert!((opt.first_moments()[0] - 0.3).abs() <= 1e-15);
    }

    #[test]
    fn first_step_moves_against_the_gradient_at_learning_rate_scale() {
        let mut opt = Adam::new(1);
        let mut theta = vec![0.0];
        opt.step(&mut theta, &[2.0], &cfg()).unwrap();
        // Bias correction makes the first step lr * g/(|g| + eps)-sized.
        let expected = -1e-3 * 2.0 / (2.0 + 3.125e-4);
        assert!((theta[0] - expected).abs() <= 1e-12, "{} vs {expected}", theta[0]);
    }

    #[test]
    fn updates_are_deterministic() {
        let run = || {
            let mut opt = Adam::new(4);
            let mut theta = vec![0.1, 0.2, 0.3, 0.4];
            for k in 0..10 {
                let g: Vec<f64> = (0..4).map(|i| ((i + k) as f64).sin()).collect();
                opt.step(&mut theta, &g, &cfg()).unwrap();
            }
            theta
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn rejects_bad_shapes_and_settings() {
        let mut opt = Adam::new(2);
        let mut theta = vec![0.0; 3];
        assert!(opt.step(&mut theta, &[0.0; 3], &cfg()).is_err());
        let mut bad = cfg();
        bad.learning_rate = -1.0;
        assert!(opt.step(&mut vec![0.0; 2], &[0.0; 2], &bad).is_err());
    }
}
