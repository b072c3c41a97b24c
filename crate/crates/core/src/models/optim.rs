//! Momentum SGD for segmenters, Adam for discriminators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    MomentumSgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// Optimizer hyper-parameters plus accumulators shaped like the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub steps: u64,
    /// Velocity (SGD) or first moment (Adam).
    pub first: Vec<f64>,
    /// Second moment (Adam only; empty for SGD).
    pub second: Vec<f64>,
}

impl OptimizerState {
    pub fn momentum_sgd(num_params: usize, learning_rate: f64, momentum: f64) -> Self {
        Self {
            kind: OptimizerKind::MomentumSgd { momentum },
            learning_rate,
            steps: 0,
            first: vec![0.0; num_params],
            second: Vec::new(),
        }
    }

    /// Adam with the betas customary for segmentation discriminators.
    pub fn adam(num_params: usize, learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.99,
                eps: 1e-8,
            },
            learning_rate,
            steps: 0,
            first: vec![0.0; num_params],
            second: vec![0.0; num_params],
        }
    }

    pub fn num_params(&self) -> usize {
        self.first.len()
    }

    /// Applies one update. A non-finite gradient rejects the whole update and
    /// leaves both parameters and accumulators untouched.
    pub fn apply(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer holds {} accumulators, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient {} at parameter {i}; update rejected",
                grads[i]
            )));
        }
        self.steps += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::MomentumSgd { momentum } => {
                for ((p, v), g) in params.iter_mut().zip(&mut self.first).zip(grads) {
                    *v = momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, m), v), g) in params
                    .iter_mut()
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                    .zip(grads)
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_step() {
        let mut opt = OptimizerState::momentum_sgd(1, 0.1, 0.0);
        let mut p = [1.0];
        opt.apply(&mut p, &[2.0]).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_decays_velocity() {
        let mut opt = OptimizerState::momentum_sgd(1, 0.1, 0.9);
        let mut p = [1.0];
        opt.apply(&mut p, &[1.0]).unwrap();
        let before = p[0];
        opt.apply(&mut p, &[0.0]).unwrap();
        assert!((opt.first[0] - 0.9).abs() < 1e-15);
        assert!((p[0] - (before - 0.09)).abs() < 1e-15);

        let mut adam = OptimizerState::adam(1, 0.1);
        let mut q = [3.0];
        adam.apply(&mut q, &[0.0]).unwrap();
        assert_eq!(q[0], 3.0);
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let mut opt = OptimizerState::momentum_sgd(2, 0.1, 0.9);
        let mut p = [1.0, 2.0];
        assert!(opt.apply(&mut p, &[0.5, f64::NAN]).is_err());
        assert_eq!(p, [1.0, 2.0]);
        assert_eq!(opt.first, vec![0.0, 0.0]);
        assert_eq!(opt.steps, 0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut opt = OptimizerState::adam(2, 0.1);
        assert!(opt.apply(&mut [1.0], &[1.0]).is_err());
    }

    /// f(p) = Σ a_i (p_i − c_i)² has its minimum at p = c.
    #[test]
    fn quadratic_bowl_converges() {
        let a = [1.0, 3.0, 0.5];
        let c = [2.0, -1.0, 0.25];
        let grad = |p: &[f64]| -> Vec<f64> { (0..3).map(|i| 2.0 * a[i] * (p[i] - c[i])).collect() };
        for mut opt in [OptimizerState::momentum_sgd(3, 0.05, 0.9), OptimizerState::adam(3, 0.02)] {
            let mut p = vec![0.0; 3];
            for _ in 0..1000 {
                let g = grad(&p);
                opt.apply(&mut p, &g).unwrap();
            }
            for i in 0..3 {
                assert!((p[i] - c[i]).abs() < 1e-3, "{:?}: {p:?}", opt.kind);
            }
        }
    }

    #[test]
    fn clipping_caps_the_norm_only_when_exceeded() {
        let mut g = [3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g, [3.0, 4.0]);
        clip_grad_norm(&mut g, 1.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }
}
