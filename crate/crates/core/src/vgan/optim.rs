//! Adam with bias correction and an optional linear learning-rate anneal.

use serde::{Deserialize, Serialize};

use crate::diffmath::Grad;

use super::TrainError;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One descent step on `params` for a loss with gradient `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &Grad, lr: f64) -> Result<(), TrainError> {
        let g = grad.values();
        if g.len() != params.len() || g.len() != self.m.len() {
            return Err(TrainError::Length {
                what: "gradient",
                expected: self.m.len(),
                got: g.len(),
            });
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut next = params.to_vec();
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            next[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
        // leave the parameters untouched when the step would corrupt them
        if next.iter().any(|p| !p.is_finite()) {
            return Err(TrainError::NonFinite("parameters after optimizer step".into()));
        }
        params.copy_from_slice(&next);
        Ok(())
    }
}

/// `lr * (1 - iter / total)` when annealing, else `lr`.
pub fn annealed_lr(lr: f64, iter: usize, total: usize, anneal: bool) -> f64 {
    if anneal && total > 0 {
        lr * (1.0 - iter as f64 / total as f64)
    } else {
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // after bias correction the first step is lr * g / (|g| + eps)
        let mut opt = Adam::new(2, 0.0, 0.9);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &Grad::new(vec![3.0, -0.5]).unwrap(), 0.1).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-8);
        assert!((p[1] + 0.9).abs() < 1e-8);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut opt = Adam::new(1, 0.0, 0.9);
        let mut p = vec![5.0];
        for _ in 0..2000 {
            let g = Grad::new(vec![2.0 * (p[0] - 2.0)]).unwrap();
            opt.step(&mut p, &g, 0.01).unwrap();
        }
        assert!((p[0] - 2.0).abs() < 1e-2);
    }

    #[test]
    fn anneal_schedule() {
        assert_eq!(annealed_lr(1.0, 0, 10, true), 1.0);
        assert_eq!(annealed_lr(1.0, 5, 10, true), 0.5);
        assert_eq!(annealed_lr(1.0, 5, 10, false), 1.0);
    }

    #[test]
    fn length_mismatch() {
        let mut opt = Adam::new(2, 0.0, 0.9);
        let mut p = vec![0.0; 2];
        assert!(opt.step(&mut p, &Grad::new(vec![1.0]).unwrap(), 0.1).is_err());
    }
}
