//! First/second-moment adaptive gradient descent (Adam) over a flat
//! parameter vector, with the standard bias correction.

use crate::{Error, Result};

/// Optimizer state: exponential moving averages of the gradient and its
/// square, one entry per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Adam {
        Adam { m: vec![0.0; n_params], v: vec![0.0; n_params], step: 0, lr, beta1, beta2, eps }
    }

    /// Steps `params` in place along the bias-corrected update direction.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer sized for {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic_bowl() {
        // f(x) = Σ ½·(x − t)², ∇f = x − t.
        let target = [3.0, -2.0, 0.5];
        let mut x = vec![0.0; 3];
        let mut adam = Adam::new(3, 0.05, 0.9, 0.999, 1e-8);
        for _ in 0..2000 {
            let g: Vec<f64> = x.iter().zip(&target).map(|(xi, ti)| xi - ti).collect();
            adam.step(&mut x, &g).unwrap();
        }
        for (xi, ti) in x.iter().zip(&target) {
            assert!((xi - ti).abs() < 1e-3, "converged to {xi}, want {ti}");
        }
    }

    #[test]
    fn first_step_moves_by_the_learning_rate() {
        // With bias correction the very first update is ±lr (up to eps).
        let mut x = vec![1.0];
        let mut adam = Adam::new(1, 0.01, 0.9, 0.999, 1e-12);
        adam.step(&mut x, &[42.0]).unwrap();
        assert!((x[0] - (1.0 - 0.01)).abs() < 1e-9, "first step {x:?}");
    }

    #[test]
    fn rejects_mismatched_lengths() {
        let mut adam = Adam::new(2, 0.01, 0.9, 0.999, 1e-8);
        let mut x = vec![0.0; 3];
        assert!(adam.step(&mut x, &[0.0; 2]).is_err());
    }
}
