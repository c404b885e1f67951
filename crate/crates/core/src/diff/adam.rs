use super::params::{Grads, ParamSet};
use super::Matrix;
use crate::error::{contract, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros = |p: &ParamSet| {
            p.ids()
                .map(|id| Matrix::zeros(p.get(id).rows(), p.get(id).cols()))
                .collect::<Vec<_>>()
        };
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(contract!(
                "adam: {} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                self.m.len()
            ));
        }
        for (id, g) in params.ids().zip(grads.iter()) {
            if g.shape() != params.get(id).shape() {
                return Err(contract!(
                    "adam: gradient shape {:?} for {} {:?}",
                    g.shape(),
                    params.name(id),
                    params.get(id).shape()
                ));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (id, g)) in params.ids().zip(grads.iter()).enumerate() {
            let p = params.get_mut(id).as_mut_slice();
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            for k in 0..p.len() {
                let gk = g.as_slice()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = ParamSet::new();
        p.add("w", Matrix::from_vec(1, 2, vec![0.3, -0.7]));
        let before = p.clone();
        let mut adam = Adam::new(&p, 1e-3);
        let g = p.zero_grads();
        adam.step(&mut p, &g).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut p = ParamSet::new();
        let id = p.add("w", Matrix::from_vec(1, 3, vec![1.0, 1.0, 1.0]));
        let mut adam = Adam::new(&p, 1e-3);
        let mut g = p.zero_grads();
        g.get_mut(id).as_mut_slice().copy_from_slice(&[5.0, -0.01, 123.0]);
        adam.step(&mut p, &g).unwrap();
        let w = p.get(id).as_slice();
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (1.0 + 1e-3)).abs() < 1e-6);
        assert!((w[2] - (1.0 - 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn mismatched_grads_rejected() {
        let mut p = ParamSet::new();
        p.add("w", Matrix::zeros(1, 2));
        let mut q = ParamSet::new();
        q.add("w", Matrix::zeros(2, 2));
        let mut adam = Adam::new(&p, 1e-3);
        assert!(adam.step(&mut p, &q.zero_grads()).is_err());
    }

    /// f(w) = (w0 - 3)^2 + 10 (w1 + 1)^2 with its analytic gradient.
    #[test]
    fn converges_on_quadratic() {
        let mut p = ParamSet::new();
        let w = p.add("w", Matrix::from_vec(1, 2, vec![0.0, 0.0]));
        let mut adam = Adam::new(&p, 0.1);
        let loss = |p: &ParamSet| {
            let v = p.get(w).as_slice();
            (v[0] - 3.0).powi(2) + 10.0 * (v[1] + 1.0).powi(2)
        };
        for _ in 0..200 {
            let v = p.get(w).as_slice().to_vec();
            let mut g = p.zero_grads();
            g.get_mut(w)
                .as_mut_slice()
                .copy_from_slice(&[2.0 * (v[0] - 3.0), 20.0 * (v[1] + 1.0)]);
            adam.step(&mut p, &g).unwrap();
        }
        assert!(loss(&p) < 1e-4, "loss {}", loss(&p));
    }
}
