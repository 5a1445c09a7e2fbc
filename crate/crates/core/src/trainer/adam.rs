use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::numerics::{GradMap, ParamStore};

/// Adam with bias correction. Moments are keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Drops moment estimates and the step count.
    pub fn reset(&mut self) {
        self.t = 0;
        self.m.clear();
        self.v.clear();
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &GradMap, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.len() != p.len() {
                return Err(Error::shape("adam", p.shape(), &[g.len()]));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((w, gi), mi), vi) in p.values_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::row(vec![1.0, -2.0])).unwrap();
        let grads = GradMap::from([("w".to_string(), vec![0.5, -3.0])]);
        let mut adam = Adam::default();
        adam.step(&mut p, &grads, 0.1).unwrap();
        let w = p.get("w").unwrap().values();
        // mhat = g, vhat = g^2 -> step lr * g / (|g| + eps)
        assert!((w[0] - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert!((w[1] - (-2.0 + 0.1 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_exact() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::row(vec![0.1, 1e-300, -7.25])).unwrap();
        let before = p.clone();
        let grads = GradMap::from([("w".to_string(), vec![3.0, -1.0, 1e5])]);
        let mut adam = Adam::default();
        for _ in 0..5 {
            adam.step(&mut p, &grads, 0.0).unwrap();
        }
        assert_eq!(p, before);
    }
}
