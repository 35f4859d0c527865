//! Plain SGD and Adam parameter updates.

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;
use std::collections::HashMap;

/// p <- p - lr * g
pub struct Sgd {
    pub lr: f32,
}

impl Sgd {
    pub fn new(lr: f32) -> Self {
        Self { lr }
    }

    pub fn step(&self, params: &mut ParamSet, grads: &[(String, Tensor)]) -> Result<()> {
        for (name, g) in grads {
            let mut p = params.get(name)?.clone();
            if p.shape() != g.shape() {
                return Err(Error::shape("sgd step", p.shape(), g.shape()));
            }
            for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= self.lr * gv;
            }
            params.set(name, p)?;
        }
        Ok(())
    }
}

/// Adam with bias correction. Defaults are beta1 = 0.9, beta2 = 0.999,
/// eps = 1e-8; first and second moment estimates are kept per parameter.
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: u64,
    m: HashMap<String, Vec<f32>>,
    v: HashMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[(String, Tensor)]) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let mut p = params.get(name)?.clone();
            if p.shape() != g.shape() {
                return Err(Error::shape("adam step", p.shape(), g.shape()));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            params.set(name, p)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: Vec<f32>) -> ParamSet {
        let mut p = ParamSet::new();
        p.add("w", Tensor::from_vec(v), true).unwrap();
        p
    }

    #[test]
    fn sgd_applies_exact_update() {
        let mut params = one_param(vec![1.0, -2.0, 0.5]);
        let grads = vec![("w".to_string(), Tensor::from_vec(vec![0.5, -1.0, 2.0]))];
        Sgd::new(0.1).step(&mut params, &grads).unwrap();
        let w = params.get("w").unwrap().data();
        assert_eq!(w, &[0.95, -1.9, 0.3]);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        // With bias correction, the very first update is lr * g/(|g| + eps),
        // effectively lr * sign(g).
        let mut params = one_param(vec![0.0, 0.0, 0.0]);
        let grads = vec![(
            "w".to_string(),
            Tensor::from_vec(vec![0.3, -2.0, 0.001]),
        )];
        let mut adam = Adam::new(0.01);
        adam.step(&mut params, &grads).unwrap();
        let w = params.get("w").unwrap().data();
        for (&got, &g) in w.iter().zip([0.3f32, -2.0, 0.001].iter()) {
            let want = -0.01 * g.signum();
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        // f(w) = 0.5 * ||w - c||^2, gradient w - c.
        let c = [3.0f32, -1.0, 0.25];
        let mut params = one_param(vec![0.0, 0.0, 0.0]);
        let mut adam = Adam::new(0.05);
        for _ in 0..2000 {
            let w = params.get("w").unwrap().data().to_vec();
            let g: Vec<f32> = w.iter().zip(&c).map(|(wv, cv)| wv - cv).collect();
            let grads = vec![("w".to_string(), Tensor::from_vec(g))];
            adam.step(&mut params, &grads).unwrap();
        }
        for (&got, &want) in params.get("w").unwrap().data().iter().zip(&c) {
            assert!((got - want).abs() < 0.01, "{got} vs {want}");
        }
    }

    #[test]
    fn adam_state_is_per_parameter() {
        let mut params = ParamSet::new();
        params.add("a", Tensor::from_vec(vec![0.0]), true).unwrap();
        params.add("b", Tensor::from_vec(vec![0.0]), true).unwrap();
        let mut adam = Adam::new(0.1);
        for _ in 0..10 {
            let grads = vec![
                ("a".to_string(), Tensor::from_vec(vec![1.0])),
                ("b".to_string(), Tensor::from_vec(vec![-1.0])),
            ];
            adam.step(&mut params, &grads).unwrap();
        }
        let a = params.get("a").unwrap().data()[0];
        let b = params.get("b").unwrap().data()[0];
        assert!(a < 0.0 && b > 0.0);
        assert!((a + b).abs() < 1e-6, "symmetric gradients move symmetrically");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = one_param(vec![1.0, 2.0]);
        let grads = vec![("w".to_string(), Tensor::from_vec(vec![1.0]))];
        assert!(Sgd::new(0.1).step(&mut params, &grads).is_err());
        assert!(Adam::new(0.1).step(&mut params, &grads).is_err());
    }
}
