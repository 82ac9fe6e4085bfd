//! Adaptive moment optimizer driving the training loop.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::params::{BoundParams, ParameterStore};
use crate::scalar::Scalar;
use crate::tape::Gradients;
use crate::tensor::Tensor;

/// Per-parameter first/second-moment update with bias correction. Moment
/// arithmetic runs in f64 regardless of the parameter precision so f32
/// training stays stable.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update. Parameters without a gradient this step decay
    /// their moments and receive the residual moment update.
    pub fn step<S: Scalar>(
        &mut self,
        params: &mut ParameterStore<S>,
        bound: &BoundParams,
        grads: &Gradients<S>,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, var) in bound.iter() {
            let value = params.get(name)?.clone();
            let n = value.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let grad = grads.get(*var);
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let g = grad.map_or(0.0, |g| g.data()[i].to_f64());
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let p = value.data()[i].to_f64() - self.lr * m_hat / (v_hat.sqrt() + self.eps);
                out.push(S::from_f64(p));
            }
            params.set(name, Tensor::new(value.shape().to_vec(), out)?);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn minimizes_a_quadratic() {
        // f(x) = sum((x - 3)^2) should converge toward 3.
        let mut params = ParameterStore::<f64>::new();
        params.insert("x", Tensor::new(vec![2], vec![0.0, 10.0]).unwrap()).unwrap();
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let x = bound.var("x").unwrap();
            let shifted = tape.add_scalar(x, -3.0).unwrap();
            let sq = tape.square(shifted).unwrap();
            let loss = tape.sum_all(sq).unwrap();
            let grads = tape.backward(loss).unwrap();
            opt.step(&mut params, &bound, &grads).unwrap();
        }
        for &v in params.get("x").unwrap().data() {
            assert!((v - 3.0).abs() < 1e-3, "converged to {v}");
        }
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let mut params = ParameterStore::<f32>::new();
            params.insert("w", Tensor::from_fn(&[4], |i| i as f32 * 0.25 - 0.5)).unwrap();
            let mut opt = Adam::new(0.01);
            for _ in 0..20 {
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape);
                let w = bound.var("w").unwrap();
                let sq = tape.square(w).unwrap();
                let loss = tape.sum_all(sq).unwrap();
                let grads = tape.backward(loss).unwrap();
                opt.step(&mut params, &bound, &grads).unwrap();
            }
            params.get("w").unwrap().clone()
        };
        assert!(run().bit_eq(&run()));
    }
}
