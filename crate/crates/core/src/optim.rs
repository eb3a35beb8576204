use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. One instance per network; moments persist
/// across the whole run.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub params: AdamParams,
    pub step: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(params: AdamParams, shapes: &[Var]) -> Self {
        let zeros = || shapes.iter().map(|p| ArrayD::zeros(p.value().raw_dim())).collect();
        Self {
            params,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Returns updated parameter values for learning rate `lr`.
    pub fn update(&mut self, values: &[Var], grads: &[Var], lr: f64) -> Result<Vec<ArrayD<f64>>> {
        if values.len() != grads.len() || values.len() != self.m.len() {
            return Err(Error::Shape("optimizer state does not match parameter list".into()));
        }
        self.step += 1;
        let AdamParams { beta1, beta2, eps } = self.params;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let mut out = Vec::with_capacity(values.len());
        for (i, (p, g)) in values.iter().zip(grads).enumerate() {
            let mut next = p.value().clone();
            Zip::from(&mut next)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(g.value())
                .for_each(|w, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *w -= lr * mh / (vh.sqrt() + eps);
                });
            out.push(next);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad;
    use ndarray::IxDyn;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let p = Var::param(ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, -2.0, 0.5]).unwrap());
        let loss = p.mul(&p).sum();
        let g = grad(&loss, &[&p], false);
        let mut adam = Adam::new(AdamParams::default(), &[p.clone()]);
        let next = adam.update(&[p.clone()], &g, 0.1).unwrap();
        let want = [0.9, -1.9, 0.4];
        for (a, b) in next[0].iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Var::param(ArrayD::from_elem(IxDyn(&[2]), 3.0));
        let mut adam = Adam::new(AdamParams { beta1: 0.9, ..Default::default() }, &[p.clone()]);
        for _ in 0..500 {
            let loss = p.add_scalar(-1.0).powf(2.0).sum();
            let g = grad(&loss, &[&p], false);
            p = Var::param(adam.update(&[p.clone()], &g, 0.05).unwrap().remove(0));
        }
        assert!(p.value().iter().all(|v| (v - 1.0).abs() < 1e-2));
    }
}
