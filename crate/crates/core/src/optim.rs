//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamTree;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub wd: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, wd: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.wd >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "optimizer needs lr > 0, wd >= 0, betas in [0, 1), eps > 0; got {self:?}"
            )))
        }
    }
}

/// First and second moments, one pair per parameter in traversal order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(params: &impl ParamTree) -> Self {
        let mut m = Vec::new();
        params.visit("", &mut |_, t| m.push(vec![0.0; t.numel()]));
        Self { step: 0, v: m.clone(), m }
    }
}

/// One update of every parameter of `params` with `grads` (same order as
/// [`ParamTree::visit`]).
pub fn adamw_step(params: &mut impl ParamTree, grads: &[Tensor], state: &mut AdamWState, cfg: &AdamWConfig) -> Result<()> {
    if grads.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} optimizer slots",
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let mut i = 0;
    let mut err = None;
    params.visit_mut("", &mut |name, p| {
        let g = &grads[i];
        if g.shape() != p.shape() {
            err.get_or_insert(Error::Contract(format!(
                "gradient {:?} for parameter {name} of shape {:?}",
                g.shape(),
                p.shape()
            )));
            i += 1;
            return;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let mut w = p.to_vec();
        for k in 0..w.len() {
            let gk = g.data()[k];
            w[k] *= 1.0 - cfg.lr * cfg.wd;
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            w[k] -= cfg.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.eps);
        }
        p.set_data(w);
        i += 1;
    });
    err.map_or(Ok(()), Err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(w0: f64, g: f64, cfg: AdamWConfig, steps: usize) -> f64 {
        let mut p = vec![Tensor::scalar(w0).into_param()];
        let mut s = AdamWState::new(&p);
        for _ in 0..steps {
            adamw_step(&mut p, &[Tensor::scalar(g)], &mut s, &cfg).unwrap();
        }
        p[0].item()
    }

    #[test]
    fn zero_gradient_fixed_point_and_decay() {
        let cfg = AdamWConfig { wd: 0.0, ..AdamWConfig::default() };
        assert_eq!(run(0.7, 0.0, cfg, 5), 0.7);
        let cfg = AdamWConfig { lr: 0.1, wd: 0.5, ..AdamWConfig::default() };
        let want = 2.0 * (1.0f64 - 0.05).powi(3);
        assert!((run(2.0, 0.0, cfg, 3) - want).abs() < 1e-15);
    }

    #[test]
    fn single_step_on_square_matches_hand_trace() {
        // f(w) = w^2 at w = 1: g = 2, m_hat = 2, v_hat = 4.
        // w <- 1 * (1 - 0.1 * 0.01) - 0.1 * 2 / (2 + 1e-8)
        let cfg = AdamWConfig { lr: 0.1, wd: 0.01, ..AdamWConfig::default() };
        let got = run(1.0, 2.0, cfg, 1);
        assert!((got - 0.8990000005).abs() < 1e-12, "{got}");
    }
}
