use serde::{Deserialize, Serialize};

use super::{flatten, Params};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected ADAM update of a single tensor; `t` is the step
/// number after incrementing (first step is 1).
pub fn adam_update(
    theta: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &AdamConfig,
) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..theta.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// ADAM state: first/second moments mirroring the parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &dyn Params, config: AdamConfig) -> Self {
        let mut m = Vec::new();
        params.visit(&mut |_, _, d| m.push(vec![0.0; d.len()]));
        let v = m.clone();
        Adam { config, t: 0, m, v }
    }

    /// Applies one update with gradients `grads`, which must share the
    /// parameters' layout.
    pub fn step(&mut self, params: &mut dyn Params, grads: &dyn Params) {
        self.t += 1;
        let g = flatten(grads);
        let mut offset = 0;
        let mut i = 0;
        let (t, cfg) = (self.t, self.config);
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.visit_mut(&mut |_, theta| {
            let n = theta.len();
            adam_update(
                theta,
                &g[offset..offset + n],
                &mut ms[i],
                &mut vs[i],
                t,
                &cfg,
            );
            offset += n;
            i += 1;
        });
        assert_eq!(offset, g.len(), "gradient layout differs from parameters");
    }
}
