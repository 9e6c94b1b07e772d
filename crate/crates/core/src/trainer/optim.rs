use std::collections::BTreeMap;

use crate::compute::Tensor;
use crate::encoder::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.0,
            clip_norm: 10.0,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Adam with per-parameter step counts. Parameters without a gradient in a
/// step are left alone.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    state: BTreeMap<String, Moments>,
}

pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update and returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> f64 {
        let norm = global_norm(grads);
        let scale = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        for (name, grad) in grads {
            let Some(param) = params.get_mut(name) else {
                continue;
            };
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
                t: 0,
            });
            st.t += 1;
            let c1 = 1.0 - beta1.powi(st.t);
            let c2 = 1.0 - beta2.powi(st.t);
            for (i, p) in param.data_mut().iter_mut().enumerate() {
                let g = grad.data()[i] * scale + weight_decay * *p;
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
                let update = lr * (st.m[i] / c1) / ((st.v[i] / c2).sqrt() + eps);
                *p -= update;
            }
        }
        norm
    }
}
