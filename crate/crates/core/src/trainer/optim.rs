use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tensor};
use crate::nets::Params;
pub use crate::objectives::sgd_update;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    /// Advances the step counter; call once per update before
    /// [`AdamState::apply`] on each parameter group.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Bias-corrected Adam update of one tensor.
    pub fn apply(&mut self, name: &str, w: &mut Tensor, g: &Tensor, cfg: &AdamConfig) {
        debug_assert!(self.t > 0, "begin_step not called");
        debug_assert_eq!(w.shape, g.shape);
        let m = self.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(&g.shape));
        let v = self.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(&g.shape));
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..g.len() {
            let gi = g.values[i];
            m.values[i] = cfg.beta1 * m.values[i] + (1.0 - cfg.beta1) * gi;
            v.values[i] = cfg.beta2 * v.values[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m.values[i] / c1;
            let vhat = v.values[i] / c2;
            w.values[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }

    /// Updates every tensor of `params` that has an entry in `grads`.
    pub fn apply_group(&mut self, params: &mut Params, grads: &Gradients, cfg: &AdamConfig) {
        for (name, w) in params.0.iter_mut() {
            if let Some(g) = grads.get(name) {
                self.apply(name, w, g, cfg);
            }
        }
    }
}

/// One Adam step over a single parameter group.
pub fn adam_step(params: &mut Params, grads: &Gradients, state: &mut AdamState, cfg: &AdamConfig) {
    state.begin_step();
    state.apply_group(params, grads, cfg);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: f64) -> Params {
        let mut p = Params::default();
        p.insert(name.into(), Tensor::scalar(v));
        p
    }

    fn grad(name: &str, g: f64) -> Gradients {
        let mut m = Gradients::new();
        m.insert(name.into(), Tensor::scalar(g));
        m
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_decays_moments() {
        let cfg = AdamConfig::default();
        let mut p = single("w", 1.5);
        let mut s = AdamState::default();
        adam_step(&mut p, &grad("w", 2.0), &mut s, &cfg);
        let after_first = p.get("w").item();
        let m1 = s.m["w"].item();
        let v1 = s.v["w"].item();
        let mut q = single("w", 7.0);
        let mut z = AdamState::default();
        adam_step(&mut q, &grad("w", 0.0), &mut z, &cfg);
        assert_eq!(q.get("w").item(), 7.0);
        adam_step(&mut p, &grad("w", 0.0), &mut s, &cfg);
        assert_eq!(s.m["w"].item(), 0.9 * m1);
        assert_eq!(s.v["w"].item(), 0.999 * v1);
        assert_ne!(p.get("w").item(), after_first);
    }

    #[test]
    fn first_step_by_hand() {
        // m1 = 0.1 g, v1 = 0.001 g^2; bias correction gives mhat = g,
        // vhat = g^2, so the step is lr * g / (|g| + eps).
        let cfg = AdamConfig::default();
        for g in [0.3, -4.0, 1e-3] {
            let mut p = single("w", 0.0);
            let mut s = AdamState::default();
            adam_step(&mut p, &grad("w", g), &mut s, &cfg);
            let want = -1e-3 * g / (g.abs() + 1e-8);
            assert!((p.get("w").item() - want).abs() < 1e-15, "{g}");
        }
    }

    #[test]
    fn proportional_gradients_move_equally() {
        let cfg = AdamConfig::default();
        let mut p = Params::default();
        p.insert("a".into(), Tensor::scalar(0.0));
        p.insert("b".into(), Tensor::scalar(0.0));
        let mut s = AdamState::default();
        for k in 1..5 {
            let mut g = Gradients::new();
            g.insert("a".into(), Tensor::scalar(0.2 * k as f64));
            g.insert("b".into(), Tensor::scalar(20.0 * k as f64));
            adam_step(&mut p, &g, &mut s, &cfg);
        }
        let (a, b) = (p.get("a").item(), p.get("b").item());
        assert!((a - b).abs() < 1e-6 * a.abs(), "{a} {b}");
    }

    #[test]
    fn sgd_linearity() {
        let mut a = Tensor::vector(vec![1.0, -2.0]);
        let mut b = a.clone();
        let g = Tensor::vector(vec![0.5, 3.0]);
        sgd_update(&mut a, &g.scaled(4.0), 0.01);
        sgd_update(&mut b, &g, 0.04);
        assert!(a.max_abs_diff(&b) < 1e-15);
    }
}
