//! Adam optimizer with bias correction.
//!
//! Moment buffers are keyed by parameter name, so per-task parameters
//! (which get fresh names) start with fresh state while shared parameters
//! keep theirs across tasks. Frozen parameters and parameters without a
//! gradient are skipped untouched.

use crate::error::{Error, Result};
use crate::Tensor;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            states: BTreeMap::new(),
        }
    }

    /// One update over the listed parameters, reading each tensor's
    /// accumulated gradient. Gradients are left in place; callers clear them.
    pub fn step(&mut self, params: &[(String, Tensor)]) -> Result<()> {
        for (name, p) in params {
            if !p.requires_grad() {
                continue;
            }
            let Some(grad) = p.grad() else {
                continue;
            };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
            let st = self.states.entry(name.clone()).or_insert_with(|| AdamState {
                m: vec![0.0; p.numel()],
                v: vec![0.0; p.numel()],
                t: 0,
            });
            debug_assert_eq!(st.m.len(), p.numel(), "moment size for {name}");
            st.t += 1;
            let bc1 = 1.0 - self.cfg.beta1.powi(st.t as i32);
            let bc2 = 1.0 - self.cfg.beta2.powi(st.t as i32);
            let mut data = p.data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                st.m[i] = self.cfg.beta1 * st.m[i] + (1.0 - self.cfg.beta1) * g;
                st.v[i] = self.cfg.beta2 * st.v[i] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                data[i] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }

    /// Grows the moment buffers of `name` to `new_len` elements, keeping the
    /// existing prefix (classifier-head expansion at a task boundary).
    pub fn expand(&mut self, name: &str, new_len: usize) {
        if let Some(st) = self.states.get_mut(name) {
            st.m.resize(new_len, 0.0);
            st.v.resize(new_len, 0.0);
        }
    }

    pub fn state_of(&self, name: &str) -> Option<&AdamState> {
        self.states.get(name)
    }

    /// Flattens moment buffers into named tensors for state snapshots.
    pub fn export_states(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, st) in &self.states {
            out.push((
                format!("adam.m.{name}"),
                Tensor::from_vec(vec![st.m.len()], st.m.clone()).unwrap(),
            ));
            out.push((
                format!("adam.v.{name}"),
                Tensor::from_vec(vec![st.v.len()], st.v.clone()).unwrap(),
            ));
            out.push((
                format!("adam.t.{name}"),
                Tensor::from_vec(vec![], vec![st.t as f64]).unwrap(),
            ));
        }
        out
    }

    pub fn import_states(&mut self, entries: &[(String, Tensor)]) {
        for (name, tensor) in entries {
            if let Some(rest) = name.strip_prefix("adam.m.") {
                self.states
                    .entry(rest.to_string())
                    .or_insert_with(|| AdamState {
                        m: Vec::new(),
                        v: Vec::new(),
                        t: 0,
                    })
                    .m = tensor.to_vec();
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                self.states
                    .entry(rest.to_string())
                    .or_insert_with(|| AdamState {
                        m: Vec::new(),
                        v: Vec::new(),
                        t: 0,
                    })
                    .v = tensor.to_vec();
            } else if let Some(rest) = name.strip_prefix("adam.t.") {
                self.states
                    .entry(rest.to_string())
                    .or_insert_with(|| AdamState {
                        m: Vec::new(),
                        v: Vec::new(),
                        t: 0,
                    })
                    .t = tensor.item() as u64;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named(t: Tensor) -> Vec<(String, Tensor)> {
        vec![("w".to_string(), t)]
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let w = Tensor::from_vec(vec![2], vec![1.5, -2.5]).unwrap().trainable();
        w.accumulate_grad(&[0.0, 0.0]);
        let before = w.data_bits();
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&named(w.clone())).unwrap();
        assert_eq!(w.data_bits(), before);
        // Absent gradient is also a no-op.
        w.zero_grad();
        opt.step(&named(w.clone())).unwrap();
        assert_eq!(w.data_bits(), before);
    }

    #[test]
    fn one_step_on_square_shrinks_w() {
        // f(w) = w^2, grad = 2w, from w = 1.
        let w = Tensor::from_vec(vec![], vec![1.0]).unwrap().trainable();
        w.accumulate_grad(&[2.0]);
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        opt.step(&named(w.clone())).unwrap();
        assert!(w.item().abs() < 1.0);
    }

    #[test]
    fn matches_hand_computed_two_step_trace() {
        // Scalar Adam, lr=0.1, betas (0.9, 0.999), eps=1e-8, gradients 3 then -1.
        let lr = 0.1;
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut m = 0.0f64;
        let mut v = 0.0f64;
        let mut w_ref = 0.5f64;
        for (t, g) in [(1, 3.0f64), (2, -1.0)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            w_ref -= lr * m_hat / (v_hat.sqrt() + eps);
        }

        let w = Tensor::from_vec(vec![], vec![0.5]).unwrap().trainable();
        let mut opt = Adam::new(AdamConfig {
            lr,
            beta1: b1,
            beta2: b2,
            eps,
        });
        w.accumulate_grad(&[3.0]);
        opt.step(&named(w.clone())).unwrap();
        w.zero_grad();
        w.accumulate_grad(&[-1.0]);
        opt.step(&named(w.clone())).unwrap();
        assert!((w.item() - w_ref).abs() < 1e-15);
    }

    #[test]
    fn frozen_param_is_skipped() {
        let w = Tensor::from_vec(vec![1], vec![2.0]).unwrap();
        w.accumulate_grad(&[1.0]); // grads on frozen tensors shouldn't exist, but be safe
        let before = w.data_bits();
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&named(w.clone())).unwrap();
        assert_eq!(w.data_bits(), before);
    }

    #[test]
    fn non_finite_gradient_aborts_with_name() {
        let w = Tensor::from_vec(vec![1], vec![2.0]).unwrap().trainable();
        w.accumulate_grad(&[f64::NAN]);
        let mut opt = Adam::new(AdamConfig::default());
        let err = opt.step(&named(w)).unwrap_err();
        assert!(err.to_string().contains("w"));
    }

    #[test]
    fn export_import_round_trip() {
        let w = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap().trainable();
        w.accumulate_grad(&[0.3, -0.7]);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&[("w".to_string(), w)]).unwrap();
        let exported = opt.export_states();
        let mut fresh = Adam::new(AdamConfig::default());
        fresh.import_states(&exported);
        let a = opt.state_of("w").unwrap();
        let b = fresh.state_of("w").unwrap();
        assert_eq!(a.m, b.m);
        assert_eq!(a.v, b.v);
        assert_eq!(a.t, b.t);
    }
}
