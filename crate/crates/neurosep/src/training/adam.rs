//! Adam optimizer with bias correction; state is kept per parameter id and
//! frozen parameters are skipped entirely, which keeps their bytes (and the
//! freeze-contract hashes) untouched.

use std::collections::{HashMap, HashSet};

use ndarray::Array2;

use crate::nn::params::{GradMap, ParamId, ParamStore};

pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: HashMap<ParamId, Array2<f64>>,
    v: HashMap<ParamId, Array2<f64>>,
    t: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: HashMap::new(),
            v: HashMap::new(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &GradMap,
        lr: f64,
        frozen: &HashSet<ParamId>,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (&id, g) in &grads.grads {
            if frozen.contains(&id) {
                continue;
            }
            let m = self
                .m
                .entry(id)
                .or_insert_with(|| Array2::zeros(g.dim()));
            let v = self
                .v
                .entry(id)
                .or_insert_with(|| Array2::zeros(g.dim()));
            m.zip_mut_with(g, |mv, &gv| *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv);
            v.zip_mut_with(g, |vv, &gv| {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv
            });
            let param = store.value_mut(id);
            ndarray::Zip::from(param)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mv, &vv| {
                    let m_hat = mv / bc1;
                    let v_hat = vv / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
    }

    /// Optimizer state as named tensors for checkpointing.
    pub fn state_tensors(&self, store: &ParamStore) -> Vec<(String, Array2<f64>)> {
        let mut out = Vec::new();
        for (&id, m) in &self.m {
            out.push((format!("adam.m.{}", store.name(id)), m.clone()));
        }
        for (&id, v) in &self.v {
            out.push((format!("adam.v.{}", store.name(id)), v.clone()));
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}
