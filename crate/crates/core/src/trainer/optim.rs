use serde::{Deserialize, Serialize};

use crate::models::ParamStore;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// AdamW with decoupled weight decay. Moments are kept per parameter and
/// created on first update.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdamW {
    pub t: u64,
    pub m: Vec<Option<Vec<f64>>>,
    pub v: Vec<Option<Vec<f64>>>,
}

impl AdamW {
    pub fn new(n_params: usize) -> Self {
        AdamW {
            t: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    /// One update. `lrs[i]` is the rate of parameter `i`; decay applies only
    /// to parameters flagged for it. Frozen parameters are never touched.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &[Option<Tensor>],
        lrs: &[f64],
        weight_decay: f64,
    ) {
        self.t += 1;
        if self.m.len() < params.len() {
            self.m.resize(params.len(), None);
            self.v.resize(params.len(), None);
        }
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads.get(i).and_then(Option::as_ref) else {
                continue;
            };
            if !p.trainable {
                continue;
            }
            let lr = lrs[i];
            let m = self.m[i].get_or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v[i].get_or_insert_with(|| vec![0.0; g.len()]);
            let decay = if p.decay {
                1.0 - lr * weight_decay
            } else {
                1.0
            };
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                *w *= decay;
                *w -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + EPS);
            }
        }
    }
}
