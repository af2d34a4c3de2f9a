use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer with bias correction. Moments are kept per
/// parameter index of the store it updates.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Option<Tensor<F>>>,
    pub v: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Adam<F> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore<F>, grads: &[(ParamId, Tensor<F>)], lr: f64) {
        self.step += 1;
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let step_size = F::cst(lr / bc1);
        let bc2_sqrt = F::cst(bc2.sqrt());
        let (b1f, b2f) = (F::cst(b1), F::cst(b2));
        let eps = F::cst(self.cfg.eps);
        for (id, grad) in grads {
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(grad.shape()));
            let p = store.get_mut(*id);
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1f * *m + (F::one() - b1f) * g;
                *v = b2f * *v + (F::one() - b2f) * g * g;
                *p -= step_size * *m / ((*v).sqrt() / bc2_sqrt + eps);
            }
        }
    }
}
