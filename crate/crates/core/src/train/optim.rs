//! Adaptive-moment optimizer with decoupled weight decay.

use crate::models::Params;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

impl From<&crate::config::TrainConfig> for AdamHyper {
    fn from(c: &crate::config::TrainConfig) -> Self {
        AdamHyper {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// Moment estimates for one parameter structure.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub hyper: AdamHyper,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new<P: Params>(params: &P, hyper: AdamHyper) -> Self {
        let n = params.n_params();
        AdamW {
            hyper,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of `params` in place.
    pub fn step<P: Params>(&mut self, params: &mut P, grads: &P, lr: f64) {
        let h = self.hyper;
        self.step += 1;
        let bc1 = 1.0 - h.beta1.powi(self.step as i32);
        let bc2 = 1.0 - h.beta2.powi(self.step as i32);
        let g_tensors = grads.named_tensors();
        let mut offset = 0;
        for (mut p, (_, g)) in params.tensors_mut().into_iter().zip(g_tensors) {
            for (pv, gv) in p.iter_mut().zip(g.iter()) {
                let i = offset;
                offset += 1;
                self.m[i] = h.beta1 * self.m[i] + (1.0 - h.beta1) * gv;
                self.v[i] = h.beta2 * self.v[i] + (1.0 - h.beta2) * gv * gv;
                let m_hat = self.m[i] / bc1;
                let v_hat = self.v[i] / bc2;
                *pv -= lr * h.weight_decay * *pv;
                *pv -= lr * m_hat / (v_hat.sqrt() + h.eps);
            }
        }
    }
}
