use super::params::{Grads, ParamStore};
use crate::tensor::Matrix;
use serde::{Deserialize, Serialize};

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|(_, p)| Matrix::zeros(p.rows(), p.cols())).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// First and second moment buffers, in parameter order.
    pub fn moments(&self) -> (&[Matrix], &[Matrix]) {
        (&self.m, &self.v)
    }

    /// Restores a saved optimizer. Moment shapes must match `params`.
    pub fn from_parts(params: &ParamStore, step: u64, m: Vec<Matrix>, v: Vec<Matrix>) -> Option<Self> {
        let fits = |ms: &[Matrix]| {
            ms.len() == params.len() && ms.iter().zip(params.iter()).all(|(a, (_, p))| a.shape() == p.shape())
        };
        if !fits(&m) || !fits(&v) {
            return None;
        }
        Some(Self { step, m, v, ..Self::new(params) })
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for id in params.ids().collect::<Vec<_>>() {
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = params.get_mut(id);
            for (((pv, gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
            }
        }
    }
}
