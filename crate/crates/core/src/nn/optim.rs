//! Adam over the flat trainable layout, for the non-private stages.

use super::{ParamLayout, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, len: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Applies one bias-corrected Adam step with gradient `grad`.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, layout: &ParamLayout, grad: &[T]) -> Result<()> {
        if grad.len() != self.m.len() || layout.len != grad.len() {
            return Err(Error::shape(
                "adam",
                format!("gradient of {} for state of {}", grad.len(), self.m.len()),
            ));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut update = Vec::with_capacity(grad.len());
        for ((m, v), g) in self.m.iter_mut().zip(self.v.iter_mut()).zip(grad) {
            let g = g.to_f64_lossy();
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            update.push(T::lit((*m / c1) / ((*v / c2).sqrt() + self.eps)));
        }
        store.sgd_step(layout, &update, T::lit(self.lr))
    }
}
