//! Adam with a step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Learning rate `lr · factor^(number of decay epochs ≤ epoch)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSchedule {
    pub lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl StepSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let n = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.decay_factor.powi(n as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    /// Restores saved moments. Shapes must match the parameters.
    pub fn restore(params: &ParamStore<T>, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<Self> {
        let ok = |ts: &[Tensor<T>]| {
            ts.len() == params.len() && ts.iter().zip(params.iter()).all(|(a, (_, b))| a.shape() == b.shape())
        };
        if !ok(&m) || !ok(&v) {
            return Err(Error::Checkpoint("optimizer state does not match the model parameters".into()));
        }
        Ok(Self { step, m, v, ..Self::new(params) })
    }

    /// One update. Parameters without a gradient are treated as having a zero gradient.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        assert_eq!(grads.len(), params.len());
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (c1, c2) = (1.0 - self.beta1, 1.0 - self.beta2);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = T::of(lr / bc1);
        let (c1, c2, eps, sqrt_bc2) = (T::of(c1), T::of(c2), T::of(self.eps), T::of(bc2.sqrt()));
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            match &grads[i] {
                Some(g) => {
                    for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        *m = b1 * *m + c1 * g;
                        *v = b2 * *v + c2 * g * g;
                        *p -= step_size * *m / ((*v).sqrt() / sqrt_bc2 + eps);
                    }
                }
                None => {
                    for ((p, m), v) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m *= b1;
                        *v *= b2;
                        *p -= step_size * *m / ((*v).sqrt() / sqrt_bc2 + eps);
                    }
                }
            }
        }
    }
}
