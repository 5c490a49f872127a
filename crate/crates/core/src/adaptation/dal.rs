//! Domain classifier and its loss.

use rand::Rng;

use crate::autograd::{Graph, ParamStore, Var};
use crate::nn::Linear;
use crate::objectives::LossValue;
use crate::tensor::Scalar;

/// Probability clamp for the binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Pooled features → `Linear(C, C)` + ReLU → `Linear(C, 1)` → sigmoid.
#[derive(Clone, Debug)]
pub struct DomainHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl DomainHead {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), channels, channels, 1.0, rng),
            out: Linear::new(store, &format!("{name}.out"), channels, 1, 1.0, rng),
        }
    }

    /// `features`: `[N, C, H, W]`. Returns target-domain probabilities `[N, 1]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, features: Var) -> Var {
        let pooled = g.mean_pool(features);
        self.forward_pooled(g, pooled)
    }

    /// Same as [`forward`](Self::forward) on already pooled `[N, C]` features.
    pub fn forward_pooled<T: Scalar>(&self, g: &mut Graph<'_, T>, pooled: Var) -> Var {
        let h = self.hidden.forward(g, pooled);
        let h = g.relu(h);
        let o = self.out.forward(g, h);
        g.sigmoid(o)
    }
}

/// Mean binary cross-entropy `-d·ln p - (1-d)·ln(1-p)`, with `p` clamped to
/// `[ε, 1-ε]`. `labels`: 0 = source, 1 = target. The gradient is taken with
/// respect to the unclamped probability and vanishes where the clamp is active.
pub fn loss_domain<T: Scalar>(probs: &[T], labels: &[u8]) -> LossValue<T> {
    assert_eq!(probs.len(), labels.len());
    let n = probs.len();
    let mut grad = vec![T::zero(); n];
    if n == 0 {
        return LossValue { value: T::zero(), grad };
    }
    let inv = T::one() / T::of(n as f64);
    let (lo, hi) = (T::of(BCE_EPS), T::one() - T::of(BCE_EPS));
    let mut sum = T::zero();
    for (i, (&p, &d)) in probs.iter().zip(labels).enumerate() {
        let pc = p.max(lo).min(hi);
        let inside = p > lo && p < hi;
        if d == 1 {
            sum -= pc.ln();
            if inside {
                grad[i] = -inv / pc;
            }
        } else {
            sum -= (T::one() - pc).ln();
            if inside {
                grad[i] = inv / (T::one() - pc);
            }
        }
    }
    LossValue { value: sum * inv, grad }
}
