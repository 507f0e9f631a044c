use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::nn::{Parameterized, Slot};
use crate::scalar::{cst, Scalar};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
        }
    }
}

/// Adam with decoupled weight decay. Moment `i` belongs to the `i`-th
/// learnable parameter in visit order.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<ArrayD<T>>,
    pub v: Vec<ArrayD<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update from the accumulated gradients.
    pub fn step<M: Parameterized<T> + ?Sized>(&mut self, model: &mut M) {
        self.t += 1;
        let c = self.config;
        let t = self.t as i32;
        let step_size: T = cst(c.learning_rate / (1.0 - c.beta1.powi(t)));
        let bc2_sqrt: T = cst((1.0 - c.beta2.powi(t)).sqrt());
        let decay: T = cst(1.0 - c.learning_rate * c.weight_decay);
        let (b1, b2, eps): (T, T, T) = (cst(c.beta1), cst(c.beta2), cst(c.eps));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut i = 0;
        model.visit("", &mut |_, slot| {
            let Slot::Param(p) = slot else { return };
            if ms.len() == i {
                ms.push(ArrayD::zeros(p.value.raw_dim()));
                vs.push(ArrayD::zeros(p.value.raw_dim()));
            }
            Zip::from(&mut p.value)
                .and(&p.grad)
                .and(&mut ms[i])
                .and(&mut vs[i])
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + one_b1 * g;
                    *v = b2 * *v + one_b2 * g * g;
                    *w = *w * decay - step_size * *m / (v.sqrt() / bc2_sqrt + eps);
                });
            i += 1;
        });
    }
}
