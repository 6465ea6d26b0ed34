//! Adaptive-moment optimizer with decoupled weight decay.
//!
//! Decay is applied to the parameter directly (`p -= lr * wd * p`) before the
//! adaptive step, never through the gradient. Moments use β1 = 0.9,
//! β2 = 0.98, ε = 1e-6 with standard bias correction; the update arithmetic
//! runs in f64 regardless of the parameter scalar type.

use std::collections::BTreeMap;

use crate::numerics::Tensor;
use crate::scalar::Scalar;

use super::TrainError;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-6;

/// Named moment tensors, parallel to the parameter map.
pub type Moments<S> = BTreeMap<String, Tensor<S>>;

#[derive(Clone, Debug)]
pub struct AdamW<S: Scalar> {
    m: Moments<S>,
    v: Moments<S>,
    t: u64,
}

impl<S: Scalar> Default for AdamW<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> AdamW<S> {
    pub fn new() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn from_state(m: Moments<S>, v: Moments<S>, t: u64) -> Self {
        Self { m, v, t }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&Moments<S>, &Moments<S>) {
        (&self.m, &self.v)
    }

    /// Updates every parameter that has a gradient entry.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<S>>,
        grads: &BTreeMap<String, Tensor<S>>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<(), TrainError> {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (name, grad) in grads {
            if !grad.all_finite() {
                return Err(TrainError::NonFiniteGrad { name: name.clone() });
            }
            let param = params
                .get_mut(name)
                .ok_or_else(|| TrainError::NonFiniteGrad {
                    name: format!("{name} (no such parameter)"),
                })?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
            for i in 0..grad.len() {
                let g = grad.data()[i].to_f64();
                let mut p = param.data()[i].to_f64();
                if weight_decay != 0.0 {
                    p -= lr * weight_decay * p;
                }
                let mi = ADAM_BETA1 * m.data()[i].to_f64() + (1.0 - ADAM_BETA1) * g;
                let vi = ADAM_BETA2 * v.data()[i].to_f64() + (1.0 - ADAM_BETA2) * g * g;
                m.data_mut()[i] = S::from_f64(mi);
                v.data_mut()[i] = S::from_f64(vi);
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                param.data_mut()[i] = S::from_f64(p);
            }
        }
        Ok(())
    }
}
