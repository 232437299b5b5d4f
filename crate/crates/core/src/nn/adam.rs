use alloc::vec;
use alloc::vec::Vec;

use super::mlp::{Gradients, MlpParams};
use crate::error::{Error, Result};
use crate::math;

/// Adam with bias correction and additive L2 weight decay.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_stability: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(n_params: usize, learning_rate: f64, weight_decay: f64) -> Self {
        AdamState {
            step_count: 0,
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            learning_rate,
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            eps_stability: Self::EPS,
            weight_decay,
        }
    }

    pub fn for_params(params: &MlpParams, learning_rate: f64, weight_decay: f64) -> Self {
        Self::new(params.n_params(), learning_rate, weight_decay)
    }

    /// One descent step on `params` along `grads`.
    ///
    /// The effective gradient is `grad + weight_decay * param`. Entries with a
    /// `false` mask bit are left untouched together with their moments.
    pub fn step(
        &mut self,
        params: &mut MlpParams,
        grads: &Gradients,
        trainable: Option<&[bool]>,
    ) -> Result<()> {
        if params.n_params() != self.first_moment.len() {
            return Err(Error::DimensionMismatch {
                context: "adam state",
                expected: self.first_moment.len(),
                found: params.n_params(),
            });
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite {
                context: "adam gradient",
            });
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - libm::pow(self.beta1, t);
        let bc2 = 1.0 - libm::pow(self.beta2, t);
        let mut idx = 0;
        for (layer, glayer) in params.layers_mut().iter_mut().zip(&grads.layers) {
            let pairs = [
                (&mut layer.weight, &glayer.weight),
                (&mut layer.bias, &glayer.bias),
            ];
            for (p, g) in pairs {
                for (pv, &gv) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    let frozen = trainable.map(|m| !m[idx]).unwrap_or(false);
                    if !frozen {
                        let grad = gv + self.weight_decay * *pv;
                        let m = &mut self.first_moment[idx];
                        let v = &mut self.second_moment[idx];
                        *m = self.beta1 * *m + (1.0 - self.beta1) * grad;
                        *v = self.beta2 * *v + (1.0 - self.beta2) * grad * grad;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *pv -= self.learning_rate * m_hat / (math::sqrt(v_hat) + self.eps_stability);
                    }
                    idx += 1;
                }
            }
        }
        Ok(())
    }
}
