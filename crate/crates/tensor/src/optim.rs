//! AdamW: Adam moments with weight decay applied directly to the weights.

use crate::error::{Result, TensorError};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn learning_rate(self, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..self
        }
    }

    pub fn weight_decay(self, weight_decay: f64) -> Self {
        Self {
            weight_decay,
            ..self
        }
    }
}

/// Moment buffers, one pair per parameter of the store they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: OptimizerState,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, p)| vec![0.0; p.value.numel()])
            .collect();
        Self {
            config,
            state: OptimizerState {
                first_moment: zeros.clone(),
                second_moment: zeros,
                step_count: 0,
            },
        }
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    /// Applies one update to every trainable parameter holding a gradient.
    ///
    /// Parameters without a gradient (unreached by the last backward pass)
    /// are left untouched. All gradients are validated before anything is
    /// written, so a non-finite entry leaves the store unchanged.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.state.first_moment.len() != store.len() {
            return Err(TensorError::Graph(format!(
                "optimizer built for {} parameters, store has {}",
                self.state.first_moment.len(),
                store.len()
            )));
        }
        for (_, p) in store.iter() {
            if let Some(g) = p.grad() {
                if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite {
                        param: p.name.clone(),
                        index,
                    });
                }
            }
        }

        self.state.step_count += 1;
        let t = self.state.step_count as i32;
        let AdamWConfig {
            learning_rate: lr,
            weight_decay: wd,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);

        for (i, p) in store.params_mut().iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let Some(g) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let m = &mut self.state.first_moment[i];
            let v = &mut self.state.second_moment[i];
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                *w -= lr * wd * *w;
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
