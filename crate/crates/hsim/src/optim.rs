//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MlpModel, ParamGrads};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First/second moment accumulators per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    params: AdamParams,
    m: Vec<(Vec<f64>, Vec<f64>)>,
    v: Vec<(Vec<f64>, Vec<f64>)>,
    step: u64,
}

impl AdamState {
    pub fn new(model: &MlpModel, params: AdamParams) -> Self {
        let shape: Vec<(Vec<f64>, Vec<f64>)> = model
            .layers()
            .iter()
            .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
            .collect();
        Self {
            params,
            m: shape.clone(),
            v: shape,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update: decoupled decay `p *= 1 - lr * wd`, then the
    /// bias-corrected Adam delta `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, model: &mut MlpModel, grads: &ParamGrads) -> Result<()> {
        if grads.layers.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} gradient tensors for {} layers",
                grads.layers.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let p = self.params;
        let bc1 = 1.0 - p.beta1.powi(self.step as i32);
        let bc2 = 1.0 - p.beta2.powi(self.step as i32);
        let decay = 1.0 - p.lr * p.weight_decay;

        for (l, layer) in model.layers_mut().iter_mut().enumerate() {
            let (gw, gb) = &grads.layers[l];
            if gw.len() != layer.weights.len() || gb.len() != layer.bias.len() {
                return Err(Error::ShapeMismatch(format!("layer {l} gradient shape")));
            }
            let (mw, mb) = &mut self.m[l];
            let (vw, vb) = &mut self.v[l];
            let update = |param: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *param *= decay;
                *m = p.beta1 * *m + (1.0 - p.beta1) * g;
                *v = p.beta2 * *v + (1.0 - p.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *param -= p.lr * m_hat / (v_hat.sqrt() + p.epsilon);
            };
            for ((param, &g), (m, v)) in layer
                .weights
                .iter_mut()
                .zip(gw)
                .zip(mw.iter_mut().zip(vw.iter_mut()))
            {
                update(param, g, m, v);
            }
            for ((param, &g), (m, v)) in
                layer.bias.iter_mut().zip(gb).zip(mb.iter_mut().zip(vb.iter_mut()))
            {
                update(param, g, m, v);
            }
        }
        Ok(())
    }
}
