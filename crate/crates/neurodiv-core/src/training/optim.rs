//! AdamW with decoupled weight decay. Moment buffers are kept in double
//! precision regardless of the model's precision so that bias correction
//! and the running variance stay accurate in single-precision runs.

use std::collections::BTreeMap;

use crate::autodiff::{Gradients, Real};
use crate::model::{NdModel, ParamClass};

use super::TrainingError;

/// Optimizer constants. Weight decay is applied only where the caller says
/// so (the train loop decays adapters and the aggregator, not prefixes).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-tensor first/second moment state keyed by parameter name.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    /// Completed steps, i.e. the bias-correction clock.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advance the bias-correction clock. Call once per optimization step,
    /// before the per-tensor updates belonging to that step.
    pub fn begin_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    /// Update one tensor in place from its gradient. `decay` selects
    /// decoupled weight decay for this tensor.
    pub fn update<T: Real>(
        &mut self,
        key: &str,
        value: &mut [T],
        grad: &[T],
        lr: f64,
        decay: bool,
    ) -> Result<(), TrainingError> {
        if self.step == 0 {
            return Err(TrainingError::UpdateBeforeBeginStep);
        }
        if value.len() != grad.len() {
            return Err(TrainingError::GradientShape {
                key: key.to_string(),
                value_len: value.len(),
                grad_len: grad.len(),
            });
        }
        let cfg = self.config;
        let m = self
            .first
            .entry(key.to_string())
            .or_insert_with(|| vec![0.0; value.len()]);
        let v = self
            .second
            .entry(key.to_string())
            .or_insert_with(|| vec![0.0; value.len()]);
        let bias1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bias2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let wd = if decay { cfg.weight_decay } else { 0.0 };
        for i in 0..value.len() {
            let g = grad[i].to_f64();
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            let x = value[i].to_f64();
            let step = lr * (m_hat / (v_hat.sqrt() + cfg.eps) + wd * x);
            value[i] = T::from_f64(x - step);
        }
        Ok(())
    }
}

/// One whole optimization step over a model's trainable parameters.
///
/// The step is atomic: every gradient is checked for finiteness before any
/// parameter moves, so a rejected step leaves both the model and the
/// optimizer state untouched. Weight decay applies to adapter and
/// aggregator tensors only.
pub fn apply_gradients<T: Real>(
    optimizer: &mut AdamW,
    model: &mut NdModel<T>,
    grads: &Gradients<T>,
    lr: f64,
) -> Result<(), TrainingError> {
    let names = model.trainable_names();
    for name in &names {
        let grad = grads
            .get(name)
            .ok_or_else(|| TrainingError::MissingGradient(name.clone()))?;
        if !grad.all_finite() {
            return Err(TrainingError::NonFiniteGradient(name.clone()));
        }
    }
    optimizer.begin_step();
    for name in &names {
        let decay = matches!(
            model.class_of(name)?,
            ParamClass::Adapter | ParamClass::Aggregator
        );
        let grad = grads.get(name).expect("checked above");
        let grad_data = grad.data();
        let value = model.param_mut(name)?;
        optimizer.update(name, value.data_mut(), grad_data, lr, decay)?;
    }
    Ok(())
}
