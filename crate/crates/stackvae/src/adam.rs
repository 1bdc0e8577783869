//! Adam with elementwise gradient clipping and decoupled weight decay.

use crate::error::{Error, Result};

/// Training schedule knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub lr_decay: f64,
    /// Epochs between learning-rate decay steps.
    pub lr_decay_interval: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            learning_rate: 1e-3,
            lr_decay: 0.8,
            lr_decay_interval: 10,
            weight_decay: 1e-3,
            grad_clip: 12.0,
            epochs: 256,
            batch_size: 64,
        }
    }
}

impl TrainHyper {
    /// Learning rate in effect after `completed_epochs` epochs.
    pub fn lr_at_epoch(&self, completed_epochs: usize) -> f64 {
        let steps = completed_epochs / self.lr_decay_interval.max(1);
        self.learning_rate * self.lr_decay.powi(steps as i32)
    }
}

/// First/second moment estimates over one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        AdamState {
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }
}

#[inline]
pub fn clip_value(g: f64, clip: f64) -> f64 {
    g.clamp(-clip, clip)
}

/// One optimizer step over a flat parameter vector.
///
/// In order: clip each gradient entry to `[-grad_clip, grad_clip]`, apply
/// decoupled weight decay `p -= lr * weight_decay * p`, then the
/// bias-corrected Adam update. `lr` is the current (possibly decayed) rate;
/// `hyper.learning_rate` is the initial one.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    hyper: &TrainHyper,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} parameters", state.len()),
            format!("{} params / {} grads", params.len(), grads.len()),
        ));
    }
    if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient entry {bad} is {}; step aborted",
            grads[bad]
        )));
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);

    for i in 0..params.len() {
        let g = clip_value(grads[i], hyper.grad_clip);
        params[i] -= lr * hyper.weight_decay * params[i];
        state.first_moment[i] = state.beta1 * state.first_moment[i] + (1.0 - state.beta1) * g;
        state.second_moment[i] =
            state.beta2 * state.second_moment[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.first_moment[i] / bc1;
        let v_hat = state.second_moment[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}
