use std::f64::consts::PI;

use crate::error::{Error, Result};

use super::params::ParameterStore;

/// Plain SGD: `value -= lr * grad`, then gradients are zeroed.
///
/// Every gradient is checked before any value is touched, so a non-finite
/// gradient leaves the store unchanged.
pub fn sgd_step(params: &mut ParameterStore, lr: f64) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, p)| !p.grad.is_finite()) {
        return Err(Error::NonFiniteGradient(name.to_string()));
    }
    for (_, p) in params.iter_mut() {
        for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
            *v -= lr * g;
        }
    }
    params.zero_grads();
    Ok(())
}

/// Half-cosine anneal from `lr0` at epoch 0 to 0 at `total_epochs`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> f64 {
    let total = total_epochs.max(1);
    let t = epoch.min(total) as f64 / total as f64;
    (lr0 * 0.5 * (1.0 + (PI * t).cos())).max(0.0)
}
