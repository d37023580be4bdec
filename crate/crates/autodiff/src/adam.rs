use crate::error::AutodiffError;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. `grads` must follow the store's order.
pub fn adam_step(store: &mut ParamStore, grads: &[Tensor], cfg: &AdamConfig) -> Result<(), AutodiffError> {
    if grads.len() != store.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "adam_step",
            lhs: vec![store.len()],
            rhs: vec![grads.len()],
        });
    }
    for ((_, _, p), g) in store.iter().zip(grads) {
        if !p.same_shape(g) {
            return Err(AutodiffError::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    let (values, slots) = store.adam_or_init();
    slots.step += 1;
    let t = slots.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for (((p, g), m), v) in values
        .iter_mut()
        .zip(grads)
        .zip(slots.first.iter_mut())
        .zip(slots.second.iter_mut())
    {
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
