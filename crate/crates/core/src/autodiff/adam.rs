use super::{AutodiffError, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

/// One bias-corrected Adam update of every parameter tensor.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[&[T]],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), AutodiffError> {
    if params.len() != grads.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "adam_step",
            left: vec![params.len()],
            right: vec![grads.len()],
        });
    }
    if state.step == 0 && state.m.is_empty() {
        state.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        state.v = state.m.clone();
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let moments = state.m.get(i).map_or(0, Vec::len);
        if p.len() != g.len() || moments != p.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: vec![g.len()],
            });
        }
    }
    if state.m.len() != params.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "adam_step",
            left: vec![state.m.len()],
            right: vec![params.len()],
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
    let c1 = T::from_f64(1.0 - cfg.beta1.powi(t));
    let c2 = T::from_f64(1.0 - cfg.beta2.powi(t));
    let lr = T::from_f64(lr);
    let eps = T::from_f64(cfg.eps);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(*g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w = *w - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
