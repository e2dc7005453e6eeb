use super::params::{ParamId, ParamStore};
use super::{Result, Tensor, TensorError};

/// Adam moments for one parameter group.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub params: Vec<ParamId>,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore, params: Vec<ParamId>, lr: f64) -> Self {
        let zeros = |id: &ParamId| Tensor::zeros(store.value(*id).shape().to_vec());
        Self {
            first_moment: params.iter().map(zeros).collect(),
            second_moment: params.iter().map(zeros).collect(),
            params,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter in `state`.
/// Gradients are read, not cleared.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    for id in &state.params {
        let p = store.get(*id);
        if p.requires_grad && p.grad.is_none() {
            return Err(TensorError::MissingGradient(p.name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (slot, id) in state.params.iter().enumerate() {
        let p = store.get_mut(*id);
        if !p.requires_grad {
            continue;
        }
        let grad = p.grad.as_ref().expect("checked above").data();
        let m = state.first_moment[slot].data_mut();
        let v = state.second_moment[slot].data_mut();
        let theta = p.value.data_mut();
        for i in 0..theta.len() {
            let g = grad[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            theta[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}
