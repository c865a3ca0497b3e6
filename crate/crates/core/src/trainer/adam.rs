use crate::kernels::Scalar;
use crate::model::params::is_matrix_name;
use crate::model::ModelParams;
use crate::trainer::{GradientSet, TrainConfig};

/// First and second moments plus the number of updates applied so far.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut GradientSet<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        let scale = T::lit(max_norm / (norm + 1e-12));
        for (_, t) in grads.grads.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

/// Clips, then applies one bias-corrected AdamW update with learning rate
/// `lr`. Weight decay is decoupled and only touches matrices. Returns the
/// pre-clip gradient norm.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &mut GradientSet<T>,
    state: &mut AdamState<T>,
    lr: f64,
    config: &TrainConfig,
) -> f64 {
    let norm = clip_grad_norm(grads, config.grad_clip);
    state.step += 1;
    let (b1, b2) = config.betas;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    let (b1t, b2t) = (T::lit(b1), T::lit(b2));
    let (one_b1, one_b2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
    let lr_t = T::lit(lr);
    let decay = T::lit(lr * config.weight_decay);
    let eps = T::lit(config.eps);
    let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));

    let ps = params.tensors_mut();
    let gs = grads.grads.tensors();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for ((((name, p), (_, g)), (_, m)), (_, v)) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
        let decays = is_matrix_name(&name) && config.weight_decay != 0.0;
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mi = b1t * *mi + one_b1 * gi;
            *vi = b2t * *vi + one_b2 * gi * gi;
            if decays {
                *pi -= decay * *pi;
            }
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *pi -= lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    norm
}
