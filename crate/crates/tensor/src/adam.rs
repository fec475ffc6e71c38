use crate::error::{shape_err, Result, TensorError};
use crate::{Scalar, Tensor};

/// Moment buffers and hyperparameters of one Adam optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments shaped like `params`.
    pub fn new(params: &[Tensor<T>], learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            first_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step_count: 0,
            beta1,
            beta2,
            epsilon,
            learning_rate,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
///
/// Nothing is modified when any gradient is non-finite.
pub fn adam_step<T: Scalar>(params: &mut [Tensor<T>], grads: &[Tensor<T>], state: &mut AdamState<T>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(shape_err(
            "adam_step",
            format!(
                "{} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                state.first_moment.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first_moment[i].shape() {
            return Err(shape_err(
                "adam_step",
                format!("param #{i} {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(TensorError::Diverged { param: i });
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.epsilon, state.learning_rate);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut().zip(state.second_moment.iter_mut()))
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gf = gv.as_f64();
            let mf = b1 * mv.as_f64() + (1.0 - b1) * gf;
            let vf = b2 * vv.as_f64() + (1.0 - b2) * gf * gf;
            *mv = T::of(mf);
            *vv = T::of(vf);
            let update = lr * (mf / c1) / ((vf / c2).sqrt() + eps);
            *pv = T::of(pv.as_f64() - update);
        }
    }
    Ok(())
}

/// Owns parameter tensors together with their optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub params: Vec<Tensor<T>>,
    pub state: AdamState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: Vec<Tensor<T>>, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let state = AdamState::new(&params, learning_rate, beta1, beta2, epsilon);
        Self { params, state }
    }

    pub fn step(&mut self, grads: &[Tensor<T>]) -> Result<()> {
        adam_step(&mut self.params, grads, &mut self.state)
    }
}
