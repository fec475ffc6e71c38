//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::{Tape, Tensor, Var};

/// Builds a scalar loss from the registered inputs.
pub trait LossBuilder: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>> LossBuilder for F {}

fn evaluate(inputs: &[Tensor<f64>], build: &impl LossBuilder) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let loss = build(&mut tape, &vars)?;
    Ok(tape.item(loss))
}

/// Analytic gradients of `build` for every input.
pub fn analytic_gradients(inputs: &[Tensor<f64>], build: &impl LossBuilder) -> Result<Vec<Tensor<f64>>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Central differences `(f(x+h) - f(x-h)) / 2h`, one entry at a time.
pub fn numeric_gradients(inputs: &[Tensor<f64>], build: &impl LossBuilder, h: f64) -> Result<Vec<Tensor<f64>>> {
    let mut out = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for k in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[k].shape());
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + h;
            let plus = evaluate(&work, build)?;
            work[k].data_mut()[i] = x0 - h;
            let minus = evaluate(&work, build)?;
            work[k].data_mut()[i] = x0;
            grad.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    let norm = |t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Relative error between analytic and finite-difference gradients, per input.
pub fn check_gradients(inputs: &[Tensor<f64>], build: impl LossBuilder, h: f64) -> Result<Vec<f64>> {
    let analytic = analytic_gradients(inputs, &build)?;
    let numeric = numeric_gradients(inputs, &build, h)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .collect())
}
