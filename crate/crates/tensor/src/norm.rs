use crate::error::{Result, TensorError};
use crate::{Scalar, Tape, Tensor, Var};

/// Per-channel statistics gathered from one training-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
}

/// Which statistics a [`BatchNorm2d`] forward pass normalizes with.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Current batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
    /// Statistics captured from an earlier pass, held constant.
    Frozen(&'a BatchStats),
}

/// Batch normalization over (batch, height, width) for each channel.
///
/// Holds only the running statistics; `gamma` and `beta` are owned by the
/// caller and passed in as tape variables.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    running_mean: Option<Tensor<T>>,
    running_var: Option<Tensor<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Self {
        Self {
            channels,
            eps,
            momentum,
            running_mean: None,
            running_var: None,
        }
    }

    pub fn running_stats(&self) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.running_mean.as_ref().zip(self.running_var.as_ref())
    }

    pub fn set_running_stats(&mut self, mean: Tensor<T>, var: Tensor<T>) {
        self.running_mean = Some(mean);
        self.running_var = Some(var);
    }

    /// Returns the output and, in training mode, the batch statistics used.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let eps = self.eps;
        let inv = |var: &[f64]| var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect::<Vec<_>>();
        match mode {
            BnMode::Train => {
                let stats = batch_stats(tape.value(x))?;
                self.update_running(&stats, tape.value(x).len() / self.channels.max(1));
                let y = tape.batch_norm_with(x, gamma, beta, stats.mean.clone(), inv(&stats.var), true)?;
                Ok((y, Some(stats)))
            }
            BnMode::Eval => {
                let (m, v) = self.running_stats().ok_or(TensorError::UninitializedStats)?;
                let mean = m.data().iter().map(|v| v.as_f64()).collect();
                let var: Vec<f64> = v.data().iter().map(|v| v.as_f64()).collect();
                let y = tape.batch_norm_with(x, gamma, beta, mean, inv(&var), false)?;
                Ok((y, None))
            }
            BnMode::Frozen(stats) => {
                let y = tape.batch_norm_with(x, gamma, beta, stats.mean.clone(), inv(&stats.var), false)?;
                Ok((y, None))
            }
        }
    }

    fn update_running(&mut self, stats: &BatchStats, count: usize) {
        // running variance tracks the unbiased estimate
        let unbias = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        let m = self.momentum;
        let c = self.channels;
        let old_mean = self.running_mean.take().unwrap_or_else(|| Tensor::zeros(&[c]));
        let old_var = self.running_var.take().unwrap_or_else(|| Tensor::ones(&[c]));
        let mean = Tensor::from_fn(&[c], |i| {
            T::of((1.0 - m) * old_mean.data()[i].as_f64() + m * stats.mean[i])
        });
        let var = Tensor::from_fn(&[c], |i| {
            T::of((1.0 - m) * old_var.data()[i].as_f64() + m * stats.var[i] * unbias)
        });
        self.running_mean = Some(mean);
        self.running_var = Some(var);
    }
}

fn batch_stats<T: Scalar>(x: &Tensor<T>) -> Result<BatchStats> {
    let [b, c, h, w] = x.dims4()?;
    let hw = h * w;
    let n = (b * hw) as f64;
    let mut mean = vec![0.0f64; c];
    for (i, plane) in x.data().chunks(hw).enumerate() {
        mean[i % c] += plane.iter().map(|v| v.as_f64()).sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; c];
    for (i, plane) in x.data().chunks(hw).enumerate() {
        let m = mean[i % c];
        var[i % c] += plane.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= n);
    Ok(BatchStats { mean, var })
}
