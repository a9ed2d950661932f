//! Batch normalization over `[N,F]` inputs.

use super::tape::{Op, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(features: usize) -> Self {
        Self {
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn features(&self) -> usize {
        self.running_mean.len()
    }
}

impl Tape {
    /// `γ · (x − μ)/√(σ² + ε) + β` per feature. Train mode uses the batch
    /// moments (biased variance) and folds them into the running statistics
    /// (unbiased variance); infer mode uses the running statistics only.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        mode: BnMode,
    ) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        let f = state.features();
        if sx.len() != 2 || sx[1] != f {
            return Err(Error::dim("batchnorm", &sx, &[f]));
        }
        if self.value(gamma).shape() != [f] || self.value(beta).shape() != [f] {
            return Err(Error::dim("batchnorm", self.value(gamma).shape(), &[f]));
        }
        let n = sx[0];
        let xd = self.value(x).data();
        let (mean, var) = match mode {
            BnMode::Train => {
                if n < 2 {
                    return Err(Error::BatchSize(n));
                }
                let mut mean = vec![0.0; f];
                for (i, v) in xd.iter().enumerate() {
                    mean[i % f] += v;
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; f];
                for (i, v) in xd.iter().enumerate() {
                    let d = v - mean[i % f];
                    var[i % f] += d * d;
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                (mean, var)
            }
            BnMode::Infer => (state.running_mean.clone(), state.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
        let xhat: Vec<f64> = xd
            .iter()
            .enumerate()
            .map(|(i, v)| (v - mean[i % f]) * inv_std[i % f])
            .collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, h)| gd[i % f] * h + bd[i % f])
            .collect();

        if mode == BnMode::Train {
            let m = state.momentum;
            let unbias = n as f64 / (n as f64 - 1.0);
            for j in 0..f {
                state.running_mean[j] = (1.0 - m) * state.running_mean[j] + m * mean[j];
                state.running_var[j] = (1.0 - m) * state.running_var[j] + m * var[j] * unbias;
            }
        }

        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(&sx, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == BnMode::Train,
            },
            needs,
        ))
    }
}
