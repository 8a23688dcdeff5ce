//! Threshold-dependent batch normalization.
//!
//! Statistics for channel `c` pool the batch, time and spatial extent, so an
//! input laid out `[N, T, C, H, W]` (or `[T, N, C, H, W]`) normalizes every
//! `x_c` in `R^{N x T x H x W}` to variance `(alpha * V_th)^2` before the
//! per-channel affine map `gamma_c * x + beta_c`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Batch statistics, running statistics left untouched.
    TrainFrozen,
    /// Running statistics.
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdbnLayer {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub alpha: f64,
    pub eps: f64,
    pub momentum: f64,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub v_th: f64,
}

/// Forward quantities needed by [`tdbn_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct NormCache {
    shape: Vec<usize>,
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
    gamma: Vec<f64>,
    scale: f64,
}

impl NormCache {
    /// Per-element `(x - mean) / sqrt(var + eps)`.
    pub fn normalized(&self) -> &[f64] {
        &self.x_hat
    }
}

impl TdbnLayer {
    pub fn new(channels: usize, v_th: f64) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            alpha: 1.0,
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            v_th,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn gamma_bar(&self) -> f64 {
        self.gamma.iter().sum::<f64>() / self.gamma.len() as f64
    }

    pub fn beta_bar(&self) -> f64 {
        self.beta.iter().sum::<f64>() / self.beta.len() as f64
    }

    /// Mean of `gamma_c^2`; the exact variance factor that `gamma_bar^2` lower-bounds.
    pub fn gamma_sq_mean(&self) -> f64 {
        self.gamma.iter().map(|g| g * g).sum::<f64>() / self.gamma.len() as f64
    }

    fn scale(&self) -> f64 {
        self.alpha * self.v_th
    }

    pub fn forward(&mut self, input: &Tensor, mode: NormMode) -> Result<(Tensor, Option<NormCache>)> {
        let (outer, channels, inner) = layout(input.shape())?;
        if channels != self.channels() {
            return Err(Error::ShapeMismatch(format!(
                "normalization layer has {} channels, input has {channels}",
                self.channels()
            )));
        }
        let x = input.data();
        let count = (outer * inner) as f64;
        let (mean, var) = match mode {
            NormMode::Inference => (self.running_mean.clone(), self.running_var.clone()),
            NormMode::Train | NormMode::TrainFrozen => {
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for o in 0..outer {
                    for c in 0..channels {
                        let row = &x[(o * channels + c) * inner..][..inner];
                        mean[c] += row.iter().sum::<f64>();
                    }
                }
                for m in &mut mean {
                    *m /= count;
                }
                for o in 0..outer {
                    for c in 0..channels {
                        let row = &x[(o * channels + c) * inner..][..inner];
                        var[c] += row.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
                    }
                }
                for v in &mut var {
                    *v /= count;
                }
                (mean, var)
            }
        };
        if mode == NormMode::Train {
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            for c in 0..channels {
                self.running_mean[c] = (1.0 - self.momentum) * self.running_mean[c] + self.momentum * mean[c];
                self.running_var[c] = (1.0 - self.momentum) * self.running_var[c] + self.momentum * var[c] * unbias;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let a = self.scale();
        let mut x_hat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for c in 0..channels {
                let off = (o * channels + c) * inner;
                for i in off..off + inner {
                    let xh = (x[i] - mean[c]) * inv_std[c];
                    x_hat[i] = xh;
                    out[i] = self.gamma[c] * a * xh + self.beta[c];
                }
            }
        }
        let out = Tensor::new(input.shape().to_vec(), out)?;
        let cache = (mode != NormMode::Inference).then(|| NormCache {
            shape: input.shape().to_vec(),
            x_hat,
            inv_std,
            gamma: self.gamma.clone(),
            scale: a,
        });
        Ok((out, cache))
    }
}

/// Splits a shape `[A, B, C, rest...]` into `(A * B, C, prod(rest))`.
fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 3 {
        return Err(Error::ShapeMismatch(format!(
            "normalization input needs [N, T, C, ...], got {shape:?}"
        )));
    }
    Ok((shape[0] * shape[1], shape[2], shape[3..].iter().product()))
}

pub fn tdbn_forward(input: &Tensor, layer: &mut TdbnLayer, training: bool) -> Result<Tensor> {
    let mode = if training { NormMode::Train } else { NormMode::Inference };
    Ok(layer.forward(input, mode)?.0)
}

/// `(gamma_bar, beta_bar)`: channel means of the affine parameters.
pub fn channel_affine_means(layer: &TdbnLayer) -> (f64, f64) {
    (layer.gamma_bar(), layer.beta_bar())
}

/// Exact gradients of the normalize-then-affine map.
/// Returns `(input_grad, gamma_grad, beta_grad)`.
pub fn tdbn_backward(upstream: &Tensor, cache: Option<&NormCache>) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let cache = cache.ok_or_else(|| Error::MissingTape("normalization forward cache".into()))?;
    if upstream.shape() != cache.shape.as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "upstream {:?} vs cached {:?}",
            upstream.shape(),
            cache.shape
        )));
    }
    let (outer, channels, inner) = layout(&cache.shape)?;
    let count = (outer * inner) as f64;
    let dy = upstream.data();
    let xh = &cache.x_hat;
    let mut d_gamma = vec![0.0; channels];
    let mut d_beta = vec![0.0; channels];
    for o in 0..outer {
        for c in 0..channels {
            let off = (o * channels + c) * inner;
            for i in off..off + inner {
                d_beta[c] += dy[i];
                d_gamma[c] += dy[i] * cache.scale * xh[i];
            }
        }
    }
    // d x_hat = dy * gamma * a; sums of d x_hat and d x_hat * x_hat follow from the above.
    let mut dx = vec![0.0; dy.len()];
    for c in 0..channels {
        let g = cache.gamma[c] * cache.scale;
        let sum_dxh = g * d_beta[c];
        let sum_dxh_xh = g * d_gamma[c] / cache.scale;
        let k = cache.inv_std[c] / count;
        for o in 0..outer {
            let off = (o * channels + c) * inner;
            for i in off..off + inner {
                dx[i] = k * (count * g * dy[i] - sum_dxh - xh[i] * sum_dxh_xh);
            }
        }
    }
    Ok((Tensor::new(cache.shape.clone(), dx)?, d_gamma, d_beta))
}
