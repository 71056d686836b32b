//! Instance and batch normalization.

use super::{Backward, Tensor};
use crate::error::RfError;

struct InstanceNormBack {
    x: Tensor,
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
    hw: usize,
}

impl Backward for InstanceNormBack {
    fn backward(&self, g: &[f64]) {
        let slices = self.inv_std.len();
        let mut gx = vec![0.0; g.len()];
        let n = self.hw as f64;
        for s in 0..slices {
            let base = s * self.hw;
            let y = &self.normalized[base..base + self.hw];
            let gs = &g[base..base + self.hw];
            let mean_g: f64 = gs.iter().sum::<f64>() / n;
            let mean_gy: f64 = gs.iter().zip(y.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
            for i in 0..self.hw {
                gx[base + i] = self.inv_std[s] * (gs[i] - mean_g - y[i] * mean_gy);
            }
        }
        self.x.accumulate_grad(&gx);
    }
}

/// Per-(batch, channel) standardization of a `[B, C, H, W]` tensor to zero
/// mean and unit variance. Carries no learnable affine parameters.
pub fn instance_norm(x: &Tensor, eps: f64) -> Result<Tensor, RfError> {
    if x.shape().len() != 4 {
        return Err(RfError::Shape(format!(
            "instance_norm: expected [B,C,H,W], got {:?}",
            x.shape()
        )));
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    if hw < 2 {
        return Err(RfError::Shape(format!(
            "instance_norm: spatial extent {h}x{w} too small for a variance"
        )));
    }
    let xd = x.data();
    let slices = b * c;
    let mut out = vec![0.0; xd.len()];
    let mut inv_std = vec![0.0; slices];
    let n = hw as f64;
    for s in 0..slices {
        let base = s * hw;
        let slice = &xd[base..base + hw];
        let mean: f64 = slice.iter().sum::<f64>() / n;
        let var: f64 = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[s] = istd;
        for i in 0..hw {
            out[base + i] = (slice[i] - mean) * istd;
        }
    }
    drop(xd);
    Ok(Tensor::from_op(
        vec![b, c, h, w],
        out.clone(),
        vec![x.clone()],
        Box::new(InstanceNormBack { x: x.clone(), normalized: out, inv_std, hw }),
    ))
}

/// Which statistics batch normalization uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Batch statistics without touching the running statistics.
    Frozen,
    /// Running statistics (requires at least one prior training update).
    Eval,
}

/// Running statistics owned by a batch-norm layer.
#[derive(Debug, Clone)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub batches_seen: u64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            batches_seen: 0,
        }
    }

    pub fn initialized(&self) -> bool {
        self.batches_seen > 0
    }
}

struct BatchNormBack {
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
    channels: usize,
    hw: usize,
    batch: usize,
}

impl Backward for BatchNormBack {
    fn backward(&self, g: &[f64]) {
        let gd = self.gamma.data();
        let mut gx = vec![0.0; g.len()];
        let mut ggamma = vec![0.0; self.channels];
        let mut gbeta = vec![0.0; self.channels];
        let n = (self.batch * self.hw) as f64;
        for c in 0..self.channels {
            let mut sum_g = 0.0;
            let mut sum_gy = 0.0;
            for b in 0..self.batch {
                let base = (b * self.channels + c) * self.hw;
                for i in 0..self.hw {
                    let gv = g[base + i];
                    sum_g += gv;
                    sum_gy += gv * self.normalized[base + i];
                }
            }
            gbeta[c] = sum_g;
            ggamma[c] = sum_gy;
            let scale = gd[c] * self.inv_std[c];
            let mean_g = sum_g / n;
            let mean_gy = sum_gy / n;
            for b in 0..self.batch {
                let base = (b * self.channels + c) * self.hw;
                for i in 0..self.hw {
                    let gv = g[base + i];
                    gx[base + i] = if self.batch_stats {
                        scale * (gv - mean_g - self.normalized[base + i] * mean_gy)
                    } else {
                        scale * gv
                    };
                }
            }
        }
        drop(gd);
        self.x.accumulate_grad(&gx);
        self.gamma.accumulate_grad(&ggamma);
        self.beta.accumulate_grad(&gbeta);
    }
}

/// Batch normalization over a `[B, C, H, W]` tensor with per-channel scale
/// `gamma` and shift `beta`.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    state: &mut BatchNormState,
    mode: BnMode,
    eps: f64,
    momentum: f64,
) -> Result<Tensor, RfError> {
    if x.shape().len() != 4 {
        return Err(RfError::Shape(format!(
            "batch_norm: expected [B,C,H,W], got {:?}",
            x.shape()
        )));
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(RfError::Shape(format!(
            "batch_norm: gamma/beta must be [{c}], got {:?} and {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if state.running_mean.len() != c {
        return Err(RfError::Shape(format!(
            "batch_norm: state tracks {} channels, input has {c}",
            state.running_mean.len()
        )));
    }
    let hw = h * w;
    let batch_stats = mode != BnMode::Eval;
    if batch_stats && b * hw < 2 {
        return Err(RfError::Shape(
            "batch_norm: need at least 2 values per channel for batch statistics".into(),
        ));
    }
    if mode == BnMode::Eval && !state.initialized() {
        return Err(RfError::Shape(
            "batch_norm: eval mode requested before any running-statistics update".into(),
        ));
    }

    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let n = (b * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    if batch_stats {
        for ci in 0..c {
            let mut s = 0.0;
            for bi in 0..b {
                let base = (bi * c + ci) * hw;
                s += xd[base..base + hw].iter().sum::<f64>();
            }
            let m = s / n;
            let mut v = 0.0;
            for bi in 0..b {
                let base = (bi * c + ci) * hw;
                v += xd[base..base + hw].iter().map(|x| (x - m) * (x - m)).sum::<f64>();
            }
            mean[ci] = m;
            var[ci] = v / n;
        }
        if mode == BnMode::Train {
            for ci in 0..c {
                state.running_mean[ci] = (1.0 - momentum) * state.running_mean[ci] + momentum * mean[ci];
                state.running_var[ci] = (1.0 - momentum) * state.running_var[ci] + momentum * var[ci];
            }
            state.batches_seen += 1;
        }
    } else {
        mean.copy_from_slice(&state.running_mean);
        var.copy_from_slice(&state.running_var);
    }

    let mut out = vec![0.0; xd.len()];
    let mut normalized = vec![0.0; xd.len()];
    let mut inv_std = vec![0.0; c];
    for ci in 0..c {
        let istd = 1.0 / (var[ci] + eps).sqrt();
        inv_std[ci] = istd;
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for i in 0..hw {
                let nv = (xd[base + i] - mean[ci]) * istd;
                normalized[base + i] = nv;
                out[base + i] = nv * gd[ci] + bd[ci];
            }
        }
    }
    drop(xd);
    drop(gd);
    drop(bd);

    Ok(Tensor::from_op(
        vec![b, c, h, w],
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(BatchNormBack {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            normalized,
            inv_std,
            batch_stats,
            channels: c,
            hw,
            batch: b,
        }),
    ))
}
