//! Softmax variants used by score-map fusion: a sliding-window softmax whose
//! normalization spans a spatial window across all layers, and a per-pixel
//! softmax over the layer axis.

use super::{Backward, Tensor};
use crate::error::RfError;

struct WindowedSoftmaxBack {
    x: Tensor,
    out: Vec<f64>,
    log_denom: Vec<f64>,
    n: usize,
    h: usize,
    w: usize,
    radius: usize,
}

impl Backward for WindowedSoftmaxBack {
    fn backward(&self, g: &[f64]) {
        let (n, h, w) = (self.n, self.h, self.w);
        let hw = h * w;
        // t(y,x) = sum_n g * out, then
        // gin(m,u,v) = out(m,u,v) * (g(m,u,v) - sum_{(y,x) in win(u,v)} exp(logD(u,v) - logD(y,x)) * t(y,x))
        let mut t = vec![0.0; hw];
        for layer in 0..n {
            for i in 0..hw {
                t[i] += g[layer * hw + i] * self.out[layer * hw + i];
            }
        }
        let r = self.radius as isize;
        let mut gx = vec![0.0; g.len()];
        for u in 0..h {
            for v in 0..w {
                let ld_here = self.log_denom[u * w + v];
                let mut acc = 0.0;
                for y in (u as isize - r).max(0)..(u as isize + r + 1).min(h as isize) {
                    for x in (v as isize - r).max(0)..(v as isize + r + 1).min(w as isize) {
                        let idx = y as usize * w + x as usize;
                        acc += (ld_here - self.log_denom[idx]).exp() * t[idx];
                    }
                }
                for layer in 0..n {
                    let idx = layer * hw + u * w + v;
                    gx[idx] = self.out[idx] * (g[idx] - acc);
                }
            }
        }
        self.x.accumulate_grad(&gx);
    }
}

/// Softmax over a `window x window x N` neighborhood sliding spatially on an
/// `[N, H, W]` tensor. Positions outside the image contribute nothing to the
/// denominator; exponents are stabilized by the in-window maximum.
pub fn windowed_softmax(h: &Tensor, window: usize) -> Result<Tensor, RfError> {
    if h.shape().len() != 3 {
        return Err(RfError::Shape(format!(
            "windowed_softmax: expected [N,H,W], got {:?}",
            h.shape()
        )));
    }
    if window == 0 || window % 2 == 0 {
        return Err(RfError::Shape(format!(
            "windowed_softmax: window must be odd and positive, got {window}"
        )));
    }
    let (n, hh, ww) = (h.shape()[0], h.shape()[1], h.shape()[2]);
    let hw = hh * ww;
    let radius = window / 2;
    let r = radius as isize;
    let xd = h.data();
    let mut out = vec![0.0; xd.len()];
    let mut log_denom = vec![0.0; hw];
    for u in 0..hh {
        for v in 0..ww {
            let mut max = f64::NEG_INFINITY;
            for y in (u as isize - r).max(0)..(u as isize + r + 1).min(hh as isize) {
                for x in (v as isize - r).max(0)..(v as isize + r + 1).min(ww as isize) {
                    for layer in 0..n {
                        let val = xd[layer * hw + y as usize * ww + x as usize];
                        if val > max {
                            max = val;
                        }
                    }
                }
            }
            let mut sum = 0.0;
            for y in (u as isize - r).max(0)..(u as isize + r + 1).min(hh as isize) {
                for x in (v as isize - r).max(0)..(v as isize + r + 1).min(ww as isize) {
                    for layer in 0..n {
                        sum += (xd[layer * hw + y as usize * ww + x as usize] - max).exp();
                    }
                }
            }
            let ld = max + sum.ln();
            log_denom[u * ww + v] = ld;
            for layer in 0..n {
                let idx = layer * hw + u * ww + v;
                out[idx] = (xd[idx] - ld).exp();
            }
        }
    }
    drop(xd);
    Ok(Tensor::from_op(
        vec![n, hh, ww],
        out.clone(),
        vec![h.clone()],
        Box::new(WindowedSoftmaxBack {
            x: h.clone(),
            out,
            log_denom,
            n,
            h: hh,
            w: ww,
            radius,
        }),
    ))
}

struct ScaleSoftmaxBack {
    x: Tensor,
    out: Vec<f64>,
    n: usize,
    hw: usize,
}

impl Backward for ScaleSoftmaxBack {
    fn backward(&self, g: &[f64]) {
        let mut gx = vec![0.0; g.len()];
        for i in 0..self.hw {
            let mut dot = 0.0;
            for layer in 0..self.n {
                let idx = layer * self.hw + i;
                dot += g[idx] * self.out[idx];
            }
            for layer in 0..self.n {
                let idx = layer * self.hw + i;
                gx[idx] = self.out[idx] * (g[idx] - dot);
            }
        }
        self.x.accumulate_grad(&gx);
    }
}

/// Per-pixel softmax across the layer axis of an `[N, H, W]` tensor.
pub fn scale_softmax(x: &Tensor) -> Tensor {
    assert_eq!(x.shape().len(), 3, "scale_softmax expects [N,H,W]");
    let (n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let hw = h * w;
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for i in 0..hw {
        let mut max = f64::NEG_INFINITY;
        for layer in 0..n {
            max = max.max(xd[layer * hw + i]);
        }
        let mut sum = 0.0;
        for layer in 0..n {
            sum += (xd[layer * hw + i] - max).exp();
        }
        for layer in 0..n {
            let idx = layer * hw + i;
            out[idx] = (xd[idx] - max).exp() / sum;
        }
    }
    drop(xd);
    Tensor::from_op(
        vec![n, h, w],
        out.clone(),
        vec![x.clone()],
        Box::new(ScaleSoftmaxBack { x: x.clone(), out, n, hw }),
    )
}

/// Reference implementation of [`windowed_softmax`]: per output element,
/// loop over the full neighborhood. Used by tests as an independent oracle.
#[cfg(test)]
pub fn windowed_softmax_naive(data: &[f64], n: usize, h: usize, w: usize, window: usize) -> Vec<f64> {
    let radius = (window / 2) as isize;
    let hw = h * w;
    let mut out = vec![0.0; data.len()];
    for u in 0..h as isize {
        for v in 0..w as isize {
            let mut neigh = Vec::new();
            for y in u - radius..=u + radius {
                for x in v - radius..=v + radius {
                    if y < 0 || y >= h as isize || x < 0 || x >= w as isize {
                        continue;
                    }
                    for layer in 0..n {
                        neigh.push(data[layer * hw + y as usize * w + x as usize]);
                    }
                }
            }
            let max = neigh.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = neigh.iter().map(|v| (v - max).exp()).sum();
            for layer in 0..n {
                let idx = layer * hw + u as usize * w + v as usize;
                out[idx] = (data[idx] - max).exp() / denom;
            }
        }
    }
    out
}
