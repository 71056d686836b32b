//! 2-D convolution via im2col and gemm.

use super::ops::dgemm_rm;
use super::{Backward, Tensor};
use crate::error::RfError;

/// Output spatial extent for one axis.
fn conv_out(extent: usize, k: usize, stride: usize, pad: usize) -> usize {
    (extent + 2 * pad - k) / stride + 1
}

/// Lower a padded input slice `[Cin, H, W]` into a `[Cin*kh*kw, Ho*Wo]`
/// column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    col: &mut [f64],
) {
    let ho = conv_out(h, kh, stride, pad);
    let wo = conv_out(w, kw, stride, pad);
    let cols = ho * wo;
    col.fill(0.0);
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let base = row * cols;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = (c * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[base + oy * wo + ox] = input[src_row + ix as usize];
                    }
                }
            }
        }
    }
}

/// Scatter-add a column-matrix gradient back onto the input layout.
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    col: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    input_grad: &mut [f64],
) {
    let ho = conv_out(h, kh, stride, pad);
    let wo = conv_out(w, kw, stride, pad);
    let cols = ho * wo;
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let base = row * cols;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = (c * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        input_grad[dst_row + ix as usize] += col[base + oy * wo + ox];
                    }
                }
            }
        }
    }
}

struct Conv2dBack {
    input: Tensor,
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    pad: usize,
}

impl Backward for Conv2dBack {
    fn backward(&self, g: &[f64]) {
        let ishape = self.input.shape().to_vec();
        let wshape = self.weight.shape().to_vec();
        let (b, cin, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (cout, kh, kw) = (wshape[0], wshape[2], wshape[3]);
        let ho = conv_out(h, kh, self.stride, self.pad);
        let wo = conv_out(w, kw, self.stride, self.pad);
        let ckk = cin * kh * kw;
        let cols = ho * wo;

        let idata = self.input.data();
        let wdata = self.weight.data();
        let mut gi = vec![0.0; idata.len()];
        let mut gw = vec![0.0; wdata.len()];
        let mut col = vec![0.0; ckk * cols];
        let mut gcol = vec![0.0; ckk * cols];
        for bi in 0..b {
            let gb = &g[bi * cout * cols..(bi + 1) * cout * cols];
            im2col(
                &idata[bi * cin * h * w..(bi + 1) * cin * h * w],
                cin,
                h,
                w,
                kh,
                kw,
                self.stride,
                self.pad,
                &mut col,
            );
            // dW += G_b (Cout x cols) * col^T (cols x ckk)
            dgemm_rm(cout, cols, ckk, 1.0, gb, false, &col, true, 1.0, &mut gw);
            // dcol = W^T (ckk x Cout) * G_b (Cout x cols)
            dgemm_rm(ckk, cout, cols, 1.0, &wdata, true, gb, false, 0.0, &mut gcol);
            col2im_add(
                &gcol,
                cin,
                h,
                w,
                kh,
                kw,
                self.stride,
                self.pad,
                &mut gi[bi * cin * h * w..(bi + 1) * cin * h * w],
            );
        }
        drop(idata);
        drop(wdata);
        self.input.accumulate_grad(&gi);
        self.weight.accumulate_grad(&gw);
        if let Some(bias) = &self.bias {
            let mut gbias = vec![0.0; cout];
            for bi in 0..b {
                for co in 0..cout {
                    let base = (bi * cout + co) * cols;
                    gbias[co] += g[base..base + cols].iter().sum::<f64>();
                }
            }
            bias.accumulate_grad(&gbias);
        }
    }
}

/// Zero-padded strided 2-D convolution.
///
/// `input` is `[B, Cin, H, W]`, `weight` is `[Cout, Cin, kh, kw]`, `bias`
/// (optional) is `[Cout]`. Differentiable with respect to all three.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor, RfError> {
    if input.shape().len() != 4 {
        return Err(RfError::Shape(format!(
            "conv2d: input must be 4-D [B,Cin,H,W], got {:?}",
            input.shape()
        )));
    }
    if weight.shape().len() != 4 {
        return Err(RfError::Shape(format!(
            "conv2d: weight must be 4-D [Cout,Cin,kh,kw], got {:?}",
            weight.shape()
        )));
    }
    if stride == 0 {
        return Err(RfError::Shape("conv2d: stride must be positive".into()));
    }
    let (b, cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    let (cout, wcin, kh, kw) = (weight.shape()[0], weight.shape()[1], weight.shape()[2], weight.shape()[3]);
    if cin != wcin {
        return Err(RfError::Shape(format!(
            "conv2d: input channels {cin} do not match weight channels {wcin}"
        )));
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(RfError::Shape(format!(
            "conv2d: kernel {kh}x{kw} exceeds padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    if let Some(bias) = bias {
        if bias.shape() != [cout] {
            return Err(RfError::Shape(format!(
                "conv2d: bias shape {:?} does not match Cout {cout}",
                bias.shape()
            )));
        }
    }

    let ho = conv_out(h, kh, stride, pad);
    let wo = conv_out(w, kw, stride, pad);
    let ckk = cin * kh * kw;
    let cols = ho * wo;

    let idata = input.data();
    let wdata = weight.data();
    let mut out = vec![0.0; b * cout * cols];
    let mut col = vec![0.0; ckk * cols];
    for bi in 0..b {
        im2col(
            &idata[bi * cin * h * w..(bi + 1) * cin * h * w],
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            &mut col,
        );
        dgemm_rm(
            cout,
            ckk,
            cols,
            1.0,
            &wdata,
            false,
            &col,
            false,
            0.0,
            &mut out[bi * cout * cols..(bi + 1) * cout * cols],
        );
        if let Some(bias) = bias {
            let bd = bias.data();
            for co in 0..cout {
                let base = (bi * cout + co) * cols;
                for v in &mut out[base..base + cols] {
                    *v += bd[co];
                }
            }
        }
    }
    drop(idata);
    drop(wdata);

    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(bias) = bias {
        parents.push(bias.clone());
    }
    Ok(Tensor::from_op(
        vec![b, cout, ho, wo],
        out,
        parents,
        Box::new(Conv2dBack {
            input: input.clone(),
            weight: weight.clone(),
            bias: bias.cloned(),
            stride,
            pad,
        }),
    ))
}
