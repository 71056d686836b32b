//! Differentiable bilinear sampling and oriented crop grids.

use super::{Backward, Tensor};

/// Bilinear read of a single-channel raster at sub-pixel (x, y), with the
/// out-of-range rule shared by the tensor op and the plain image path:
/// coordinates outside `[0, w-1] x [0, h-1]` yield 0.
pub(crate) fn bilinear_at(data: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
        return 0.0;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let m00 = data[y0 * w + x0];
    let m01 = data[y0 * w + x1];
    let m10 = data[y1 * w + x0];
    let m11 = data[y1 * w + x1];
    (1.0 - fy) * ((1.0 - fx) * m00 + fx * m01) + fy * ((1.0 - fx) * m10 + fx * m11)
}

struct BilinearSampleBack {
    map: Tensor,
    grid: Tensor,
    c: usize,
    h: usize,
    w: usize,
}

impl Backward for BilinearSampleBack {
    fn backward(&self, g: &[f64]) {
        let (c, h, w) = (self.c, self.h, self.w);
        let gd = self.grid.data();
        let md = self.map.data();
        let p = gd.len() / 2;
        let mut gmap = vec![0.0; md.len()];
        let mut ggrid = vec![0.0; gd.len()];
        for pi in 0..p {
            let x = gd[pi * 2];
            let y = gd[pi * 2 + 1];
            if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
                continue; // sampled zero; zero gradient to map and grid
            }
            let x0 = x.floor() as usize;
            let y0 = y.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = x - x0 as f64;
            let fy = y - y0 as f64;
            for ci in 0..c {
                let gv = g[ci * p + pi];
                let base = ci * h * w;
                gmap[base + y0 * w + x0] += gv * (1.0 - fx) * (1.0 - fy);
                gmap[base + y0 * w + x1] += gv * fx * (1.0 - fy);
                gmap[base + y1 * w + x0] += gv * (1.0 - fx) * fy;
                gmap[base + y1 * w + x1] += gv * fx * fy;
                let m00 = md[base + y0 * w + x0];
                let m01 = md[base + y0 * w + x1];
                let m10 = md[base + y1 * w + x0];
                let m11 = md[base + y1 * w + x1];
                ggrid[pi * 2] += gv * ((1.0 - fy) * (m01 - m00) + fy * (m11 - m10));
                ggrid[pi * 2 + 1] += gv * ((1.0 - fx) * (m10 - m00) + fx * (m11 - m01));
            }
        }
        drop(gd);
        drop(md);
        self.map.accumulate_grad(&gmap);
        self.grid.accumulate_grad(&ggrid);
    }
}

/// Sample a `[C, H, W]` map at `P` sub-pixel positions given as a `[P, 2]`
/// grid of (x, y) pixel coordinates, yielding `[C, P]`. Out-of-range points
/// return 0 and propagate no gradient.
pub fn bilinear_sample(map: &Tensor, grid: &Tensor) -> Tensor {
    assert_eq!(map.shape().len(), 3, "bilinear_sample expects a [C,H,W] map");
    assert_eq!(grid.shape().len(), 2, "bilinear_sample expects a [P,2] grid");
    assert_eq!(grid.shape()[1], 2, "grid rows must be (x, y) pairs");
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let p = grid.shape()[0];
    let md = map.data();
    let gd = grid.data();
    let mut out = vec![0.0; c * p];
    for ci in 0..c {
        let plane = &md[ci * h * w..(ci + 1) * h * w];
        for pi in 0..p {
            out[ci * p + pi] = bilinear_at(plane, w, h, gd[pi * 2], gd[pi * 2 + 1]);
        }
    }
    drop(md);
    drop(gd);
    Tensor::from_op(
        vec![c, p],
        out,
        vec![map.clone(), grid.clone()],
        Box::new(BilinearSampleBack { map: map.clone(), grid: grid.clone(), c, h, w }),
    )
}

struct OrientedGridBack {
    theta: Tensor,
    scale: Tensor,
    uv: Vec<(f64, f64)>,
    crop_factor: f64,
}

impl Backward for OrientedGridBack {
    fn backward(&self, g: &[f64]) {
        let th = self.theta.item();
        let s = self.scale.item();
        let (sin, cos) = th.sin_cos();
        let cf = self.crop_factor;
        let mut gt = 0.0;
        let mut gs = 0.0;
        for (pi, (u, v)) in self.uv.iter().enumerate() {
            let gx = g[pi * 2];
            let gy = g[pi * 2 + 1];
            // x = cx + (cos*u - sin*v)*cf*s ; y = cy + (sin*u + cos*v)*cf*s
            gt += gx * (-sin * u - cos * v) * cf * s + gy * (cos * u - sin * v) * cf * s;
            gs += gx * (cos * u - sin * v) * cf + gy * (sin * u + cos * v) * cf;
        }
        self.theta.accumulate_grad(&[gt]);
        self.scale.accumulate_grad(&[gs]);
    }
}

/// Build a `[ps*ps, 2]` sampling grid for an oriented square window.
///
/// Normalized grid coordinates (u, v) span `[-0.5, 0.5]^2` and map to
/// `center + R(theta) * (u, v) * crop_factor * scale`, so the window side
/// (distance between first and last sample centers) is `crop_factor * scale`
/// pixels. Positive `theta` rotates counter-clockwise in image coordinates
/// with y pointing down. Differentiable with respect to `theta` and `scale`
/// (both single-element tensors).
pub fn oriented_grid(
    theta: &Tensor,
    scale: &Tensor,
    center: (f64, f64),
    patch_size: usize,
    crop_factor: f64,
) -> Tensor {
    assert_eq!(theta.numel(), 1, "theta must be a scalar tensor");
    assert_eq!(scale.numel(), 1, "scale must be a scalar tensor");
    assert!(patch_size >= 2, "patch_size must be at least 2");
    let th = theta.item();
    let s = scale.item();
    let (sin, cos) = th.sin_cos();
    let side = crop_factor * s;
    let ps = patch_size;
    let mut uv = Vec::with_capacity(ps * ps);
    let mut data = Vec::with_capacity(ps * ps * 2);
    for row in 0..ps {
        let v = -0.5 + row as f64 / (ps - 1) as f64;
        for coli in 0..ps {
            let u = -0.5 + coli as f64 / (ps - 1) as f64;
            uv.push((u, v));
            data.push(center.0 + (cos * u - sin * v) * side);
            data.push(center.1 + (sin * u + cos * v) * side);
        }
    }
    Tensor::from_op(
        vec![ps * ps, 2],
        data,
        vec![theta.clone(), scale.clone()],
        Box::new(OrientedGridBack {
            theta: theta.clone(),
            scale: scale.clone(),
            uv,
            crop_factor,
        }),
    )
}
