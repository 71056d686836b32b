//! Homography algebra, map and point warping, oriented patch cropping.

use crate::error::RfError;
use crate::tensor::{bilinear_sample, oriented_grid, Tensor};
use crate::tensor::ops::reshape;

const DET_TOLERANCE: f64 = 1e-12;

/// 3x3 planar projective transform, stored destination <- source, normalized
/// so the bottom-right entry is 1 when nonzero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: [f64; 9],
}

impl Homography {
    pub fn new(mut m: [f64; 9]) -> Result<Self, RfError> {
        let det = det3(&m);
        if det.abs() <= DET_TOLERANCE {
            return Err(RfError::SingularHomography(det.abs()));
        }
        if m[8] != 0.0 {
            let s = m[8];
            for v in &mut m {
                *v /= s;
            }
        }
        Ok(Homography { m })
    }

    pub fn identity() -> Self {
        Homography { m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0] }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography { m: [1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0] }
    }

    pub fn as_array(&self) -> &[f64; 9] {
        &self.m
    }

    pub fn inverse(&self) -> Result<Homography, RfError> {
        let m = &self.m;
        let det = det3(m);
        if det.abs() <= DET_TOLERANCE {
            return Err(RfError::SingularHomography(det.abs()));
        }
        let inv = [
            (m[4] * m[8] - m[5] * m[7]) / det,
            (m[2] * m[7] - m[1] * m[8]) / det,
            (m[1] * m[5] - m[2] * m[4]) / det,
            (m[5] * m[6] - m[3] * m[8]) / det,
            (m[0] * m[8] - m[2] * m[6]) / det,
            (m[2] * m[3] - m[0] * m[5]) / det,
            (m[3] * m[7] - m[4] * m[6]) / det,
            (m[1] * m[6] - m[0] * m[7]) / det,
            (m[0] * m[4] - m[1] * m[3]) / det,
        ];
        Homography::new(inv)
    }

    pub fn compose(&self, other: &Homography) -> Result<Homography, RfError> {
        let a = &self.m;
        let b = &other.m;
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = (0..3).map(|k| a[r * 3 + k] * b[k * 3 + c]).sum();
            }
        }
        Homography::new(out)
    }

    /// Apply to one point; `None` when the homogeneous weight vanishes.
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let m = &self.m;
        let w = m[6] * x + m[7] * y + m[8];
        if w.abs() < 1e-9 {
            return None;
        }
        Some((
            (m[0] * x + m[1] * y + m[2]) / w,
            (m[3] * x + m[4] * y + m[5]) / w,
        ))
    }

    pub fn det(&self) -> f64 {
        det3(&self.m)
    }

    /// Conjugate by per-axis similarity scalings, adapting a homography
    /// between full-resolution frames to resized frames:
    /// `H' = S_dst * H * S_src^{-1}`.
    pub fn rescaled(
        &self,
        src_scale: (f64, f64),
        dst_scale: (f64, f64),
    ) -> Result<Homography, RfError> {
        let s_dst = Homography { m: [dst_scale.0, 0.0, 0.0, 0.0, dst_scale.1, 0.0, 0.0, 0.0, 1.0] };
        let s_src_inv =
            Homography { m: [1.0 / src_scale.0, 0.0, 0.0, 0.0, 1.0 / src_scale.1, 0.0, 0.0, 0.0, 1.0] };
        s_dst.compose(self)?.compose(&s_src_inv)
    }

    /// Parse the 9-real whitespace-separated row-major text format.
    pub fn parse(text: &str, path: &str) -> Result<Homography, RfError> {
        let values: Result<Vec<f64>, _> = text.split_whitespace().map(str::parse).collect();
        let values = values.map_err(|e| RfError::parse(path, format!("bad number: {e}")))?;
        if values.len() != 9 {
            return Err(RfError::parse(
                path,
                format!("expected 9 values, found {}", values.len()),
            ));
        }
        let mut m = [0.0; 9];
        m.copy_from_slice(&values);
        Homography::new(m)
    }

    pub fn to_text(&self) -> String {
        let m = &self.m;
        format!(
            "{} {} {}\n{} {} {}\n{} {} {}\n",
            m[0], m[1], m[2], m[3], m[4], m[5], m[6], m[7], m[8]
        )
    }
}

fn det3(m: &[f64; 9]) -> f64 {
    m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6])
}

/// Oriented, scaled crop window around a keypoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchSpec {
    pub center: (f64, f64),
    pub orientation: f64,
    pub scale: f64,
    pub patch_size: usize,
    pub crop_factor: f64,
}

impl PatchSpec {
    pub fn new(center: (f64, f64), orientation: f64, scale: f64) -> Self {
        PatchSpec { center, orientation, scale, patch_size: 32, crop_factor: 1.0 }
    }
}

/// Warp points through a homography. Points whose homogeneous weight
/// vanishes are reported as `None`.
pub fn warp_points(h: &Homography, pts: &[(f64, f64)]) -> Vec<Option<(f64, f64)>> {
    pts.iter().map(|&(x, y)| h.apply(x, y)).collect()
}

/// Inverse-warp a `[H, W]` map: each destination pixel samples the source at
/// `H^{-1} (x, y, 1)` bilinearly, zero outside. Differentiable w.r.t. `src`.
pub fn warp_map(h: &Homography, src: &Tensor, out_shape: (usize, usize)) -> Result<Tensor, RfError> {
    let (mask, out) = warp_map_with_mask(h, src, out_shape)?;
    let _ = mask;
    Ok(out)
}

/// As [`warp_map`], also returning a validity mask: `true` where the
/// destination pixel's preimage falls inside the source extent.
pub fn warp_map_with_mask(
    h: &Homography,
    src: &Tensor,
    out_shape: (usize, usize),
) -> Result<(Vec<bool>, Tensor), RfError> {
    if src.shape().len() != 2 {
        return Err(RfError::Shape(format!(
            "warp_map: expected an [H, W] map, got {:?}",
            src.shape()
        )));
    }
    let inv = h.inverse()?;
    let (oh, ow) = out_shape;
    let (sh, sw) = (src.shape()[0], src.shape()[1]);
    let mut grid = Vec::with_capacity(oh * ow * 2);
    let mut mask = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            match inv.apply(x as f64, y as f64) {
                Some((sx, sy)) => {
                    mask.push(sx >= 0.0 && sy >= 0.0 && sx <= (sw - 1) as f64 && sy <= (sh - 1) as f64);
                    grid.push(sx);
                    grid.push(sy);
                }
                None => {
                    mask.push(false);
                    grid.push(-1.0);
                    grid.push(-1.0);
                }
            }
        }
    }
    let grid = Tensor::from_vec(&[oh * ow, 2], grid);
    let src3 = reshape(src, &[1, sh, sw]);
    let sampled = bilinear_sample(&src3, &grid);
    Ok((mask, reshape(&sampled, &[oh, ow])))
}

/// Crop an oriented square window from a `[1, H, W]` image, resampled to
/// `patch_size x patch_size`. Differentiable w.r.t. the image and the
/// orientation/scale tensors.
pub fn crop_patch_t(
    image: &Tensor,
    center: (f64, f64),
    orientation: &Tensor,
    scale: &Tensor,
    patch_size: usize,
    crop_factor: f64,
) -> Tensor {
    assert_eq!(image.shape().len(), 3, "crop_patch expects a [1, H, W] image");
    let grid = oriented_grid(orientation, scale, center, patch_size, crop_factor);
    let sampled = bilinear_sample(image, &grid);
    reshape(&sampled, &[1, patch_size, patch_size])
}

/// Crop with a plain [`PatchSpec`]; no gradient flows into the spec fields.
pub fn crop_patch(image: &Tensor, spec: &PatchSpec) -> Tensor {
    crop_patch_t(
        image,
        spec.center,
        &Tensor::scalar(spec.orientation),
        &Tensor::scalar(spec.scale),
        spec.patch_size,
        spec.crop_factor,
    )
}

/// Euclidean distance between the centroids of two patches.
pub fn centroid_distance(p: &PatchSpec, q: &PatchSpec) -> f64 {
    let dx = p.center.0 - q.center.0;
    let dy = p.center.1 - q.center.1;
    (dx * dx + dy * dy).sqrt()
}
