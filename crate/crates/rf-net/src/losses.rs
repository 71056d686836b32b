//! Training losses: Gaussian-rendered score supervision, patch loss over
//! corresponding descriptors, and the hard-mined description loss with a
//! neighbor mask, plus the weighted detector-loss combination.

use crate::descriptor::distance_matrix;
use crate::detector::DetectorOutputs;
use crate::error::RfError;
use crate::geometry::{centroid_distance, warp_map_with_mask, Homography, PatchSpec};
use crate::tensor::ops::{add, add_scalar, gather2, mean_all, mul, relu, scale, sub, sum_all};
use crate::tensor::Tensor;

/// Loss hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// Keypoints per image.
    pub k: usize,
    /// Ground-truth Gaussian std, pixels.
    pub sigma: f64,
    /// Neighbor-mask radius, pixels.
    pub neighbor_radius: f64,
    /// Hard-loss margin.
    pub margin: f64,
    /// Score-loss weight in the detector loss.
    pub lambda1: f64,
    /// Patch-loss weight in the detector loss.
    pub lambda2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            k: 512,
            sigma: 0.5,
            neighbor_radius: 5.0,
            margin: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), RfError> {
        if self.k == 0
            || self.sigma <= 0.0
            || self.neighbor_radius < 0.0
            || self.margin <= 0.0
            || self.lambda1 < 0.0
            || self.lambda2 < 0.0
        {
            return Err(RfError::Config(format!("invalid loss config: {self:?}")));
        }
        Ok(())
    }
}

/// K keypoints in image i paired index-for-index with their warped
/// counterparts in image j.
#[derive(Debug, Clone)]
pub struct CorrespondenceBatch {
    pub anchors: Vec<PatchSpec>,
    pub counterparts: Vec<PatchSpec>,
    /// Pixel coordinates (x, y) of the anchors in image i.
    pub anchor_pixels: Vec<(usize, usize)>,
    /// Rounded pixel coordinates (x, y) of the counterparts in image j.
    pub counterpart_pixels: Vec<(usize, usize)>,
    pub h_ij: Homography,
}

impl CorrespondenceBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Render the ground-truth score map for image i from the other branch's
/// score map `S_j`: warp `S_j` into frame i through `H_ji`, take the top `k`
/// surviving pixels, and stamp a unit-peak Gaussian of std `sigma` at each,
/// merged by elementwise max. Returns the map (a constant — no gradient
/// flows back into `S_j`) and the kept pixel coordinates (x, y).
///
/// Pixels whose preimage leaves the source image, and pixels with
/// non-positive warped score, are never selected; when the whole map is
/// wiped out the kept list is empty and the map is all zeros.
pub fn make_ground_truth(
    s_j: &Tensor,
    h_ji: &Homography,
    k: usize,
    sigma: f64,
) -> Result<(Tensor, Vec<(usize, usize)>), RfError> {
    if s_j.shape().len() != 2 {
        return Err(RfError::Shape(format!(
            "make_ground_truth: expected [H, W] score map, got {:?}",
            s_j.shape()
        )));
    }
    if k == 0 || sigma <= 0.0 {
        return Err(RfError::Config(format!(
            "make_ground_truth: k = {k}, sigma = {sigma}"
        )));
    }
    let (h, w) = (s_j.shape()[0], s_j.shape()[1]);
    let (mask, warped) = warp_map_with_mask(h_ji, &s_j.detach(), (h, w))?;
    let wd = warped.data();

    let mut candidates: Vec<usize> =
        (0..h * w).filter(|&i| mask[i] && wd[i] > 0.0).collect();
    candidates.sort_by(|a, b| {
        wd[*b].partial_cmp(&wd[*a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(b))
    });
    candidates.truncate(k);

    let radius = (3.0 * sigma).ceil() as isize;
    let inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);
    let mut g = vec![0.0; h * w];
    let mut kept = Vec::with_capacity(candidates.len());
    for &i in &candidates {
        let (cy, cx) = ((i / w) as isize, (i % w) as isize);
        kept.push((cx as usize, cy as usize));
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let (y, x) = (cy + dy, cx + dx);
                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    continue;
                }
                let v = (-((dx * dx + dy * dy) as f64) * inv_two_sigma2).exp();
                let cell = &mut g[y as usize * w + x as usize];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    }
    Ok((Tensor::from_vec(&[h, w], g), kept))
}

/// Mean squared error between a score map and its ground truth.
pub fn score_loss(s_i: &Tensor, g_i: &Tensor) -> Result<Tensor, RfError> {
    if s_i.shape() != g_i.shape() {
        return Err(RfError::Shape(format!(
            "score_loss: shapes {:?} and {:?} differ",
            s_i.shape(),
            g_i.shape()
        )));
    }
    let d = sub(s_i, g_i);
    Ok(mean_all(&mul(&d, &d)))
}

/// Pair each kept ground-truth point in image i with its warped location in
/// image j. Orientation and scale come from each image's own predicted maps,
/// read at the (rounded) pixel. Points whose counterpart leaves image j are
/// dropped; an empty result is reported as a degenerate pair.
pub fn build_correspondences(
    kept: &[(usize, usize)],
    h_ij: &Homography,
    det_i: &DetectorOutputs,
    det_j: &DetectorOutputs,
    patch_size: usize,
    crop_factor: f64,
) -> Result<CorrespondenceBatch, RfError> {
    let (hi, wi) = (det_i.score.shape()[0], det_i.score.shape()[1]);
    let (hj, wj) = (det_j.score.shape()[0], det_j.score.shape()[1]);
    let theta_i = det_i.orientation.data();
    let scale_i = det_i.scale.data();
    let theta_j = det_j.orientation.data();
    let scale_j = det_j.scale.data();

    let mut batch = CorrespondenceBatch {
        anchors: Vec::new(),
        counterparts: Vec::new(),
        anchor_pixels: Vec::new(),
        counterpart_pixels: Vec::new(),
        h_ij: *h_ij,
    };
    for &(x, y) in kept {
        if x >= wi || y >= hi {
            return Err(RfError::Shape(format!(
                "build_correspondences: kept point ({x}, {y}) outside {wi}x{hi} map"
            )));
        }
        let Some((jx, jy)) = h_ij.apply(x as f64, y as f64) else {
            continue;
        };
        if jx < 0.0 || jy < 0.0 || jx > (wj - 1) as f64 || jy > (hj - 1) as f64 {
            continue;
        }
        let (px, py) = (jx.round() as usize, jy.round() as usize);
        let ai = y * wi + x;
        let ci = py.min(hj - 1) * wj + px.min(wj - 1);
        batch.anchors.push(PatchSpec {
            center: (x as f64, y as f64),
            orientation: theta_i[ai],
            scale: scale_i[ai],
            patch_size,
            crop_factor,
        });
        batch.counterparts.push(PatchSpec {
            center: (jx, jy),
            orientation: theta_j[ci],
            scale: scale_j[ci],
            patch_size,
            crop_factor,
        });
        batch.anchor_pixels.push((x, y));
        batch.counterpart_pixels.push((px, py));
    }
    if batch.is_empty() {
        return Err(RfError::DegeneratePair(
            "no ground-truth keypoint survives warping into the counterpart image".into(),
        ));
    }
    Ok(batch)
}

/// Mean descriptor distance over corresponding pairs: `(1/K) sum_k
/// d(D_i^k, D_j^k)` for `[K, d]` descriptor batches.
pub fn patch_loss(d_i: &Tensor, d_j: &Tensor) -> Result<Tensor, RfError> {
    if d_i.shape() != d_j.shape() || d_i.shape().len() != 2 || d_i.shape()[0] == 0 {
        return Err(RfError::Shape(format!(
            "patch_loss: need matching non-empty [K, d] batches, got {:?} and {:?}",
            d_i.shape(),
            d_j.shape()
        )));
    }
    let k = d_i.shape()[0];
    let m = distance_matrix(d_i, d_j);
    let diag: Vec<(usize, usize)> = (0..k).map(|i| (i, i)).collect();
    Ok(mean_all(&gather2(&m, &diag)))
}

/// Hard-mined triplet loss with a neighbor mask. For each pair k the positive
/// distance is `M(k, k)`; the hardest negative is the minimum over row
/// entries `M(k, n')` whose counterpart centroids are farther than
/// `neighbor_radius` from counterpart k, and column entries `M(m', k)` whose
/// anchor centroids are farther than `neighbor_radius` from anchor k. The
/// loss is `(1/K) sum_k max(0, margin + D_pos - D_ng)`.
///
/// Pairs with every candidate negative masked contribute zero; the second
/// return value counts them.
pub fn description_loss(
    d_i: &Tensor,
    d_j: &Tensor,
    batch: &CorrespondenceBatch,
    neighbor_radius: f64,
    margin: f64,
) -> Result<(Tensor, usize), RfError> {
    let k = batch.len();
    if k < 2 {
        return Err(RfError::Shape(format!(
            "description_loss: needs at least 2 correspondences, got {k}"
        )));
    }
    if d_i.shape() != [k, d_i.shape()[1]] || d_j.shape() != d_i.shape() {
        return Err(RfError::Shape(format!(
            "description_loss: descriptor batches {:?} / {:?} do not match {k} correspondences",
            d_i.shape(),
            d_j.shape()
        )));
    }
    let m = distance_matrix(d_i, d_j);
    // Hard-negative selection happens on a value snapshot; only the chosen
    // entries re-enter the graph, giving the hinge its subgradient.
    let md = m.to_vec();
    let mut pos_idx = Vec::with_capacity(k);
    let mut neg_idx = Vec::with_capacity(k);
    let mut masked_out = 0usize;
    for a in 0..k {
        let mut best: Option<(f64, (usize, usize))> = None;
        let mut consider = |v: f64, idx: (usize, usize)| {
            if best.map_or(true, |(bv, _)| v < bv) {
                best = Some((v, idx));
            }
        };
        for n in 0..k {
            if n != a && centroid_distance(&batch.counterparts[a], &batch.counterparts[n]) > neighbor_radius
            {
                consider(md[a * k + n], (a, n));
            }
        }
        for mm in 0..k {
            if mm != a && centroid_distance(&batch.anchors[mm], &batch.anchors[a]) > neighbor_radius {
                consider(md[mm * k + a], (mm, a));
            }
        }
        match best {
            Some((_, idx)) => {
                pos_idx.push((a, a));
                neg_idx.push(idx);
            }
            None => masked_out += 1,
        }
    }
    if masked_out > 0 {
        log::warn!("description_loss: {masked_out} of {k} pairs had every negative masked");
    }
    if pos_idx.is_empty() {
        return Ok((Tensor::scalar(0.0), masked_out));
    }
    let pos = gather2(&m, &pos_idx);
    let neg = gather2(&m, &neg_idx);
    let hinge = relu(&add_scalar(&sub(&pos, &neg), margin));
    Ok((scale(&sum_all(&hinge), 1.0 / k as f64), masked_out))
}

/// Detector loss: `lambda1 * score + lambda2 * patch`.
pub fn detector_loss(score: &Tensor, patch: &Tensor, lambda1: f64, lambda2: f64) -> Tensor {
    add(&scale(score, lambda1), &scale(patch, lambda2))
}
