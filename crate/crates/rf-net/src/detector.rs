//! Receptive-field keypoint detector: hierarchical feature maps, multi-scale
//! response maps, two-stage softmax fusion into score/orientation/scale maps,
//! and keypoint extraction.

use crate::error::RfError;
use crate::tensor::ops::{add, atan2, leaky_relu, mul, reshape, select_channel, stack0, sum_axis0};
use crate::tensor::{conv2d, instance_norm, scale_softmax, windowed_softmax, Tensor};
use rand::Rng;

/// Spatial extent of the response-sharpening softmax window.
pub const SCORE_WINDOW: usize = 15;

/// Sharpening the response maps uses a small epsilon for the per-layer
/// instance normalizations.
const NORM_EPS: f64 = 1e-5;

/// Receptive field (in pixels) of response layer `n` (1-based): n stacked
/// 3x3 stride-1 convolutions see a (2n+1) x (2n+1) square.
pub fn receptive_field(layer: usize) -> usize {
    2 * layer + 1
}

/// Xavier-uniform initialization in +-sqrt(6 / (fan_in + fan_out)).
pub(crate) fn xavier_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::param(shape, data)
}

/// Detector parameters: `layers` hierarchical 3x3 blocks of constant channel
/// width plus per-layer 1x1 response and orientation heads.
pub struct RfDetParams {
    pub layers: usize,
    pub channels: usize,
    pub leaky_slope: f64,
    block_weights: Vec<Tensor>,
    block_biases: Vec<Tensor>,
    resp_weights: Vec<Tensor>,
    resp_biases: Vec<Tensor>,
    ori_weights: Vec<Tensor>,
}

impl RfDetParams {
    pub fn new(layers: usize, channels: usize, rng: &mut impl Rng) -> Self {
        assert!(layers >= 1, "detector needs at least one layer");
        let mut block_weights = Vec::new();
        let mut block_biases = Vec::new();
        let mut resp_weights = Vec::new();
        let mut resp_biases = Vec::new();
        let mut ori_weights = Vec::new();
        for n in 0..layers {
            let cin = if n == 0 { 1 } else { channels };
            block_weights.push(xavier_uniform(
                &[channels, cin, 3, 3],
                cin * 9,
                channels * 9,
                rng,
            ));
            block_biases.push(Tensor::param(&[channels], vec![0.0; channels]));
            resp_weights.push(xavier_uniform(&[1, channels, 1, 1], channels, 1, rng));
            resp_biases.push(Tensor::param(&[1], vec![0.0]));
            ori_weights.push(xavier_uniform(&[2, channels, 1, 1], channels, 2, rng));
        }
        RfDetParams {
            layers,
            channels,
            leaky_slope: 0.01,
            block_weights,
            block_biases,
            resp_weights,
            resp_biases,
            ori_weights,
        }
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for n in 0..self.layers {
            out.push((format!("det.block{n}.weight"), self.block_weights[n].clone()));
            out.push((format!("det.block{n}.bias"), self.block_biases[n].clone()));
            out.push((format!("det.resp{n}.weight"), self.resp_weights[n].clone()));
            out.push((format!("det.resp{n}.bias"), self.resp_biases[n].clone()));
            out.push((format!("det.ori{n}.weight"), self.ori_weights[n].clone()));
        }
        out
    }

    pub fn min_scale(&self) -> f64 {
        receptive_field(1) as f64
    }

    pub fn max_scale(&self) -> f64 {
        receptive_field(self.layers) as f64
    }
}

/// Dense maps produced by one detector forward pass. The raw and sharpened
/// response maps are retained for loss computation.
pub struct DetectorOutputs {
    /// Fused score map, `[H, W]`.
    pub score: Tensor,
    /// Orientation map in radians, `[H, W]`.
    pub orientation: Tensor,
    /// Scale map in pixels, `[H, W]`.
    pub scale: Tensor,
    /// Per-layer keypoint probabilities, `[N, H, W]`.
    pub pr: Tensor,
    /// Raw response maps, `[N, H, W]`.
    pub responses: Tensor,
    /// Sharpened response maps, `[N, H, W]`.
    pub responses_sharp: Tensor,
}

/// A detected keypoint in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
    pub orientation: f64,
    pub scale: f64,
}

/// Hierarchical feature maps `M^n`, one per layer. Block `n >= 2` (1-based)
/// adds an identity shortcut, which leaves the receptive-field bookkeeping
/// intact.
pub fn build_feature_maps(image: &Tensor, params: &RfDetParams) -> Result<Vec<Tensor>, RfError> {
    if image.shape().len() != 4 || image.shape()[0] != 1 || image.shape()[1] != 1 {
        return Err(RfError::Shape(format!(
            "build_feature_maps: expected [1,1,H,W], got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[2], image.shape()[3]);
    if h < 3 || w < 3 {
        return Err(RfError::Shape(format!(
            "build_feature_maps: image {h}x{w} smaller than the 3x3 kernel"
        )));
    }
    let mut maps = Vec::with_capacity(params.layers);
    let mut prev = image.clone();
    for n in 0..params.layers {
        let conv = conv2d(
            &prev,
            &params.block_weights[n],
            Some(&params.block_biases[n]),
            1,
            1,
        )?;
        let activated = leaky_relu(&instance_norm(&conv, NORM_EPS)?, params.leaky_slope);
        let out = if n == 0 { activated } else { add(&activated, &prev) };
        maps.push(out.clone());
        prev = out;
    }
    Ok(maps)
}

/// Response maps `h^n = instance_norm(conv1x1(M^n))`, stacked to `[N, H, W]`.
pub fn build_response_maps(maps: &[Tensor], params: &RfDetParams) -> Result<Tensor, RfError> {
    let mut layers = Vec::with_capacity(maps.len());
    for (n, m) in maps.iter().enumerate() {
        let resp = conv2d(m, &params.resp_weights[n], Some(&params.resp_biases[n]), 1, 0)?;
        let normed = instance_norm(&resp, NORM_EPS)?;
        let (h, w) = (normed.shape()[2], normed.shape()[3]);
        layers.push(reshape(&normed, &[h, w]));
    }
    Ok(stack0(&layers))
}

/// Two-stage softmax fusion: sharpen responses over a sliding
/// `SCORE_WINDOW`-wide window spanning all layers, turn them into per-layer
/// probabilities, and merge into the score map `S = sum_n hhat^n * Pr^n`.
///
/// Returns `(S, Pr, hhat)`.
pub fn fuse_score(responses: &Tensor) -> Result<(Tensor, Tensor, Tensor), RfError> {
    let sharp = windowed_softmax(responses, SCORE_WINDOW)?;
    let pr = scale_softmax(&sharp);
    let score = sum_axis0(&mul(&sharp, &pr));
    Ok((score, pr, sharp))
}

/// Orientation map: per layer a 2-channel 1x1 convolution predicts the sine
/// and cosine, `theta^n = atan2(sin, cos)`, fused by the per-layer
/// probabilities. Angles are summed directly, so weighted means that
/// straddle the +-pi wrap-around resolve to the arithmetic mean of raw
/// angles rather than the circular mean.
pub fn estimate_orientation(
    maps: &[Tensor],
    pr: &Tensor,
    params: &RfDetParams,
) -> Result<Tensor, RfError> {
    let mut layers = Vec::with_capacity(maps.len());
    for (n, m) in maps.iter().enumerate() {
        let sc = conv2d(m, &params.ori_weights[n], None, 1, 0)?;
        let (h, w) = (sc.shape()[2], sc.shape()[3]);
        let sin = reshape(&select_channel(&sc, 0), &[h, w]);
        let cos = reshape(&select_channel(&sc, 1), &[h, w]);
        layers.push(atan2(&sin, &cos));
    }
    let theta = stack0(&layers);
    Ok(sum_axis0(&mul(&theta, pr)))
}

/// Scale map: probability-weighted sum of the fixed per-layer receptive
/// field sizes `2n + 1`.
pub fn estimate_scale(pr: &Tensor) -> Tensor {
    let (n, h, w) = (pr.shape()[0], pr.shape()[1], pr.shape()[2]);
    let mut consts = Vec::with_capacity(n * h * w);
    for layer in 1..=n {
        consts.extend(std::iter::repeat(receptive_field(layer) as f64).take(h * w));
    }
    let rf = Tensor::from_vec(&[n, h, w], consts);
    sum_axis0(&mul(&rf, pr))
}

/// Full detector forward pass.
pub fn detect(image: &Tensor, params: &RfDetParams) -> Result<DetectorOutputs, RfError> {
    let maps = build_feature_maps(image, params)?;
    let responses = build_response_maps(&maps, params)?;
    let (score, pr, sharp) = fuse_score(&responses)?;
    let orientation = estimate_orientation(&maps, &pr, params)?;
    let scale = estimate_scale(&pr);
    Ok(DetectorOutputs {
        score,
        orientation,
        scale,
        pr,
        responses,
        responses_sharp: sharp,
    })
}

/// Select up to `k` keypoints by descending score with row-major
/// tie-breaking, optionally suppressing pixels within `nms_radius`
/// (Chebyshev) of an already-selected keypoint and excluding a border
/// margin. Pure: identical outputs yield identical keypoint lists.
pub fn select_keypoints(
    out: &DetectorOutputs,
    k: usize,
    nms_radius: usize,
    border: usize,
) -> Vec<Keypoint> {
    assert!(k >= 1, "select_keypoints: k must be at least 1");
    let (h, w) = (out.score.shape()[0], out.score.shape()[1]);
    let score = out.score.data();
    let theta = out.orientation.data();
    let scale = out.scale.data();
    let mut order: Vec<usize> = (0..h * w)
        .filter(|i| {
            let (y, x) = (i / w, i % w);
            y >= border && x >= border && y + border < h && x + border < w
        })
        .collect();
    order.sort_by(|a, b| {
        score[*b].partial_cmp(&score[*a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(b))
    });
    let mut selected: Vec<Keypoint> = Vec::with_capacity(k.min(order.len()));
    for i in order {
        if selected.len() == k {
            break;
        }
        let (y, x) = (i / w, i % w);
        if nms_radius > 0 {
            let r = nms_radius as f64;
            let close = selected
                .iter()
                .any(|kp| (kp.x - x as f64).abs() <= r && (kp.y - y as f64).abs() <= r);
            if close {
                continue;
            }
        }
        selected.push(Keypoint {
            x: x as f64,
            y: y as f64,
            score: score[i],
            orientation: theta[i],
            scale: scale[i],
        });
    }
    selected
}
