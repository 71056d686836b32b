//! Siamese training loop, run configuration, and binary checkpoints.

use crate::data::ImageBuffer;
use crate::descriptor::{describe, RfDesParams, PATCH_SIZE};
use crate::detector::{detect, DetectorOutputs, RfDetParams};
use crate::error::RfError;
use crate::geometry::{crop_patch, crop_patch_t, Homography, PatchSpec};
use crate::losses::{
    build_correspondences, description_loss, detector_loss, make_ground_truth, patch_loss,
    score_loss, LossConfig,
};
use crate::tensor::ops::{gather2, reshape, stack0};
use crate::tensor::{adam_step, AdamState, BatchNormState, BnMode, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::{Path, PathBuf};

const CHECKPOINT_MAGIC: &[u8; 4] = b"RFNW";
const CHECKPOINT_VERSION: u32 = 1;

/// Training hyperparameters and architecture configuration.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub iterations: u64,
    pub seed: u64,
    pub desc_steps_per_iter: usize,
    pub det_steps_per_iter: usize,
    pub loss: LossConfig,
    pub det_layers: usize,
    pub det_channels: usize,
    pub des_widths: [usize; 6],
    /// Working resolution (width, height).
    pub image_size: (usize, usize),
    pub crop_factor: f64,
    /// Save every this many iterations; 0 disables periodic saves.
    pub checkpoint_interval: u64,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            iterations: 500,
            seed: 0,
            desc_steps_per_iter: 2,
            det_steps_per_iter: 1,
            loss: LossConfig::default(),
            det_layers: 10,
            det_channels: 16,
            des_widths: RfDesParams::DEFAULT_WIDTHS,
            image_size: crate::data::DEFAULT_SIZE,
            crop_factor: 1.0,
            checkpoint_interval: 0,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RfError> {
        self.loss.validate()?;
        if self.lr <= 0.0
            || self.desc_steps_per_iter == 0
            || self.det_steps_per_iter == 0
            || self.det_layers == 0
            || self.det_channels == 0
            || self.image_size.0 < 3
            || self.image_size.1 < 3
            || self.crop_factor <= 0.0
        {
            return Err(RfError::Config(format!("invalid train config: {self:?}")));
        }
        Ok(())
    }

    /// Serialize as `key = value` lines (the checkpoint config snapshot and
    /// the on-disk run-config format).
    pub fn to_kv(&self) -> String {
        let widths = self
            .des_widths
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "lr = {}\niterations = {}\nseed = {}\ndesc_steps = {}\ndet_steps = {}\n\
             k = {}\nsigma = {}\nneighbor_radius = {}\nmargin = {}\nlambda1 = {}\nlambda2 = {}\n\
             det_layers = {}\ndet_channels = {}\ndes_widths = {}\n\
             image_width = {}\nimage_height = {}\ncrop_factor = {}\ncheckpoint_interval = {}\n",
            self.lr,
            self.iterations,
            self.seed,
            self.desc_steps_per_iter,
            self.det_steps_per_iter,
            self.loss.k,
            self.loss.sigma,
            self.loss.neighbor_radius,
            self.loss.margin,
            self.loss.lambda1,
            self.loss.lambda2,
            self.det_layers,
            self.det_channels,
            widths,
            self.image_size.0,
            self.image_size.1,
            self.crop_factor,
            self.checkpoint_interval,
        )
    }

    /// Parse `key = value` lines over the defaults. Unknown keys are
    /// rejected; '#' starts a comment.
    pub fn from_kv(text: &str, source: &str) -> Result<TrainConfig, RfError> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                RfError::parse(source, format!("line {}: expected key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: &dyn std::fmt::Display| {
                RfError::parse(source, format!("line {}: bad value for {key}: {e}", lineno + 1))
            };
            match key {
                "lr" => cfg.lr = value.parse().map_err(|e| bad(&e))?,
                "iterations" => cfg.iterations = value.parse().map_err(|e| bad(&e))?,
                "seed" => cfg.seed = value.parse().map_err(|e| bad(&e))?,
                "desc_steps" => cfg.desc_steps_per_iter = value.parse().map_err(|e| bad(&e))?,
                "det_steps" => cfg.det_steps_per_iter = value.parse().map_err(|e| bad(&e))?,
                "k" => cfg.loss.k = value.parse().map_err(|e| bad(&e))?,
                "sigma" => cfg.loss.sigma = value.parse().map_err(|e| bad(&e))?,
                "neighbor_radius" => cfg.loss.neighbor_radius = value.parse().map_err(|e| bad(&e))?,
                "margin" => cfg.loss.margin = value.parse().map_err(|e| bad(&e))?,
                "lambda1" => cfg.loss.lambda1 = value.parse().map_err(|e| bad(&e))?,
                "lambda2" => cfg.loss.lambda2 = value.parse().map_err(|e| bad(&e))?,
                "det_layers" => cfg.det_layers = value.parse().map_err(|e| bad(&e))?,
                "det_channels" => cfg.det_channels = value.parse().map_err(|e| bad(&e))?,
                "des_widths" => {
                    let parts: Result<Vec<usize>, _> =
                        value.split(',').map(|p| p.trim().parse()).collect();
                    let parts = parts.map_err(|e| bad(&e))?;
                    if parts.len() != 6 {
                        return Err(bad(&format!("expected 6 widths, found {}", parts.len())));
                    }
                    cfg.des_widths.copy_from_slice(&parts);
                }
                "image_width" => cfg.image_size.0 = value.parse().map_err(|e| bad(&e))?,
                "image_height" => cfg.image_size.1 = value.parse().map_err(|e| bad(&e))?,
                "crop_factor" => cfg.crop_factor = value.parse().map_err(|e| bad(&e))?,
                "checkpoint_interval" => {
                    cfg.checkpoint_interval = value.parse().map_err(|e| bad(&e))?
                }
                other => {
                    return Err(RfError::Config(format!(
                        "{source} line {}: unknown key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The full model: detector and descriptor parameter sets.
pub struct RfNet {
    pub det: RfDetParams,
    pub des: RfDesParams,
}

impl RfNet {
    pub fn new(cfg: &TrainConfig) -> RfNet {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        RfNet {
            det: RfDetParams::new(cfg.det_layers, cfg.det_channels, &mut rng),
            des: RfDesParams::with_widths(cfg.des_widths, &mut rng),
        }
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = self.det.named_parameters();
        out.extend(self.des.named_parameters());
        out
    }
}

/// Mutable training state: model, per-group optimizers, iteration counter.
pub struct TrainState {
    pub model: RfNet,
    pub opt_det: AdamState,
    pub opt_des: AdamState,
    pub iteration: u64,
    pub config: TrainConfig,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> TrainState {
        let model = RfNet::new(&config);
        TrainState {
            opt_det: AdamState::new(config.lr),
            opt_des: AdamState::new(config.lr),
            iteration: 0,
            model,
            config,
        }
    }
}

/// Scalar losses from one training direction.
#[derive(Debug, Clone, Copy)]
pub struct LossRecord {
    pub score: f64,
    pub patch: f64,
    pub description: f64,
    pub detector: f64,
    /// Correspondences whose negatives were all masked (summed over steps).
    pub masked_out: usize,
}

/// Records for the two directions of one iteration; `None` marks a skipped
/// direction (degenerate correspondences).
#[derive(Debug, Clone, Copy)]
pub struct IterationRecord {
    pub forward: Option<LossRecord>,
    pub backward: Option<LossRecord>,
}

impl IterationRecord {
    /// True when both directions were skipped.
    pub fn degenerate(&self) -> bool {
        self.forward.is_none() && self.backward.is_none()
    }
}

/// One training pair: two images and the homography mapping a into b.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub a: ImageBuffer,
    pub b: ImageBuffer,
    pub h_ab: Homography,
}

fn zero_grads(params: &[(String, Tensor)]) {
    for (_, p) in params {
        p.zero_grad();
    }
}

/// Stack fixed-window crops (no gradient into the window parameters).
fn stack_patches(image3: &Tensor, specs: &[PatchSpec]) -> Tensor {
    let parts: Vec<Tensor> = specs.iter().map(|s| crop_patch(image3, s)).collect();
    stack0(&parts)
}

/// Stack crops whose orientation and scale are read differentiably from the
/// detector's dense maps at each spec's pixel.
fn stack_patches_live(
    image3: &Tensor,
    specs: &[PatchSpec],
    pixels: &[(usize, usize)],
    det: &DetectorOutputs,
) -> Tensor {
    let parts: Vec<Tensor> = specs
        .iter()
        .zip(pixels)
        .map(|(spec, &(x, y))| {
            let ori = gather2(&det.orientation, &[(y, x)]);
            let sc = gather2(&det.scale, &[(y, x)]);
            crop_patch_t(image3, spec.center, &ori, &sc, spec.patch_size, spec.crop_factor)
        })
        .collect();
    stack0(&parts)
}

/// Train one direction of a pair: build the ground truth for image a from
/// image b's score map, update the descriptor `desc_steps_per_iter` times on
/// the description loss, then the detector `det_steps_per_iter` times on the
/// combined detector loss. Descriptor steps touch only descriptor
/// parameters and vice versa.
pub fn train_direction(
    state: &mut TrainState,
    img_a: &ImageBuffer,
    img_b: &ImageBuffer,
    h_ab: &Homography,
) -> Result<LossRecord, RfError> {
    let cfg = state.config.clone();
    let ta = img_a.to_tensor();
    let tb = img_b.to_tensor();
    let (h, w) = (ta.shape()[2], ta.shape()[3]);

    // ground truth for image a from branch b (constant w.r.t. the graph)
    let det_b = detect(&tb, &state.model.det)?;
    let h_ba = h_ab.inverse()?;
    let (g_a, kept) = make_ground_truth(&det_b.score, &h_ba, cfg.loss.k, cfg.loss.sigma)?;
    let det_a = detect(&ta, &state.model.det)?;
    let batch = build_correspondences(&kept, h_ab, &det_a, &det_b, PATCH_SIZE, cfg.crop_factor)?;
    if batch.len() < 2 {
        return Err(RfError::DegeneratePair(format!(
            "only {} correspondence(s) survive warping",
            batch.len()
        )));
    }

    let img_a3 = reshape(&ta, &[1, h, w]);
    let img_b3 = reshape(&tb, &[1, img_b.height, img_b.width]);
    let des_params = state.model.des.named_parameters();
    let det_params = state.model.det.named_parameters();

    // descriptor steps: fixed crops (detector detached), fresh descriptors
    // per step on the same correspondence batch
    let patches_a = stack_patches(&img_a3, &batch.anchors);
    let patches_b = stack_patches(&img_b3, &batch.counterparts);
    let mut description = f64::NAN;
    let mut masked_total = 0;
    for _ in 0..cfg.desc_steps_per_iter {
        zero_grads(&des_params);
        let d_i = describe(&patches_a, &state.model.des, BnMode::Train)?;
        let d_j = describe(&patches_b, &state.model.des, BnMode::Train)?;
        let (loss, masked) =
            description_loss(&d_i, &d_j, &batch, cfg.loss.neighbor_radius, cfg.loss.margin)?;
        loss.backward();
        adam_step(&des_params, &mut state.opt_des)?;
        description = loss.item();
        masked_total += masked;
    }

    // detector steps: differentiable path through score fusion and the
    // orientation/scale maps feeding the patch crops
    let all_params = state.model.named_parameters();
    let (mut score, mut patch, mut detector) = (f64::NAN, f64::NAN, f64::NAN);
    for _ in 0..cfg.det_steps_per_iter {
        zero_grads(&all_params);
        let det_a_s = detect(&ta, &state.model.det)?;
        let det_b_s = detect(&tb, &state.model.det)?;
        let sl = score_loss(&det_a_s.score, &g_a)?;
        let pa = stack_patches_live(&img_a3, &batch.anchors, &batch.anchor_pixels, &det_a_s);
        let pb =
            stack_patches_live(&img_b3, &batch.counterparts, &batch.counterpart_pixels, &det_b_s);
        let d_i = describe(&pa, &state.model.des, BnMode::Train)?;
        let d_j = describe(&pb, &state.model.des, BnMode::Train)?;
        let pl = patch_loss(&d_i, &d_j)?;
        let total = detector_loss(&sl, &pl, cfg.loss.lambda1, cfg.loss.lambda2);
        total.backward();
        adam_step(&det_params, &mut state.opt_det)?;
        score = sl.item();
        patch = pl.item();
        detector = total.item();
    }

    Ok(LossRecord { score, patch, description, detector, masked_out: masked_total })
}

/// Train both directions of a pair (a→b, then b→a with the inverse
/// homography) and advance the iteration counter once. Degenerate
/// directions are skipped with a logged reason.
pub fn train_iteration(state: &mut TrainState, pair: &TrainPair) -> Result<IterationRecord, RfError> {
    let forward = match train_direction(state, &pair.a, &pair.b, &pair.h_ab) {
        Ok(r) => Some(r),
        Err(RfError::DegeneratePair(reason)) => {
            log::warn!("iteration {}: forward direction skipped: {reason}", state.iteration);
            None
        }
        Err(e) => return Err(e),
    };
    let backward = match pair
        .h_ab
        .inverse()
        .and_then(|h_ba| train_direction(state, &pair.b, &pair.a, &h_ba))
    {
        Ok(r) => Some(r),
        Err(RfError::DegeneratePair(reason)) => {
            log::warn!("iteration {}: backward direction skipped: {reason}", state.iteration);
            None
        }
        Err(e) => return Err(e),
    };
    state.iteration += 1;
    Ok(IterationRecord { forward, backward })
}

/// Run the loop until `state.config.iterations`, shuffling the pair order
/// each epoch with an rng derived from the run seed. Periodic checkpoints
/// honor `checkpoint_interval` / `checkpoint_path`. The callback sees every
/// iteration record (for loss logging).
pub fn train_loop(
    state: &mut TrainState,
    pairs: &[TrainPair],
    mut on_iteration: impl FnMut(u64, &IterationRecord),
) -> Result<(), RfError> {
    if pairs.is_empty() {
        return Err(RfError::Config("train_loop: no training pairs".into()));
    }
    while state.iteration < state.config.iterations {
        let epoch = state.iteration / pairs.len() as u64;
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(state.config.seed.wrapping_add(epoch.wrapping_mul(0x9E3779B97F4A7C15)));
        order.shuffle(&mut rng);
        // resume mid-epoch at the right offset
        let offset = (state.iteration % pairs.len() as u64) as usize;
        for &idx in order.iter().skip(offset) {
            if state.iteration >= state.config.iterations {
                break;
            }
            let record = train_iteration(state, &pairs[idx])?;
            if record.degenerate() {
                log::warn!("iteration {} degenerate in both directions", state.iteration);
            }
            on_iteration(state.iteration, &record);
            if state.config.checkpoint_interval > 0
                && state.iteration % state.config.checkpoint_interval == 0
            {
                if let Some(path) = state.config.checkpoint_path.clone() {
                    save_checkpoint(state, &path)?;
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic "RFNW", version (u32 LE), entry count (u32), then
// per entry: name length (u32) + UTF-8 name, rank (u32), dims (u32 each),
// values as f32 LE. A length-prefixed UTF-8 key=value config snapshot
// follows the entries.
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct Entry {
    name: String,
    dims: Vec<usize>,
    values: Vec<f64>,
}

fn push_entry(buf: &mut Vec<u8>, name: &str, dims: &[usize], values: &[f64]) {
    buf.extend((name.len() as u32).to_le_bytes());
    buf.extend(name.as_bytes());
    buf.extend((dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend((d as u32).to_le_bytes());
    }
    for &v in values {
        buf.extend((v as f32).to_le_bytes());
    }
}

fn collect_entries(state: &TrainState) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut entries = Vec::new();
    for (name, p) in state.model.named_parameters() {
        entries.push((name, p.shape().to_vec(), p.to_vec()));
    }
    for (i, bn) in state.model.des.bn_snapshot().iter().enumerate() {
        let c = bn.running_mean.len();
        entries.push((format!("des.bn{i}.running_mean"), vec![c], bn.running_mean.clone()));
        entries.push((format!("des.bn{i}.running_var"), vec![c], bn.running_var.clone()));
        entries.push((
            format!("des.bn{i}.batches_seen"),
            vec![1],
            vec![bn.batches_seen as f64],
        ));
    }
    for (group, opt, params) in [
        ("det", &state.opt_det, state.model.det.named_parameters()),
        ("des", &state.opt_des, state.model.des.named_parameters()),
    ] {
        entries.push((format!("opt.{group}.t"), vec![1], vec![opt.t as f64]));
        for (name, p) in params {
            let (m, v) = opt
                .moment_arrays(&name)
                .map(|(m, v)| (m.to_vec(), v.to_vec()))
                .unwrap_or_else(|| (vec![0.0; p.numel()], vec![0.0; p.numel()]));
            entries.push((format!("opt.{group}.m.{name}"), p.shape().to_vec(), m));
            entries.push((format!("opt.{group}.v.{name}"), p.shape().to_vec(), v));
        }
    }
    entries.push(("meta.iteration".into(), vec![1], vec![state.iteration as f64]));
    entries
}

fn encode_checkpoint(state: &TrainState, config_text: &str) -> Vec<u8> {
    let entries = collect_entries(state);
    let mut buf = Vec::new();
    buf.extend(CHECKPOINT_MAGIC);
    buf.extend(CHECKPOINT_VERSION.to_le_bytes());
    buf.extend((entries.len() as u32).to_le_bytes());
    for (name, dims, values) in &entries {
        push_entry(&mut buf, name, dims, values);
    }
    buf.extend((config_text.len() as u32).to_le_bytes());
    buf.extend(config_text.as_bytes());
    buf
}

/// Write a checkpoint atomically (write to a temp file, then rename).
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<(), RfError> {
    let bytes = encode_checkpoint(state, &state.config.to_kv());
    let tmp = path.with_extension("tmp");
    let tp = tmp.display().to_string();
    fs::write(&tmp, &bytes).map_err(|e| RfError::io(&tp, e))?;
    fs::rename(&tmp, path).map_err(|e| RfError::io(path.display().to_string(), e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], RfError> {
        if self.pos + n > self.bytes.len() {
            return Err(RfError::Checkpoint(format!(
                "{}: truncated (needed {} bytes at offset {}, file has {})",
                self.path,
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, RfError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn decode_checkpoint(bytes: &[u8], path: &str) -> Result<(Vec<Entry>, String), RfError> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(RfError::Checkpoint(format!("{path}: bad magic bytes")));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(RfError::Checkpoint(format!(
            "{path}: format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| RfError::Checkpoint(format!("{path}: non-UTF-8 entry name: {e}")))?;
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = r.take(numel * 4)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        entries.push(Entry { name, dims, values });
    }
    let cfg_len = r.u32()? as usize;
    let config_text = String::from_utf8(r.take(cfg_len)?.to_vec())
        .map_err(|e| RfError::Checkpoint(format!("{path}: non-UTF-8 config block: {e}")))?;
    Ok((entries, config_text))
}

fn apply_entries(entries: Vec<Entry>, config: TrainConfig, path: &str) -> Result<TrainState, RfError> {
    let mut state = TrainState::new(config);
    let mut map: std::collections::HashMap<String, Entry> =
        entries.into_iter().map(|e| (e.name.clone(), e)).collect();
    let mut take = |name: &str| {
        map.remove(name)
            .ok_or_else(|| RfError::Checkpoint(format!("{path}: missing entry '{name}'")))
    };

    for (name, p) in state.model.named_parameters() {
        let e = take(&name)?;
        if e.dims != p.shape() {
            return Err(RfError::Checkpoint(format!(
                "{path}: tensor '{name}' has shape {:?}, model expects {:?}",
                e.dims,
                p.shape()
            )));
        }
        p.set_data(e.values);
    }

    let n_bn = state.model.des.bn_snapshot().len();
    let mut bn_states = Vec::with_capacity(n_bn);
    for i in 0..n_bn {
        let mean = take(&format!("des.bn{i}.running_mean"))?;
        let var = take(&format!("des.bn{i}.running_var"))?;
        let seen = take(&format!("des.bn{i}.batches_seen"))?;
        bn_states.push(BatchNormState {
            running_mean: mean.values,
            running_var: var.values,
            batches_seen: seen.values[0] as u64,
        });
    }
    state.model.des.restore_bn(bn_states)?;

    for (group, params) in [
        ("det", state.model.det.named_parameters()),
        ("des", state.model.des.named_parameters()),
    ] {
        let t = take(&format!("opt.{group}.t"))?.values[0] as u64;
        let mut opt = AdamState::new(state.config.lr);
        opt.t = t;
        for (name, p) in params {
            let m = take(&format!("opt.{group}.m.{name}"))?;
            let v = take(&format!("opt.{group}.v.{name}"))?;
            if m.values.len() != p.numel() || v.values.len() != p.numel() {
                return Err(RfError::Checkpoint(format!(
                    "{path}: optimizer state for '{name}' does not match the parameter size"
                )));
            }
            opt.set_moment_arrays(&name, m.values, v.values);
        }
        match group {
            "det" => state.opt_det = opt,
            _ => state.opt_des = opt,
        }
    }

    state.iteration = take("meta.iteration")?.values[0] as u64;
    if let Some(name) = map.keys().next() {
        return Err(RfError::Checkpoint(format!(
            "{path}: unknown parameter name '{name}'"
        )));
    }
    Ok(state)
}

/// Load a checkpoint. The architecture is reconstructed from the embedded
/// config snapshot, then every tensor is restored by name.
pub fn load_checkpoint(path: &Path) -> Result<TrainState, RfError> {
    let p = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| RfError::io(&p, e))?;
    let (entries, config_text) = decode_checkpoint(&bytes, &p)?;
    let config = TrainConfig::from_kv(&config_text, &p)?;
    apply_entries(entries, config, &p)
}
