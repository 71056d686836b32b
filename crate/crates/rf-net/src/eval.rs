//! Matching strategies (NN / NN-threshold / NN-ratio), match scoring at a
//! reprojection threshold, repeatability, and the evaluation harness with
//! JSON/CSV report emission.

use crate::data::{ImageBuffer, Sequence};
use crate::descriptor::{describe, DESCRIPTOR_DIM, PATCH_SIZE};
use crate::detector::{detect, select_keypoints, Keypoint};
use crate::error::RfError;
use crate::geometry::{crop_patch, Homography, PatchSpec};
use crate::tensor::ops::stack0;
use crate::tensor::BnMode;
use crate::training::RfNet;
use serde::Serialize;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

/// One descriptor match from image a to image b.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub index_a: usize,
    pub index_b: usize,
    pub distance: f64,
    /// Set by [`score_matches`]; false until scored.
    pub correct: bool,
}

/// Matching strategy names, as exposed on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Nn,
    Nnt,
    Nnr,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Nn, Strategy::Nnt, Strategy::Nnr];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Nn => "nn",
            Strategy::Nnt => "nnt",
            Strategy::Nnr => "nnr",
        }
    }

    pub fn parse(s: &str) -> Result<Strategy, RfError> {
        match s {
            "nn" => Ok(Strategy::Nn),
            "nnt" => Ok(Strategy::Nnt),
            "nnr" => Ok(Strategy::Nnr),
            other => Err(RfError::Config(format!(
                "unknown matching strategy '{other}' (valid: nn, nnt, nnr)"
            ))),
        }
    }
}

fn pair_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (2.0 - 2.0 * dot).max(0.0).sqrt()
}

/// Two smallest distances from `row` to the rows of `db`, with the index of
/// the smallest (ties resolved to the lower index).
fn two_nearest(row: &[f64], db: &[Vec<f64>]) -> (usize, f64, f64) {
    let mut best = (0usize, f64::INFINITY);
    let mut second = f64::INFINITY;
    for (j, cand) in db.iter().enumerate() {
        let d = pair_distance(row, cand);
        if d < best.1 {
            second = best.1;
            best = (j, d);
        } else if d < second {
            second = d;
        }
    }
    (best.0, best.1, second)
}

/// Nearest-neighbor matching a→b: every descriptor in `da` matches its
/// closest row of `db` (ties → lower index).
pub fn match_nn(da: &[Vec<f64>], db: &[Vec<f64>]) -> Vec<Match> {
    if db.is_empty() {
        return Vec::new();
    }
    da.iter()
        .enumerate()
        .map(|(i, row)| {
            let (j, d, _) = two_nearest(row, db);
            Match { index_a: i, index_b: j, distance: d, correct: false }
        })
        .collect()
}

/// NN matching filtered to distance strictly below `t`.
pub fn match_nnt(da: &[Vec<f64>], db: &[Vec<f64>], t: f64) -> Vec<Match> {
    match_nn(da, db).into_iter().filter(|m| m.distance < t).collect()
}

/// NN matching filtered by the first/second nearest distance ratio being
/// strictly below `t`. A zero second distance implies a zero first distance
/// (ratio 0); otherwise a vanishing second distance is treated as ratio 1.
pub fn match_nnr(da: &[Vec<f64>], db: &[Vec<f64>], t: f64) -> Result<Vec<Match>, RfError> {
    if db.len() < 2 {
        return Err(RfError::Eval(format!(
            "ratio matching needs at least 2 candidate descriptors, got {}",
            db.len()
        )));
    }
    let mut out = Vec::new();
    for (i, row) in da.iter().enumerate() {
        let (j, first, second) = two_nearest(row, db);
        let ratio = if second == 0.0 {
            if first == 0.0 {
                0.0
            } else {
                1.0
            }
        } else {
            first / second
        };
        if ratio < t {
            out.push(Match { index_a: i, index_b: j, distance: first, correct: false });
        }
    }
    Ok(out)
}

/// Mark matches correct when the warped keypoint lands within `px_thresh`
/// of its matched keypoint, and return `(match_score, match_quantity)` with
/// `match_score = correct / min(|kps_a|, |kps_b|)`.
pub fn score_matches(
    matches: &mut [Match],
    kps_a: &[Keypoint],
    kps_b: &[Keypoint],
    h_ab: &Homography,
    px_thresh: f64,
) -> (f64, usize) {
    let mut n_correct = 0;
    for m in matches.iter_mut() {
        let a = &kps_a[m.index_a];
        let b = &kps_b[m.index_b];
        m.correct = match h_ab.apply(a.x, a.y) {
            Some((wx, wy)) => ((wx - b.x).powi(2) + (wy - b.y).powi(2)).sqrt() < px_thresh,
            None => false,
        };
        n_correct += m.correct as usize;
    }
    let denom = kps_a.len().min(kps_b.len());
    let score = if denom == 0 { 0.0 } else { n_correct as f64 / denom as f64 };
    (score, n_correct)
}

/// Repeatability: warp `kps_a` into image b (size `(width, height)`), drop
/// those leaving the frame, then greedily pair warped and b keypoints by
/// increasing distance; pairs closer than `px_thresh` count. Returns
/// `repeated / min(viewable_a, |kps_b|)`, or `None` when the denominator is
/// empty.
pub fn repeatability(
    kps_a: &[Keypoint],
    kps_b: &[Keypoint],
    h_ab: &Homography,
    size_b: (usize, usize),
    px_thresh: f64,
) -> Option<f64> {
    let (w, h) = (size_b.0 as f64, size_b.1 as f64);
    let warped: Vec<(f64, f64)> = kps_a
        .iter()
        .filter_map(|k| h_ab.apply(k.x, k.y))
        .filter(|&(x, y)| x >= 0.0 && y >= 0.0 && x <= w - 1.0 && y <= h - 1.0)
        .collect();
    let denom = warped.len().min(kps_b.len());
    if denom == 0 {
        return None;
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(warped.len() * kps_b.len());
    for (i, &(wx, wy)) in warped.iter().enumerate() {
        for (j, b) in kps_b.iter().enumerate() {
            let d = ((wx - b.x).powi(2) + (wy - b.y).powi(2)).sqrt();
            if d < px_thresh {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut used_a = vec![false; warped.len()];
    let mut used_b = vec![false; kps_b.len()];
    let mut repeated = 0;
    for (_, i, j) in pairs {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            repeated += 1;
        }
    }
    Some(repeated as f64 / denom as f64)
}

/// Inference settings for the harness.
#[derive(Debug, Clone, Copy)]
pub struct EvalConfig {
    pub px_thresh: f64,
    pub nnt_threshold: f64,
    pub nnr_threshold: f64,
    pub border: usize,
    pub nms_radius: usize,
    pub crop_factor: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            px_thresh: 5.0,
            nnt_threshold: 1.0,
            nnr_threshold: 0.7,
            border: 8,
            nms_radius: 0,
            crop_factor: 1.0,
        }
    }
}

/// Detect top-`k` keypoints and describe their patches. Uses running
/// batch-norm statistics when the checkpoint has them; otherwise falls back
/// to per-batch statistics so untrained models still evaluate.
pub fn detect_and_describe(
    model: &RfNet,
    img: &ImageBuffer,
    k: usize,
    cfg: &EvalConfig,
) -> Result<(Vec<Keypoint>, Vec<Vec<f64>>), RfError> {
    let t = img.to_tensor();
    let out = detect(&t, &model.det)?;
    let kps = select_keypoints(&out, k, cfg.nms_radius, cfg.border);
    if kps.is_empty() {
        return Err(RfError::Eval("no keypoints selected (image too small for the border?)".into()));
    }
    let image3 = crate::tensor::ops::reshape(&t, &[1, img.height, img.width]);
    let parts: Vec<_> = kps
        .iter()
        .map(|kp| {
            crop_patch(
                &image3,
                &PatchSpec {
                    center: (kp.x, kp.y),
                    orientation: kp.orientation,
                    scale: kp.scale,
                    patch_size: PATCH_SIZE,
                    crop_factor: cfg.crop_factor,
                },
            )
        })
        .collect();
    let mode = if model.des.bn_initialized() { BnMode::Eval } else { BnMode::Frozen };
    let d = describe(&stack0(&parts), &model.des, mode)?;
    let dd = d.data();
    let rows = kps
        .iter()
        .enumerate()
        .map(|(i, _)| dd[i * DESCRIPTOR_DIM..(i + 1) * DESCRIPTOR_DIM].to_vec())
        .collect();
    drop(dd);
    Ok((kps, rows))
}

/// One pair-protocol result row.
#[derive(Debug, Clone, Serialize)]
pub struct ProtocolRecord {
    pub strategy: String,
    pub k: usize,
    pub n_matches: usize,
    pub n_correct: usize,
    pub match_score: f64,
    pub match_quantity: usize,
    pub repeatability: Option<f64>,
}

/// Full evaluation output.
#[derive(Debug, Clone, Serialize)]
pub struct MatchReport {
    pub px_thresh: f64,
    /// Denominator convention for match_score.
    pub score_denominator: String,
    /// sequence → pair label → protocol records.
    pub sequences: BTreeMap<String, BTreeMap<String, Vec<ProtocolRecord>>>,
    /// Unweighted mean match score per "strategy@k".
    pub mean_scores: BTreeMap<String, f64>,
    /// Mean repeatability per k.
    pub mean_repeatability: BTreeMap<String, f64>,
    /// Pairs that failed, with reasons; failures never abort the run.
    pub failures: Vec<String>,
}

fn run_strategy(
    strategy: Strategy,
    da: &[Vec<f64>],
    db: &[Vec<f64>],
    cfg: &EvalConfig,
) -> Result<Vec<Match>, RfError> {
    match strategy {
        Strategy::Nn => Ok(match_nn(da, db)),
        Strategy::Nnt => Ok(match_nnt(da, db, cfg.nnt_threshold)),
        Strategy::Nnr => match_nnr(da, db, cfg.nnr_threshold),
    }
}

struct PairTask {
    sequence: String,
    pair_label: String,
    reference: ImageBuffer,
    target: ImageBuffer,
    h: Homography,
}

fn evaluate_pair(
    model: &RfNet,
    task: &PairTask,
    strategies: &[Strategy],
    k_list: &[usize],
    cfg: &EvalConfig,
) -> Result<Vec<ProtocolRecord>, RfError> {
    let mut records = Vec::new();
    for &k in k_list {
        let (kps_a, da) = detect_and_describe(model, &task.reference, k, cfg)?;
        let (kps_b, db) = detect_and_describe(model, &task.target, k, cfg)?;
        let rep = repeatability(
            &kps_a,
            &kps_b,
            &task.h,
            (task.target.width, task.target.height),
            cfg.px_thresh,
        );
        for &strategy in strategies {
            let mut matches = run_strategy(strategy, &da, &db, cfg)?;
            let (score, quantity) =
                score_matches(&mut matches, &kps_a, &kps_b, &task.h, cfg.px_thresh);
            records.push(ProtocolRecord {
                strategy: strategy.name().to_string(),
                k,
                n_matches: matches.len(),
                n_correct: quantity,
                match_score: score,
                match_quantity: quantity,
                repeatability: rep,
            });
        }
    }
    Ok(records)
}

fn match_threads() -> usize {
    std::env::var("RF_MATCH_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        })
}

/// Evaluate a model over every (reference, target) pair of every sequence,
/// for each strategy and keypoint budget. Per-pair failures are recorded in
/// the report and skipped. Pairs are processed in parallel, capped by the
/// RF_MATCH_THREADS environment variable.
pub fn evaluate(
    model: &RfNet,
    dataset: &[Sequence],
    strategies: &[Strategy],
    k_list: &[usize],
    cfg: &EvalConfig,
) -> MatchReport {
    let mut tasks = Vec::new();
    for seq in dataset {
        for (t, h) in seq.homographies.iter().enumerate() {
            tasks.push(PairTask {
                sequence: seq.name.clone(),
                pair_label: format!("1_{}", t + 2),
                reference: seq.images[0].clone(),
                target: seq.images[t + 1].clone(),
                h: *h,
            });
        }
    }

    let n_threads = match_threads().min(tasks.len().max(1));
    let results: Vec<(usize, Result<Vec<ProtocolRecord>, RfError>)> = if n_threads <= 1 {
        tasks
            .iter()
            .enumerate()
            .map(|(i, t)| (i, evaluate_pair(model, t, strategies, k_list, cfg)))
            .collect()
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let results = std::sync::Mutex::new(Vec::new());
        std::thread::scope(|scope| {
            for _ in 0..n_threads {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= tasks.len() {
                        break;
                    }
                    let r = evaluate_pair(model, &tasks[i], strategies, k_list, cfg);
                    results.lock().unwrap().push((i, r));
                });
            }
        });
        let mut results = results.into_inner().unwrap();
        results.sort_by_key(|(i, _)| *i);
        results
    };

    let mut report = MatchReport {
        px_thresh: cfg.px_thresh,
        score_denominator: "min(|kps_a|, |kps_b|)".into(),
        sequences: BTreeMap::new(),
        mean_scores: BTreeMap::new(),
        mean_repeatability: BTreeMap::new(),
        failures: Vec::new(),
    };
    let mut score_acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut rep_acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (i, result) in results {
        let task = &tasks[i];
        match result {
            Ok(records) => {
                for r in &records {
                    let key = format!("{}@{}", r.strategy, r.k);
                    let acc = score_acc.entry(key).or_insert((0.0, 0));
                    acc.0 += r.match_score;
                    acc.1 += 1;
                    if let Some(rep) = r.repeatability {
                        let acc = rep_acc.entry(r.k.to_string()).or_insert((0.0, 0));
                        acc.0 += rep;
                        acc.1 += 1;
                    }
                }
                report
                    .sequences
                    .entry(task.sequence.clone())
                    .or_default()
                    .insert(task.pair_label.clone(), records);
            }
            Err(e) => {
                let reason = format!("{}/{}: {e}", task.sequence, task.pair_label);
                log::warn!("evaluation pair skipped: {reason}");
                report.failures.push(reason);
            }
        }
    }
    report.mean_scores = score_acc
        .into_iter()
        .map(|(k, (sum, n))| (k, sum / n as f64))
        .collect();
    // each pair contributed its repeatability once per strategy; the mean is
    // unaffected by that replication
    report.mean_repeatability = rep_acc
        .into_iter()
        .map(|(k, (sum, n))| (k, sum / n as f64))
        .collect();
    report
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RfError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| RfError::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| RfError::io(path.display().to_string(), e))
}

impl MatchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    pub fn write_json(&self, path: &Path) -> Result<(), RfError> {
        write_atomic(path, self.to_json().as_bytes())
    }

    /// Flat CSV: one row per pair-protocol record.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("sequence,pair,strategy,k,matches,correct,match_score,match_quantity,repeatability\n");
        for (seq, pairs) in &self.sequences {
            for (pair, records) in pairs {
                for r in records {
                    let rep = r
                        .repeatability
                        .map(|v| format!("{v}"))
                        .unwrap_or_default();
                    out.push_str(&format!(
                        "{seq},{pair},{},{},{},{},{},{},{rep}\n",
                        r.strategy, r.k, r.n_matches, r.n_correct, r.match_score, r.match_quantity
                    ));
                }
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), RfError> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    /// Plot data: mean match score per strategy and K.
    pub fn to_plot_csv(&self) -> String {
        let mut out = String::from("strategy,k,mean_match_score\n");
        for (key, score) in &self.mean_scores {
            let (strategy, k) = key.split_once('@').unwrap_or((key.as_str(), "0"));
            out.push_str(&format!("{strategy},{k},{score}\n"));
        }
        out
    }

    pub fn write_plot_csv(&self, path: &Path) -> Result<(), RfError> {
        write_atomic(path, self.to_plot_csv().as_bytes())
    }
}
