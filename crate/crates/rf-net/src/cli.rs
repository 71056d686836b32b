//! Command-line front end: train / detect / match / eval / synth.
//!
//! Exit codes are a stable contract: 0 success, 1 runtime failure,
//! 2 usage/configuration error.

use crate::data::{
    decode_image, load_sequence, preprocess, resize_bilinear, synth_pair, to_gray, write_pgm,
    ImageBuffer, SynthParams,
};
use crate::detector::{detect, select_keypoints};
use crate::error::RfError;
use crate::eval::{
    detect_and_describe, evaluate, match_nn, match_nnr, match_nnt, score_matches, EvalConfig,
    Match, Strategy,
};
use crate::geometry::Homography;
use crate::training::{
    load_checkpoint, save_checkpoint, train_loop, TrainConfig, TrainPair, TrainState,
};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser)]
#[command(name = "rfnet", about = "Local-feature pipeline: detector, descriptor, matcher")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Train on a directory of sequences, writing checkpoints and a loss log
    Train {
        /// key = value run configuration file
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint to resume from (its embedded config takes precedence)
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Dataset directory of sequence subdirectories
        #[arg(long)]
        data: PathBuf,
        /// Output directory (checkpoint + loss_log.csv)
        #[arg(long)]
        output: PathBuf,
        /// Override the iteration budget
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Detect keypoints in one image and write them as CSV
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 512)]
        k: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Match two images and write the correspondences as CSV
    Match {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image_a: PathBuf,
        #[arg(long)]
        image_b: PathBuf,
        /// nn, nnt, or nnr
        #[arg(long, default_value = "nnr")]
        strategy: String,
        #[arg(long, default_value_t = 1024)]
        k: usize,
        /// Threshold for nnt (distance) or nnr (ratio); strategy default if omitted
        #[arg(long)]
        threshold: Option<f64>,
        /// Homography text file; enables the correctness overlay output
        #[arg(long)]
        homography: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Evaluate a checkpoint over a dataset, writing JSON and CSV reports
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated keypoint budgets, e.g. 512,1024,2048
        #[arg(long, default_value = "512")]
        k: String,
        /// Comma-separated strategies out of nn,nnt,nnr
        #[arg(long, default_value = "nn,nnt,nnr")]
        strategies: String,
        #[arg(long)]
        output: PathBuf,
    },
    /// Generate synthetic homography sequences in the dataset layout
    Synth {
        /// Directory of base images (PGM/PPM)
        #[arg(long)]
        base: PathBuf,
        /// Number of sequences to generate
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 320)]
        width: usize,
        #[arg(long, default_value_t = 240)]
        height: usize,
        #[arg(long, default_value_t = 0.15)]
        max_rotation: f64,
        #[arg(long, default_value_t = 0.15)]
        max_log_scale: f64,
        #[arg(long, default_value_t = 8.0)]
        max_translation: f64,
        #[arg(long, default_value_t = 2e-4)]
        max_perspective: f64,
        #[arg(long)]
        output: PathBuf,
    },
}

/// Run a parsed command, translating errors into the exit-code contract.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Train { config, resume, data, output, iterations } => {
            cmd_train(config.as_deref(), resume.as_deref(), &data, &output, iterations)
        }
        Command::Detect { checkpoint, image, k, output } => {
            cmd_detect(&checkpoint, &image, k, &output)
        }
        Command::Match { checkpoint, image_a, image_b, strategy, k, threshold, homography, output } => {
            cmd_match(&checkpoint, &image_a, &image_b, &strategy, k, threshold, homography.as_deref(), &output)
        }
        Command::Eval { checkpoint, data, k, strategies, output } => {
            cmd_eval(&checkpoint, &data, &k, &strategies, &output)
        }
        Command::Synth {
            base,
            count,
            seed,
            width,
            height,
            max_rotation,
            max_log_scale,
            max_translation,
            max_perspective,
            output,
        } => {
            let params = SynthParams {
                max_rotation,
                max_log_scale,
                max_translation,
                max_perspective,
                ..SynthParams::default()
            };
            cmd_synth(&base, count, seed, (width, height), &params, &output)
        }
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                RfError::Config(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

fn ensure_dir(path: &Path) -> Result<(), RfError> {
    fs::create_dir_all(path).map_err(|e| RfError::io(path.display().to_string(), e))
}

fn require_dir(path: &Path, what: &str) -> Result<(), RfError> {
    if !path.is_dir() {
        return Err(RfError::Config(format!(
            "{what} directory {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

fn list_sequence_dirs(data: &Path) -> Result<Vec<PathBuf>, RfError> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(data)
        .map_err(|e| RfError::io(data.display().to_string(), e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn load_pairs(data: &Path, size: (usize, usize)) -> Result<Vec<TrainPair>, RfError> {
    let mut pairs = Vec::new();
    for dir in list_sequence_dirs(data)? {
        let seq = load_sequence(&dir, size)?;
        for (t, h) in seq.homographies.iter().enumerate() {
            pairs.push(TrainPair {
                a: seq.images[0].clone(),
                b: seq.images[t + 1].clone(),
                h_ab: *h,
            });
        }
    }
    Ok(pairs)
}

fn cmd_train(
    config: Option<&Path>,
    resume: Option<&Path>,
    data: &Path,
    output: &Path,
    iterations: Option<u64>,
) -> Result<(), RfError> {
    require_dir(data, "dataset")?;
    ensure_dir(output)?;
    let mut state = match resume {
        Some(ckpt) => {
            if config.is_some() {
                log::warn!("--config ignored: resuming uses the checkpoint's embedded config");
            }
            load_checkpoint(ckpt)?
        }
        None => {
            let cfg = match config {
                Some(path) => {
                    let p = path.display().to_string();
                    let text = fs::read_to_string(path).map_err(|e| RfError::io(&p, e))?;
                    TrainConfig::from_kv(&text, &p)?
                }
                None => TrainConfig::default(),
            };
            TrainState::new(cfg)
        }
    };
    if let Some(n) = iterations {
        state.config.iterations = n;
    }
    let ckpt_path = output.join("model.ckpt");
    state.config.checkpoint_path = Some(ckpt_path.clone());

    let pairs = load_pairs(data, state.config.image_size)?;
    if pairs.is_empty() {
        return Err(RfError::Config(format!(
            "dataset {} contains no sequences",
            data.display()
        )));
    }

    let mut log_lines = String::from("iteration,score,patch,description,detector\n");
    train_loop(&mut state, &pairs, |iter, record| {
        let recs: Vec<_> = [record.forward, record.backward].into_iter().flatten().collect();
        if !recs.is_empty() {
            let n = recs.len() as f64;
            let mean = |f: fn(&crate::training::LossRecord) -> f64| {
                recs.iter().map(f).sum::<f64>() / n
            };
            log_lines.push_str(&format!(
                "{iter},{},{},{},{}\n",
                mean(|r| r.score),
                mean(|r| r.patch),
                mean(|r| r.description),
                mean(|r| r.detector)
            ));
        }
    })?;

    save_checkpoint(&state, &ckpt_path)?;
    let log_path = output.join("loss_log.csv");
    fs::write(&log_path, log_lines).map_err(|e| RfError::io(log_path.display().to_string(), e))?;
    println!(
        "trained {} iterations; checkpoint at {}",
        state.iteration,
        ckpt_path.display()
    );
    Ok(())
}

fn load_image_for(state_size: (usize, usize), path: &Path) -> Result<ImageBuffer, RfError> {
    preprocess(&decode_image(path)?, state_size)
}

fn cmd_detect(checkpoint: &Path, image: &Path, k: usize, output: &Path) -> Result<(), RfError> {
    if k == 0 {
        return Err(RfError::Config("--k must be at least 1".into()));
    }
    let state = load_checkpoint(checkpoint)?;
    let img = load_image_for(state.config.image_size, image)?;
    let out = detect(&img.to_tensor(), &state.model.det)?;
    let kps = select_keypoints(&out, k, 0, EvalConfig::default().border);
    let mut csv = String::from("x,y,score,orientation,scale\n");
    for kp in &kps {
        csv.push_str(&format!("{},{},{},{},{}\n", kp.x, kp.y, kp.score, kp.orientation, kp.scale));
    }
    fs::write(output, csv).map_err(|e| RfError::io(output.display().to_string(), e))?;
    println!("{} keypoints -> {}", kps.len(), output.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_match(
    checkpoint: &Path,
    image_a: &Path,
    image_b: &Path,
    strategy: &str,
    k: usize,
    threshold: Option<f64>,
    homography: Option<&Path>,
    output: &Path,
) -> Result<(), RfError> {
    let strategy = Strategy::parse(strategy)?;
    let state = load_checkpoint(checkpoint)?;
    let cfg = EvalConfig::default();
    let a = load_image_for(state.config.image_size, image_a)?;
    let b = load_image_for(state.config.image_size, image_b)?;
    let (kps_a, da) = detect_and_describe(&state.model, &a, k, &cfg)?;
    let (kps_b, db) = detect_and_describe(&state.model, &b, k, &cfg)?;
    let mut matches: Vec<Match> = match strategy {
        Strategy::Nn => match_nn(&da, &db),
        Strategy::Nnt => match_nnt(&da, &db, threshold.unwrap_or(cfg.nnt_threshold)),
        Strategy::Nnr => match_nnr(&da, &db, threshold.unwrap_or(cfg.nnr_threshold))?,
    };

    let mut csv = String::from("xa,ya,xb,yb,distance\n");
    for m in &matches {
        let (pa, pb) = (&kps_a[m.index_a], &kps_b[m.index_b]);
        csv.push_str(&format!("{},{},{},{},{}\n", pa.x, pa.y, pb.x, pb.y, m.distance));
    }
    fs::write(output, csv).map_err(|e| RfError::io(output.display().to_string(), e))?;

    if let Some(hpath) = homography {
        let hp = hpath.display().to_string();
        let text = fs::read_to_string(hpath).map_err(|e| RfError::io(&hp, e))?;
        let h = Homography::parse(&text, &hp)?;
        score_matches(&mut matches, &kps_a, &kps_b, &h, cfg.px_thresh);
        let overlay = output.with_extension("overlay.csv");
        let mut ov = String::from("xa,ya,xb,yb,correct\n");
        for m in &matches {
            let (pa, pb) = (&kps_a[m.index_a], &kps_b[m.index_b]);
            ov.push_str(&format!("{},{},{},{},{}\n", pa.x, pa.y, pb.x, pb.y, m.correct as u8));
        }
        fs::write(&overlay, ov).map_err(|e| RfError::io(overlay.display().to_string(), e))?;
    }
    println!("{} matches -> {}", matches.len(), output.display());
    Ok(())
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, RfError>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|e| RfError::Config(format!("bad {what} entry '{}': {e}", p.trim())))
        })
        .collect()
}

fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    k: &str,
    strategies: &str,
    output: &Path,
) -> Result<(), RfError> {
    let k_list: Vec<usize> = parse_list(k, "k")?;
    let strat_list: Vec<Strategy> = strategies
        .split(',')
        .map(|s| Strategy::parse(s.trim()))
        .collect::<Result<_, _>>()?;
    require_dir(data, "dataset")?;
    let state = load_checkpoint(checkpoint)?;
    let mut dataset = Vec::new();
    for dir in list_sequence_dirs(data)? {
        dataset.push(load_sequence(&dir, state.config.image_size)?);
    }
    if dataset.is_empty() {
        return Err(RfError::Eval(format!(
            "dataset {} contains no sequence directories",
            data.display()
        )));
    }
    ensure_dir(output)?;
    let report = evaluate(&state.model, &dataset, &strat_list, &k_list, &EvalConfig::default());
    report.write_json(&output.join("report.json"))?;
    report.write_csv(&output.join("report.csv"))?;
    report.write_plot_csv(&output.join("plot.csv"))?;
    println!(
        "evaluated {} sequences ({} failures) -> {}",
        dataset.len(),
        report.failures.len(),
        output.display()
    );
    Ok(())
}

fn cmd_synth(
    base: &Path,
    count: usize,
    seed: u64,
    size: (usize, usize),
    params: &SynthParams,
    output: &Path,
) -> Result<(), RfError> {
    require_dir(base, "base image")?;
    let mut base_paths: Vec<PathBuf> = fs::read_dir(base)
        .map_err(|e| RfError::io(base.display().to_string(), e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("pgm") | Some("ppm")
            )
        })
        .collect();
    base_paths.sort();
    if base_paths.is_empty() {
        return Err(RfError::Config(format!(
            "no .pgm/.ppm base images in {}",
            base.display()
        )));
    }
    ensure_dir(output)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let src = &base_paths[i % base_paths.len()];
        let gray = resize_bilinear(&to_gray(&decode_image(src)?), size.0, size.1);
        let dir = output.join(format!("v_synth_{i:03}"));
        ensure_dir(&dir)?;
        write_pgm(&dir.join("1.pgm"), &gray)?;
        for t in 2..=6 {
            let (_, warped, h) = synth_pair(&gray, params, &mut rng)?;
            write_pgm(&dir.join(format!("{t}.pgm")), &warped)?;
            let hpath = dir.join(format!("H_1_{t}"));
            fs::write(&hpath, h.to_text())
                .map_err(|e| RfError::io(hpath.display().to_string(), e))?;
        }
    }
    println!("{count} synthetic sequences -> {}", output.display());
    Ok(())
}
