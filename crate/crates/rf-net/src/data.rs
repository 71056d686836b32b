//! Dataset ingestion: PGM/PPM decoding, preprocessing (grayscale, resize,
//! standardize), sequence loading in the HPatches directory layout, the
//! synthetic homography-pair generator, and manifest-based splits.

use crate::error::RfError;
use crate::geometry::{warp_map, Homography};
use crate::tensor::Tensor;
use rand::Rng;
use std::fs;
use std::path::{Path, PathBuf};

/// Default working resolution (width, height).
pub const DEFAULT_SIZE: (usize, usize) = (320, 240);

const STD_FLOOR: f64 = 1e-6;

/// Decoded 8-bit image, 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Debug, Clone)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
    pub bit_depth: u8,
}

/// Grayscale 32-bit real image. Raw images decode into [0, 1] values;
/// [`preprocess`] leaves pixels standardized to zero mean, unit std.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), width * height, "pixel count mismatch");
        ImageBuffer { width, height, pixels }
    }

    /// `[1, 1, H, W]` tensor for the detector.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[1, 1, self.height, self.width],
            self.pixels.iter().map(|&v| v as f64).collect(),
        )
    }

    /// `[H, W]` tensor.
    pub fn to_map(&self) -> Tensor {
        Tensor::from_vec(
            &[self.height, self.width],
            self.pixels.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn from_map(t: &Tensor) -> Self {
        assert_eq!(t.shape().len(), 2, "from_map expects [H, W]");
        ImageBuffer {
            width: t.shape()[1],
            height: t.shape()[0],
            pixels: t.data().iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Decode a binary PGM (P5) or PPM (P6) file, 8-bit only.
pub fn decode_image(path: &Path) -> Result<RawImage, RfError> {
    let p = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| RfError::io(&p, e))?;
    decode_netpbm(&bytes, &p)
}

fn decode_netpbm(bytes: &[u8], path: &str) -> Result<RawImage, RfError> {
    if bytes.len() < 2 {
        return Err(RfError::parse(path, "file too short for a magic number"));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => {
            return Err(RfError::parse(
                path,
                format!("bad magic {:?}, expected P5 or P6", String::from_utf8_lossy(&bytes[..2])),
            ))
        }
    };
    // Header: three whitespace-separated integers (width, height, maxval)
    // with '#' comments, then a single whitespace byte before the payload.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(RfError::parse(path, "malformed header: expected an integer"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        *field = text
            .parse()
            .map_err(|e| RfError::parse(path, format!("bad header integer '{text}': {e}")))?;
    }
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if width == 0 || height == 0 {
        return Err(RfError::parse(path, format!("degenerate size {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(RfError::parse(
            path,
            format!("maxval {maxval} unsupported (8-bit only)"),
        ));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(RfError::parse(path, "missing whitespace before pixel payload"));
    }
    pos += 1;
    let expected = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(RfError::parse(
            path,
            format!("truncated payload: expected {expected} bytes, found {}", payload.len()),
        ));
    }
    let mut data = payload[..expected].to_vec();
    if maxval != 255 {
        for v in &mut data {
            *v = ((*v as usize * 255) / maxval).min(255) as u8;
        }
    }
    Ok(RawImage { width, height, channels, data, bit_depth: 8 })
}

/// Write an `ImageBuffer` holding [0, 1] values as a binary PGM.
pub fn write_pgm(path: &Path, img: &ImageBuffer) -> Result<(), RfError> {
    let p = path.display().to_string();
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(
        img.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(path, out).map_err(|e| RfError::io(&p, e))
}

/// Luminance conversion to [0, 1] grays.
pub fn to_gray(raw: &RawImage) -> ImageBuffer {
    let n = raw.width * raw.height;
    let mut pixels = Vec::with_capacity(n);
    match raw.channels {
        1 => pixels.extend(raw.data.iter().map(|&v| v as f32 / 255.0)),
        3 => {
            for i in 0..n {
                let (r, g, b) = (
                    raw.data[3 * i] as f32,
                    raw.data[3 * i + 1] as f32,
                    raw.data[3 * i + 2] as f32,
                );
                pixels.push((0.299 * r + 0.587 * g + 0.114 * b) / 255.0);
            }
        }
        c => unreachable!("decoder only produces 1 or 3 channels, got {c}"),
    }
    ImageBuffer::new(raw.width, raw.height, pixels)
}

/// Bilinear resize with the half-pixel center convention, clamped at edges.
pub fn resize_bilinear(img: &ImageBuffer, width: usize, height: usize) -> ImageBuffer {
    if width == img.width && height == img.height {
        return img.clone();
    }
    let sx = img.width as f32 / width as f32;
    let sy = img.height as f32 / height as f32;
    let mut pixels = Vec::with_capacity(width * height);
    for y in 0..height {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let wy = fy - y0 as f32;
        for x in 0..width {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let wx = fx - x0 as f32;
            let top = img.pixels[y0 * img.width + x0] * (1.0 - wx)
                + img.pixels[y0 * img.width + x1] * wx;
            let bot = img.pixels[y1 * img.width + x0] * (1.0 - wx)
                + img.pixels[y1 * img.width + x1] * wx;
            pixels.push(top * (1.0 - wy) + bot * wy);
        }
    }
    ImageBuffer::new(width, height, pixels)
}

/// Shift to zero mean and unit std, with the std clamped below at 1e-6 so
/// near-constant images map to (near) zeros instead of blowing up.
pub fn standardize(img: &mut ImageBuffer) {
    let n = img.pixels.len() as f64;
    let mean = img.pixels.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = img.pixels.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    for v in &mut img.pixels {
        *v = ((*v as f64 - mean) / std) as f32;
    }
}

/// Full preprocessing: grayscale, bilinear resize to `size` (width, height),
/// per-image standardization.
pub fn preprocess(raw: &RawImage, size: (usize, usize)) -> Result<ImageBuffer, RfError> {
    if raw.width == 0 || raw.height == 0 || size.0 == 0 || size.1 == 0 {
        return Err(RfError::Shape("preprocess: zero-pixel image".into()));
    }
    let mut img = resize_bilinear(&to_gray(raw), size.0, size.1);
    standardize(&mut img);
    Ok(img)
}

/// Illumination-change vs viewpoint-change sequence, per the dataset's
/// `i_*` / `v_*` naming.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceTag {
    Illumination,
    Viewpoint,
}

/// One dataset sequence: a reference image, five targets, and the
/// homographies mapping the reference into each target, all rescaled to the
/// working resolution.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub name: String,
    /// 6 preprocessed images; index 0 is the reference.
    pub images: Vec<ImageBuffer>,
    /// `homographies[k]` maps image 0 into image k+1.
    pub homographies: Vec<Homography>,
    pub tag: SequenceTag,
}

/// Deterministic textured image in `[0, 1]`: overlapping sinusoid products
/// whose frequencies and phases are keyed by `variant`. Produces distinct,
/// feature-rich patterns for synthetic corpora and self-contained demos.
pub fn textured_image(width: usize, height: usize, variant: u64) -> ImageBuffer {
    let p = variant as f32;
    let pixels: Vec<f32> = (0..width * height)
        .map(|i| {
            let (x, y) = ((i % width) as f32, (i / width) as f32);
            let v = 0.5
                + 0.2 * ((x * (0.11 + 0.013 * p)) + 0.7 * p).sin()
                + 0.15 * ((y * (0.17 + 0.009 * p)) + 1.3 * p).cos() * (x * 0.05 + p).sin()
                + 0.15 * ((x * 0.23 - y * (0.19 + 0.011 * p)) + 2.1 * p).sin();
            v.clamp(0.0, 1.0)
        })
        .collect();
    ImageBuffer::new(width, height, pixels)
}

fn find_image(dir: &Path, stem: &str) -> Result<PathBuf, RfError> {
    for ext in ["ppm", "pgm"] {
        let p = dir.join(format!("{stem}.{ext}"));
        if p.exists() {
            return Ok(p);
        }
    }
    Err(RfError::io(
        dir.join(format!("{stem}.ppm")).display().to_string(),
        std::io::Error::new(std::io::ErrorKind::NotFound, format!("no {stem}.ppm or {stem}.pgm")),
    ))
}

/// Load a sequence directory (`1..6` images plus `H_1_2..H_1_6`), resizing
/// images to `size` and conjugating the homographies into that frame.
pub fn load_sequence(dir: &Path, size: (usize, usize)) -> Result<Sequence, RfError> {
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tag = if name.starts_with("i_") {
        SequenceTag::Illumination
    } else {
        SequenceTag::Viewpoint
    };
    let mut images = Vec::with_capacity(6);
    let mut raw_sizes = Vec::with_capacity(6);
    for k in 1..=6 {
        let path = find_image(dir, &k.to_string())?;
        let raw = decode_image(&path)?;
        raw_sizes.push((raw.width, raw.height));
        images.push(preprocess(&raw, size)?);
    }
    let mut homographies = Vec::with_capacity(5);
    for k in 2..=6 {
        let hpath = dir.join(format!("H_1_{k}"));
        let hp = hpath.display().to_string();
        let text = fs::read_to_string(&hpath).map_err(|e| RfError::io(&hp, e))?;
        let h = Homography::parse(&text, &hp)?;
        // adapt the full-resolution homography to the working frame:
        // H' = S_target * H * S_ref^{-1} with S = diag(new / original)
        let (sw, sh) = raw_sizes[0];
        let (tw, th) = raw_sizes[k - 1];
        homographies.push(h.rescaled(
            (size.0 as f64 / sw as f64, size.1 as f64 / sh as f64),
            (size.0 as f64 / tw as f64, size.1 as f64 / th as f64),
        )?);
    }
    Ok(Sequence { name, images, homographies, tag })
}

/// Homography jitter bounds for [`synth_pair`]. All zero → identity.
#[derive(Debug, Clone, Copy)]
pub struct SynthParams {
    /// Max |rotation| in radians.
    pub max_rotation: f64,
    /// Max log-scale magnitude: scale drawn from `exp(U(-s, s))`.
    pub max_log_scale: f64,
    /// Max |translation| per axis, pixels.
    pub max_translation: f64,
    /// Max |perspective| coefficient.
    pub max_perspective: f64,
    /// Max photometric gain deviation from 1.
    pub max_gain: f64,
    /// Max photometric bias magnitude.
    pub max_bias: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            max_rotation: 0.15,
            max_log_scale: 0.15,
            max_translation: 8.0,
            max_perspective: 2e-4,
            max_gain: 0.1,
            max_bias: 0.05,
        }
    }
}

impl SynthParams {
    pub fn geometry_only(self) -> Self {
        SynthParams { max_gain: 0.0, max_bias: 0.0, ..self }
    }
}

/// Generate a synthetic training pair from a base gray image in [0, 1]:
/// `I_i` is the base, `I_j = warp(H, I_i)` with photometric gain/bias
/// jitter, and `H` is the exact homography relating them. The similarity
/// part of `H` is centered on the image so content stays in frame.
///
/// Homographies are resampled (up to 100 times) until `|det|` lies in
/// [0.25, 4].
pub fn synth_pair(
    base: &ImageBuffer,
    params: &SynthParams,
    rng: &mut impl Rng,
) -> Result<(ImageBuffer, ImageBuffer, Homography), RfError> {
    let (cx, cy) = ((base.width as f64 - 1.0) / 2.0, (base.height as f64 - 1.0) / 2.0);
    let sym = |r: &mut dyn FnMut() -> f64, m: f64| if m == 0.0 { 0.0 } else { r() * m };
    let mut h = None;
    for _ in 0..100 {
        let mut u = || rng.gen_range(-1.0..1.0);
        let angle = sym(&mut u, params.max_rotation);
        let s = sym(&mut u, params.max_log_scale).exp();
        let tx = sym(&mut u, params.max_translation);
        let ty = sym(&mut u, params.max_translation);
        let px = sym(&mut u, params.max_perspective);
        let py = sym(&mut u, params.max_perspective);
        let (c, sn) = (angle.cos() * s, angle.sin() * s);
        let core = Homography::new([c, -sn, tx, sn, c, ty, px, py, 1.0])
            .and_then(|m| {
                Homography::translation(cx, cy)
                    .compose(&m)?
                    .compose(&Homography::translation(-cx, -cy))
            });
        if let Ok(cand) = core {
            let det = cand.det().abs();
            if (0.25..=4.0).contains(&det) {
                h = Some(cand);
                break;
            }
        }
    }
    let h = h.ok_or_else(|| {
        RfError::DegeneratePair("synth_pair: no well-conditioned homography in 100 draws".into())
    })?;

    let warped = warp_map(&h, &base.to_map(), (base.height, base.width))?;
    let gain = 1.0 + sym(&mut || rng.gen_range(-1.0..1.0), params.max_gain);
    let bias = sym(&mut || rng.gen_range(-1.0..1.0), params.max_bias);
    let mut out = ImageBuffer::from_map(&warped);
    for v in &mut out.pixels {
        *v = ((*v as f64) * gain + bias).clamp(0.0, 1.0) as f32;
    }
    Ok((base.clone(), out, h))
}

/// Train/test membership of a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Deterministic train/test split: seeded shuffle of the names, first
/// `train_fraction` to train. The result doubles as the run manifest.
pub fn split_sequences(names: &[String], seed: u64, train_fraction: f64) -> Vec<(String, Split)> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut shuffled = names.to_vec();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let n_train = ((shuffled.len() as f64) * train_fraction).round() as usize;
    shuffled
        .into_iter()
        .enumerate()
        .map(|(i, name)| (name, if i < n_train { Split::Train } else { Split::Test }))
        .collect()
}

/// Render a manifest: one `name<TAB>train|test` line per sequence.
pub fn manifest_to_text(entries: &[(String, Split)]) -> String {
    let mut out = String::new();
    for (name, split) in entries {
        let tag = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        out.push_str(&format!("{name}\t{tag}\n"));
    }
    out
}

pub fn parse_manifest(text: &str, path: &str) -> Result<Vec<(String, Split)>, RfError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let name = parts.next().unwrap_or_default().to_string();
        let split = match parts.next() {
            Some("train") => Split::Train,
            Some("test") => Split::Test,
            other => {
                return Err(RfError::parse(
                    path,
                    format!("line {}: bad split tag {:?}", i + 1, other),
                ))
            }
        };
        out.push((name, split));
    }
    Ok(out)
}
