//! Short end-to-end training run on synthetic homography pairs.
//!
//! Builds a small detector + descriptor, trains for a handful of iterations
//! on warped views of textured images, prints the per-iteration losses, and
//! saves a resumable checkpoint.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rf_net::data::{synth_pair, textured_image, SynthParams};
use rf_net::training::{
    load_checkpoint, save_checkpoint, train_loop, TrainConfig, TrainPair, TrainState,
};
use std::path::Path;

fn main() {
    let mut cfg = TrainConfig::default();
    cfg.det_layers = 3;
    cfg.det_channels = 6;
    cfg.des_widths = [8, 8, 16, 16, 32, 32];
    cfg.image_size = (64, 48);
    cfg.loss.k = 16;
    cfg.lr = 0.01;
    cfg.iterations = 8;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = SynthParams::default();
    let pairs: Vec<TrainPair> = (0..4)
        .map(|i| {
            let base = textured_image(cfg.image_size.0, cfg.image_size.1, i);
            let (a, b, h_ab) = synth_pair(&base, &params, &mut rng).expect("synth");
            TrainPair { a, b, h_ab }
        })
        .collect();

    let mut state = TrainState::new(cfg);
    println!("iter  score      patch      description detector");
    train_loop(&mut state, &pairs, |iter, rec| {
        if let Some(r) = &rec.forward {
            println!(
                "{iter:>4}  {:<10.5} {:<10.5} {:<11.5} {:<10.5}",
                r.score, r.patch, r.description, r.detector
            );
        }
    })
    .expect("training failed");

    let path = Path::new("target/train_demo.ckpt");
    save_checkpoint(&state, path).expect("save");
    let restored = load_checkpoint(path).expect("load");
    println!(
        "\ncheckpoint saved to {} and restored at iteration {}",
        path.display(),
        restored.iteration
    );
}
