//! Evaluate a model over a synthetic dataset with all three matching
//! strategies and print the aggregated report.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rf_net::data::{synth_pair, textured_image, Sequence, SequenceTag, SynthParams};
use rf_net::eval::{evaluate, EvalConfig, Strategy};
use rf_net::geometry::Homography;
use rf_net::training::{RfNet, TrainConfig};

fn main() {
    let size = (64, 48);
    let params = SynthParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(23);

    // Build two in-memory sequences: reference + 5 warped targets each.
    let mut dataset = Vec::new();
    for i in 0..2u64 {
        let base = textured_image(size.0, size.1, i);
        let mut images = vec![base.clone()];
        let mut homographies: Vec<Homography> = Vec::new();
        for _ in 0..5 {
            let (_, warped, h) = synth_pair(&base, &params, &mut rng).expect("synth");
            images.push(warped);
            homographies.push(h);
        }
        dataset.push(Sequence {
            name: format!("v_demo_{i}"),
            images,
            homographies,
            tag: SequenceTag::Viewpoint,
        });
    }

    let mut cfg = TrainConfig::default();
    cfg.det_layers = 3;
    cfg.det_channels = 6;
    cfg.image_size = size;
    let model = RfNet::new(&cfg);

    let report = evaluate(&model, &dataset, &Strategy::ALL, &[64, 128], &EvalConfig::default());

    println!("mean match score per strategy@k:");
    for (key, score) in &report.mean_scores {
        println!("  {key:<10} {score:.3}");
    }
    println!("mean repeatability per k:");
    for (key, rep) in &report.mean_repeatability {
        println!("  {key:<10} {rep:.3}");
    }
    println!("failures: {}", report.failures.len());
    println!("\nflat CSV:\n{}", report.to_csv());
}
