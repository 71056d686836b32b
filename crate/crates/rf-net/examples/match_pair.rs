//! Detect, describe, and match two synthetically warped views of the same
//! scene, then score the matches against the known homography.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rf_net::data::{synth_pair, textured_image, SynthParams};
use rf_net::eval::{detect_and_describe, score_matches, EvalConfig, Strategy};
use rf_net::eval::{match_nn, match_nnr, match_nnt};
use rf_net::training::{RfNet, TrainConfig};

fn main() {
    // Generate a homography-related image pair.
    let base = textured_image(96, 72, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (img_a, img_b, h_ab) =
        synth_pair(&base, &SynthParams::default(), &mut rng).expect("synth pair");

    // An untrained model still produces usable geometry for a self-pair demo.
    let mut cfg = TrainConfig::default();
    cfg.det_layers = 4;
    cfg.det_channels = 8;
    cfg.image_size = (96, 72);
    let model = RfNet::new(&cfg);

    let ecfg = EvalConfig::default();
    let (kps_a, da) = detect_and_describe(&model, &img_a, 128, &ecfg).expect("detect a");
    let (kps_b, db) = detect_and_describe(&model, &img_b, 128, &ecfg).expect("detect b");
    println!("{} / {} keypoints detected", kps_a.len(), kps_b.len());

    for strategy in Strategy::ALL {
        let mut matches = match strategy {
            Strategy::Nn => match_nn(&da, &db),
            Strategy::Nnt => match_nnt(&da, &db, ecfg.nnt_threshold),
            Strategy::Nnr => match_nnr(&da, &db, ecfg.nnr_threshold).expect("nnr"),
        };
        let (score, correct) =
            score_matches(&mut matches, &kps_a, &kps_b, &h_ab, ecfg.px_thresh);
        println!(
            "{:<4} {:>4} matches, {:>4} correct at {} px, match score {:.3}",
            strategy.name(),
            matches.len(),
            correct,
            ecfg.px_thresh,
            score
        );
    }
}
