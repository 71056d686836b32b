//! Run the receptive-field detector on a synthetic textured image and print
//! the strongest keypoints with their predicted orientation and scale.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rf_net::data::textured_image;
use rf_net::detector::{detect, receptive_field, select_keypoints, RfDetParams};

fn main() {
    let img = textured_image(96, 72, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = RfDetParams::new(6, 8, &mut rng);
    println!(
        "detector: 6 cascade layers, receptive fields {} .. {} px",
        receptive_field(1),
        receptive_field(6)
    );

    let out = detect(&img.to_tensor(), &params).expect("detection failed");
    let score = out.score.data();
    let (min, max) = score
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    println!("score map range: [{min:.4}, {max:.4}]");
    drop(score);

    let kps = select_keypoints(&out, 10, 4, 8);
    println!("\ntop {} keypoints (non-maximum suppressed, 8 px border):", kps.len());
    println!("{:>7} {:>7} {:>9} {:>12} {:>7}", "x", "y", "score", "orientation", "scale");
    for kp in &kps {
        println!(
            "{:>7.1} {:>7.1} {:>9.5} {:>12.3} {:>7.2}",
            kp.x, kp.y, kp.score, kp.orientation, kp.scale
        );
    }
}
