//! Extract oriented patches around detected keypoints and run the
//! 128-dimensional descriptor, showing unit norms and the distance matrix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rf_net::data::textured_image;
use rf_net::descriptor::{describe, distance_matrix, RfDesParams, DESCRIPTOR_DIM, PATCH_SIZE};
use rf_net::detector::{detect, select_keypoints, RfDetParams};
use rf_net::geometry::{crop_patch, PatchSpec};
use rf_net::tensor::ops::{reshape, stack0};
use rf_net::tensor::BnMode;

fn main() {
    let img = textured_image(96, 72, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let det = RfDetParams::new(4, 8, &mut rng);
    let des = RfDesParams::with_widths([8, 8, 16, 16, 32, 32], &mut rng);

    let t = img.to_tensor();
    let out = detect(&t, &det).expect("detect");
    let kps = select_keypoints(&out, 6, 4, 8);
    println!("describing {} patches of {PATCH_SIZE}x{PATCH_SIZE} px", kps.len());

    let image3 = reshape(&t, &[1, img.height, img.width]);
    let patches: Vec<_> = kps
        .iter()
        .map(|kp| {
            crop_patch(
                &image3,
                &PatchSpec::new((kp.x, kp.y), kp.orientation, kp.scale),
            )
        })
        .collect();

    let d = describe(&stack0(&patches), &des, BnMode::Frozen).expect("describe");
    println!("descriptor tensor shape: {:?} (dim {DESCRIPTOR_DIM})", d.shape());

    let dd = d.data();
    let rows: Vec<Vec<f64>> = (0..kps.len())
        .map(|i| dd[i * DESCRIPTOR_DIM..(i + 1) * DESCRIPTOR_DIM].to_vec())
        .collect();
    drop(dd);
    for (i, row) in rows.iter().enumerate() {
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("descriptor {i}: ||d|| = {norm:.6}");
    }

    let dist = distance_matrix(&d, &d);
    let dv = dist.data();
    println!("\npairwise descriptor distances:");
    for i in 0..kps.len() {
        let row: Vec<String> =
            (0..kps.len()).map(|j| format!("{:.3}", dv[i * kps.len() + j])).collect();
        println!("  {}", row.join("  "));
    }
}
