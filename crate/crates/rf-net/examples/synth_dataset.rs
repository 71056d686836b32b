//! Generate a small synthetic-homography dataset on disk, in the same layout
//! the evaluation harness and trainer read: one directory per sequence with
//! images `1.pgm`..`6.pgm` and homographies `H_1_2`..`H_1_6`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rf_net::data::{load_sequence, synth_pair, textured_image, write_pgm, SynthParams};
use std::fs;
use std::path::Path;

fn main() {
    let out = Path::new("target/synth_demo");
    let size = (96, 72);
    let params = SynthParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(42);

    for i in 0..3u64 {
        let base = textured_image(size.0, size.1, i);
        let dir = out.join(format!("v_synth_{i:03}"));
        fs::create_dir_all(&dir).expect("create sequence dir");
        write_pgm(&dir.join("1.pgm"), &base).expect("write reference");
        for t in 2..=6 {
            let (_, warped, h) = synth_pair(&base, &params, &mut rng).expect("synth");
            write_pgm(&dir.join(format!("{t}.pgm")), &warped).expect("write target");
            fs::write(dir.join(format!("H_1_{t}")), h.to_text()).expect("write homography");
        }
        println!("wrote {}", dir.display());
    }

    // Round-trip through the sequence loader to prove the layout is valid.
    let seq = load_sequence(&out.join("v_synth_000"), size).expect("reload");
    println!(
        "\nreloaded '{}': {} images, {} homographies, tag {:?}",
        seq.name,
        seq.images.len(),
        seq.homographies.len(),
        seq.tag
    );
}
