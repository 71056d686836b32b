//! Finite-difference verification of the differentiable building blocks.
//!
//! Runs central-difference gradient checks over the core tensor primitives,
//! printing the worst relative error for each.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rf_net::tensor::ops::{atan2, leaky_relu, matmul_nt, mul, sum_all};
use rf_net::tensor::{conv2d, grad_check, instance_norm, windowed_softmax, Tensor};

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::param(shape, data)
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let eps = 1e-5;
    let mut checks: Vec<(&str, f64)> = Vec::new();

    let x = randn(&[2, 3, 6, 6], &mut rng);
    let w = randn(&[4, 3, 3, 3], &mut rng);
    checks.push((
        "conv2d (input)",
        grad_check(|t| sum_all(&conv2d(t, &w.detach(), None, 1, 1).unwrap()), &x, eps),
    ));
    checks.push((
        "conv2d (weight)",
        grad_check(|t| sum_all(&conv2d(&x.detach(), t, None, 1, 1).unwrap()), &w, eps),
    ));

    // A plain sum (or sum of squares) of a normalized output is constant,
    // so project onto a fixed random direction to expose the Jacobian.
    let xin = randn(&[1, 2, 5, 5], &mut rng);
    let cin = randn(&[1, 2, 5, 5], &mut rng).detach();
    checks.push((
        "instance_norm",
        grad_check(
            |t| sum_all(&mul(&instance_norm(t, 1e-5).unwrap(), &cin)),
            &xin,
            eps,
        ),
    ));

    let xs = randn(&[2, 6, 6], &mut rng);
    checks.push((
        "windowed_softmax",
        grad_check(
            |t| {
                let s = windowed_softmax(t, 3).unwrap();
                sum_all(&mul(&s, &s))
            },
            &xs,
            eps,
        ),
    ));

    let xl = randn(&[3, 4], &mut rng);
    checks.push(("leaky_relu", grad_check(|t| sum_all(&leaky_relu(t, 0.1)), &xl, eps)));

    let ya = randn(&[2, 8], &mut rng);
    let yb = randn(&[2, 8], &mut rng).detach();
    checks.push(("atan2", grad_check(|t| sum_all(&atan2(t, &yb)), &ya, eps)));

    let ma = randn(&[3, 4], &mut rng);
    let mb = randn(&[5, 4], &mut rng).detach();
    checks.push(("matmul_nt", grad_check(|t| sum_all(&matmul_nt(t, &mb)), &ma, eps)));

    let mut worst: f64 = 0.0;
    for (name, err) in &checks {
        println!("{name:<20} max relative error {err:.3e}");
        worst = worst.max(*err);
    }
    println!("\nworst over all primitives: {worst:.3e} (threshold 1e-4)");
    assert!(worst < 1e-4, "gradient check failed");
    println!("all gradient checks passed");
}
