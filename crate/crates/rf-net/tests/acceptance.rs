//! Acceptance suite: one test per release criterion, each printing a single
//! PASS/FAIL line. Heavy training work is shared between the smoke and
//! determinism criteria through a lazily-initialized run.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rf_net::data::{decode_image, synth_pair, textured_image, write_pgm, ImageBuffer, SynthParams};
use rf_net::descriptor::distance_matrix;
use rf_net::detector::{detect, receptive_field, RfDetParams};
use rf_net::eval::{
    detect_and_describe, match_nn, match_nnr, match_nnt, repeatability, score_matches, EvalConfig,
    Match,
};
use rf_net::geometry::{centroid_distance, Homography, PatchSpec};
use rf_net::losses::{description_loss, patch_loss, score_loss, CorrespondenceBatch};
use rf_net::tensor::ops::{
    atan2, gather2, l2_normalize, leaky_relu, matmul_nt, mul, relu, sum_all,
};
use rf_net::tensor::{
    batch_norm, bilinear_sample, conv2d, grad_check, grad_check_multi, instance_norm,
    windowed_softmax, BatchNormState, BnMode, Tensor,
};
use rf_net::training::{
    load_checkpoint, save_checkpoint, train_loop, RfNet, TrainConfig, TrainPair, TrainState,
};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err(format!($($arg)*));
        }
    };
}

fn finish(name: &str, result: Result<String, String>) {
    match result {
        Ok(detail) => println!("[PASS] {name}: {detail}"),
        Err(detail) => {
            println!("[FAIL] {name}: {detail}");
            panic!("{name}: {detail}");
        }
    }
}

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

fn random_unit_rows(k: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..k)
        .map(|_| {
            let r: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.into_iter().map(|v| v / n).collect()
        })
        .collect()
}

fn rows_tensor(rows: &[Vec<f64>]) -> Tensor {
    let (k, d) = (rows.len(), rows[0].len());
    Tensor::from_vec(&[k, d], rows.iter().flatten().copied().collect())
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// 1. Gradient suite
// ---------------------------------------------------------------------------

#[test]
fn a01_gradient_suite() {
    finish("gradient suite", (|| {
        let t0 = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eps = 1e-5;
        let mut worst_primitive: f64 = 0.0;
        let mut prim = |name: &str, err: f64| -> Result<(), String> {
            if err >= 1e-4 {
                return Err(format!("primitive {name} error {err:.3e} >= 1e-4"));
            }
            worst_primitive = worst_primitive.max(err);
            Ok(())
        };

        // conv2d with respect to input, weight, and bias together
        let x = rand_tensor(&[1, 2, 8, 8], -1.0, 1.0, &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let b = rand_tensor(&[3], -1.0, 1.0, &mut rng);
        prim(
            "conv2d",
            grad_check_multi(
                |t| sum_all(&mul(&conv2d(&t[0], &t[1], Some(&t[2]), 1, 1).unwrap(), &conv2d(&t[0], &t[1], Some(&t[2]), 1, 1).unwrap())),
                &[x, w, b],
                eps,
            ),
        )?;

        // normalizers: project onto a fixed random direction so the check is
        // not degenerate (plain sums of normalized outputs are constant)
        let xn = rand_tensor(&[1, 2, 5, 5], -1.0, 1.0, &mut rng);
        let c = rand_tensor(&[1, 2, 5, 5], -1.0, 1.0, &mut rng).detach();
        prim(
            "instance_norm",
            grad_check(|t| sum_all(&mul(&instance_norm(t, 1e-5).unwrap(), &c)), &xn, eps),
        )?;

        let xb = rand_tensor(&[2, 2, 4, 4], -1.0, 1.0, &mut rng);
        let gamma = rand_tensor(&[2], 0.5, 1.5, &mut rng);
        let beta = rand_tensor(&[2], -0.5, 0.5, &mut rng);
        let cb = rand_tensor(&[2, 2, 4, 4], -1.0, 1.0, &mut rng).detach();
        prim(
            "batch_norm",
            grad_check_multi(
                |t| {
                    let mut st = BatchNormState::new(2);
                    let y = batch_norm(&t[0], &t[1], &t[2], &mut st, BnMode::Train, 1e-5, 0.1)
                        .unwrap();
                    sum_all(&mul(&y, &cb))
                },
                &[xb, gamma, beta],
                eps,
            ),
        )?;

        let xs = rand_tensor(&[2, 6, 6], -1.0, 1.0, &mut rng);
        prim(
            "windowed_softmax",
            grad_check(
                |t| {
                    let s = windowed_softmax(t, 3).unwrap();
                    sum_all(&mul(&s, &s))
                },
                &xs,
                eps,
            ),
        )?;

        let xl = rand_tensor(&[3, 5], 0.05, 1.0, &mut rng);
        prim("leaky_relu", grad_check(|t| sum_all(&leaky_relu(t, 0.1)), &xl, eps))?;
        prim("relu", grad_check(|t| sum_all(&mul(&relu(t), &relu(t))), &xl, eps))?;

        let ay = rand_tensor(&[2, 6], -1.0, 1.0, &mut rng);
        let ax = rand_tensor(&[2, 6], -1.0, 1.0, &mut rng);
        prim("atan2", grad_check_multi(|t| sum_all(&atan2(&t[0], &t[1])), &[ay, ax], eps))?;

        let ma = rand_tensor(&[3, 4], -1.0, 1.0, &mut rng);
        let mb = rand_tensor(&[5, 4], -1.0, 1.0, &mut rng);
        prim(
            "matmul_nt",
            grad_check_multi(
                |t| {
                    let p = matmul_nt(&t[0], &t[1]);
                    sum_all(&mul(&p, &p))
                },
                &[ma, mb],
                eps,
            ),
        )?;

        let gx = rand_tensor(&[4, 4], -1.0, 1.0, &mut rng);
        prim(
            "gather2",
            grad_check(
                |t| {
                    let g = gather2(t, &[(0, 1), (2, 3), (3, 0)]);
                    sum_all(&mul(&g, &g))
                },
                &gx,
                eps,
            ),
        )?;

        let lx = rand_tensor(&[3, 6], -1.0, 1.0, &mut rng);
        let lc = rand_tensor(&[3, 6], -1.0, 1.0, &mut rng).detach();
        prim(
            "l2_normalize",
            grad_check(|t| sum_all(&mul(&l2_normalize(t, 1e-8), &lc)), &lx, eps),
        )?;

        // bilinear sampling at interior, non-lattice points (map and grid)
        let map = rand_tensor(&[1, 6, 6], -1.0, 1.0, &mut rng);
        let grid = Tensor::param(&[3, 2], vec![1.3, 2.7, 3.6, 1.2, 2.5, 3.4]);
        prim(
            "bilinear_sample",
            grad_check_multi(|t| sum_all(&bilinear_sample(&t[0], &t[1])), &[map, grid], eps),
        )?;

        // composed losses, K <= 4, maps <= 24x24, threshold 1e-3
        let mut worst_loss: f64 = 0.0;
        let mut comp = |name: &str, err: f64| -> Result<(), String> {
            if err >= 1e-3 {
                return Err(format!("loss {name} error {err:.3e} >= 1e-3"));
            }
            worst_loss = worst_loss.max(err);
            Ok(())
        };

        let g = rand_tensor(&[12, 12], 0.0, 1.0, &mut rng).detach();
        let s = rand_tensor(&[12, 12], 0.0, 1.0, &mut rng);
        comp("score_loss", grad_check(|t| score_loss(t, &g).unwrap(), &s, eps))?;

        let di = rows_tensor(&random_unit_rows(4, 8, &mut rng));
        let dj = rows_tensor(&random_unit_rows(4, 8, &mut rng));
        let dip = Tensor::param(&[4, 8], di.to_vec());
        let djp = Tensor::param(&[4, 8], dj.to_vec());
        comp(
            "patch_loss",
            grad_check_multi(|t| patch_loss(&t[0], &t[1]).unwrap(), &[dip, djp], eps),
        )?;

        // description loss with an active neighbor mask: counterparts 0 and 1
        // sit within the 5 px radius
        let batch = fake_batch(
            &[(0.0, 0.0), (40.0, 0.0), (0.0, 40.0), (40.0, 40.0)],
            &[(0.0, 0.0), (3.0, 0.0), (0.0, 40.0), (40.0, 40.0)],
        );
        let ei = Tensor::param(&[4, 8], rows_tensor(&random_unit_rows(4, 8, &mut rng)).to_vec());
        let ej = Tensor::param(&[4, 8], rows_tensor(&random_unit_rows(4, 8, &mut rng)).to_vec());
        comp(
            "description_loss",
            grad_check_multi(
                |t| description_loss(&t[0], &t[1], &batch, 5.0, 1.0).unwrap().0,
                &[ei, ej],
                eps,
            ),
        )?;

        let elapsed = t0.elapsed();
        ensure!(elapsed < Duration::from_secs(120), "suite took {elapsed:?} (budget 2 min)");
        Ok(format!(
            "worst primitive {worst_primitive:.2e} (< 1e-4), worst loss {worst_loss:.2e} (< 1e-3), {elapsed:.1?}"
        ))
    })());
}

fn fake_batch(anchors: &[(f64, f64)], counterparts: &[(f64, f64)]) -> CorrespondenceBatch {
    CorrespondenceBatch {
        anchors: anchors.iter().map(|&c| PatchSpec::new(c, 0.0, 8.0)).collect(),
        counterparts: counterparts.iter().map(|&c| PatchSpec::new(c, 0.0, 8.0)).collect(),
        anchor_pixels: anchors.iter().map(|&(x, y)| (x as usize, y as usize)).collect(),
        counterpart_pixels: counterparts
            .iter()
            .map(|&(x, y)| (x as usize, y as usize))
            .collect(),
        h_ij: Homography::identity(),
    }
}

// ---------------------------------------------------------------------------
// 2. Fusion invariants
// ---------------------------------------------------------------------------

#[test]
fn a02_fusion_invariants() {
    finish("fusion invariants", (|| {
        let n_layers = 10;
        let (h, w) = (32, 32);
        let hw = h * w;
        let mut violations = 0usize;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = RfDetParams::new(n_layers, 4, &mut rng);
            let img = Tensor::from_vec(
                &[1, 1, h, w],
                (0..hw).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            );
            let out = detect(&img, &params).map_err(|e| e.to_string())?;
            let pr = out.pr.to_vec();
            let rs = out.responses_sharp.to_vec();
            let score = out.score.to_vec();
            let sbar = out.scale.to_vec();
            for i in 0..hw {
                let mut sum = 0.0;
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for n in 0..n_layers {
                    sum += pr[n * hw + i];
                    lo = lo.min(rs[n * hw + i]);
                    hi = hi.max(rs[n * hw + i]);
                }
                if (sum - 1.0).abs() > 1e-6 {
                    violations += 1;
                }
                if score[i] < lo - 1e-9 || score[i] > hi + 1e-9 {
                    violations += 1;
                }
                if sbar[i] < 3.0 - 1e-9 || sbar[i] > 21.0 + 1e-9 {
                    violations += 1;
                }
            }
        }
        ensure!(violations == 0, "{violations} per-pixel violations over 100 forwards");
        Ok("100 random forwards (32x32, N=10): sum Pr = 1, S in [min h, max h], scale in [3,21], zero violations".into())
    })());
}

// ---------------------------------------------------------------------------
// 3. Receptive-field oracle
// ---------------------------------------------------------------------------

#[test]
fn a03_receptive_field_oracle() {
    finish("receptive-field oracle", (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = RfDetParams::new(3, 4, &mut rng);
        let side = 33usize;
        let impulse = |cx: usize, cy: usize| {
            let mut d = vec![0.0; side * side];
            d[cy * side + cx] = 1.0;
            Tensor::from_vec(&[1, 1, side, side], d)
        };
        // Two unit impulses far enough apart that their footprints are
        // disjoint; translation equivariance keeps the per-map normalization
        // statistics identical, so the response difference is confined to
        // exactly the two footprints.
        let (c1, c2) = ((8usize, 8usize), (24usize, 8usize));
        let r1 = detect(&impulse(c1.0, c1.1), &params).map_err(|e| e.to_string())?;
        let r2 = detect(&impulse(c2.0, c2.1), &params).map_err(|e| e.to_string())?;
        let a = r1.responses.to_vec();
        let b = r2.responses.to_vec();
        let hw = side * side;
        for n in 1..=3usize {
            let rf = receptive_field(n);
            ensure!(rf == 2 * n + 1, "receptive_field({n}) = {rf}, want {}", 2 * n + 1);
            let rad = n as isize;
            let in_fp = |y: usize, x: usize, c: (usize, usize)| {
                (y as isize - c.1 as isize).abs() <= rad && (x as isize - c.0 as isize).abs() <= rad
            };
            let mut changed = 0usize;
            for y in 0..side {
                for x in 0..side {
                    let i = (n - 1) * hw + y * side + x;
                    let diff = (a[i] - b[i]).abs() > 1e-9;
                    let expected = in_fp(y, x, c1) || in_fp(y, x, c2);
                    ensure!(
                        diff == expected,
                        "layer {n}: pixel ({x},{y}) changed={diff}, expected={expected}"
                    );
                    if diff && in_fp(y, x, c1) {
                        changed += 1;
                    }
                }
            }
            ensure!(
                changed == rf * rf,
                "layer {n}: footprint has {changed} pixels, want {}",
                rf * rf
            );
        }
        Ok("impulse footprints are exactly (2n+1)^2 pixels for n in {1,2,3}".into())
    })());
}

// ---------------------------------------------------------------------------
// 4. Oracle equivalence over >= 200 seeds
// ---------------------------------------------------------------------------

/// Independent naive windowed softmax: direct exponential sums, no
/// log-stabilization.
fn windowed_softmax_oracle(x: &[f64], n: usize, h: usize, w: usize, window: usize) -> Vec<f64> {
    let r = (window / 2) as isize;
    let hw = h * w;
    let mut out = vec![0.0; x.len()];
    for u in 0..h as isize {
        for v in 0..w as isize {
            let mut denom = 0.0;
            for y in (u - r).max(0)..(u + r + 1).min(h as isize) {
                for xx in (v - r).max(0)..(v + r + 1).min(w as isize) {
                    for layer in 0..n {
                        denom += x[layer * hw + y as usize * w + xx as usize].exp();
                    }
                }
            }
            for layer in 0..n {
                let i = layer * hw + u as usize * w + v as usize;
                out[i] = x[i].exp() / denom;
            }
        }
    }
    out
}

fn nn_oracle(da: &[Vec<f64>], db: &[Vec<f64>]) -> Vec<(usize, usize, f64)> {
    da.iter()
        .enumerate()
        .map(|(i, a)| {
            let mut bj = 0;
            let mut bd = f64::INFINITY;
            for (j, b) in db.iter().enumerate() {
                let d = euclid(a, b);
                if d < bd {
                    bd = d;
                    bj = j;
                }
            }
            (i, bj, bd)
        })
        .collect()
}

fn nnr_oracle(da: &[Vec<f64>], db: &[Vec<f64>], t: f64) -> Vec<(usize, usize, f64)> {
    da.iter()
        .enumerate()
        .filter_map(|(i, a)| {
            let mut ds: Vec<(f64, usize)> =
                db.iter().enumerate().map(|(j, b)| (euclid(a, b), j)).collect();
            ds.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
            let (first, j) = ds[0];
            let second = ds[1].0;
            let ratio = if second == 0.0 {
                if first == 0.0 {
                    0.0
                } else {
                    1.0
                }
            } else {
                first / second
            };
            (ratio < t).then_some((i, j, first))
        })
        .collect()
}

fn description_loss_oracle(
    d_i: &[Vec<f64>],
    d_j: &[Vec<f64>],
    batch: &CorrespondenceBatch,
    c: f64,
    margin: f64,
) -> f64 {
    let k = d_i.len();
    let mut total = 0.0;
    for a in 0..k {
        let d_pos = euclid(&d_i[a], &d_j[a]);
        let mut d_ng = f64::INFINITY;
        for n in 0..k {
            if n != a && centroid_distance(&batch.counterparts[a], &batch.counterparts[n]) > c {
                d_ng = d_ng.min(euclid(&d_i[a], &d_j[n]));
            }
        }
        for m in 0..k {
            if m != a && centroid_distance(&batch.anchors[m], &batch.anchors[a]) > c {
                d_ng = d_ng.min(euclid(&d_i[m], &d_j[a]));
            }
        }
        if d_ng.is_finite() {
            total += (margin + d_pos - d_ng).max(0.0);
        }
    }
    total / k as f64
}

fn matches_agree(got: &[Match], want: &[(usize, usize, f64)]) -> Result<(), String> {
    ensure!(got.len() == want.len(), "{} matches, oracle has {}", got.len(), want.len());
    for (m, w) in got.iter().zip(want) {
        ensure!(
            m.index_a == w.0 && m.index_b == w.1 && (m.distance - w.2).abs() <= 1e-6,
            "match ({}, {}, {:.6}) vs oracle ({}, {}, {:.6})",
            m.index_a, m.index_b, m.distance, w.0, w.1, w.2
        );
    }
    Ok(())
}

#[test]
fn a04_oracle_equivalence() {
    finish("oracle equivalence", (|| {
        for seed in 0..200u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);

            // windowed softmax vs naive loop
            let (n, h, w) = (rng.gen_range(1..=3), rng.gen_range(3..=10), rng.gen_range(3..=10));
            let window = if rng.gen_bool(0.5) { 3 } else { 5 };
            let data: Vec<f64> = (0..n * h * w).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let got = windowed_softmax(&Tensor::from_vec(&[n, h, w], data.clone()), window)
                .map_err(|e| e.to_string())?
                .to_vec();
            let want = windowed_softmax_oracle(&data, n, h, w, window);
            for i in 0..got.len() {
                ensure!(
                    (got[i] - want[i]).abs() <= 1e-6,
                    "seed {seed}: windowed_softmax[{i}] {} vs {}",
                    got[i], want[i]
                );
            }

            // distance matrix vs pairwise loop
            let ka = rng.gen_range(1..=16);
            let kb = rng.gen_range(2..=16);
            let da = random_unit_rows(ka, 8, &mut rng);
            let db = random_unit_rows(kb, 8, &mut rng);
            let m = distance_matrix(&rows_tensor(&da), &rows_tensor(&db)).to_vec();
            for i in 0..ka {
                for j in 0..kb {
                    let want = euclid(&da[i], &db[j]);
                    ensure!(
                        (m[i * kb + j] - want).abs() <= 1e-6,
                        "seed {seed}: distance[{i},{j}] {} vs {}",
                        m[i * kb + j], want
                    );
                }
            }

            // matchers vs loop oracles
            matches_agree(&match_nn(&da, &db), &nn_oracle(&da, &db))
                .map_err(|e| format!("seed {seed} nn: {e}"))?;
            let t = rng.gen_range(0.5..1.5);
            let nn = nn_oracle(&da, &db);
            let nnt_want: Vec<_> = nn.into_iter().filter(|m| m.2 < t).collect();
            matches_agree(&match_nnt(&da, &db, t), &nnt_want)
                .map_err(|e| format!("seed {seed} nnt: {e}"))?;
            let rt = rng.gen_range(0.5..0.95);
            matches_agree(
                &match_nnr(&da, &db, rt).map_err(|e| e.to_string())?,
                &nnr_oracle(&da, &db, rt),
            )
            .map_err(|e| format!("seed {seed} nnr: {e}"))?;

            // description loss with and without the neighbor mask
            let k = rng.gen_range(2..=8);
            let centers = |rng: &mut ChaCha8Rng| -> Vec<(f64, f64)> {
                (0..k).map(|_| (rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0))).collect()
            };
            let batch = fake_batch(&centers(&mut rng), &centers(&mut rng));
            let di = random_unit_rows(k, 8, &mut rng);
            let dj = random_unit_rows(k, 8, &mut rng);
            for radius in [5.0, 0.0] {
                let (loss, _) = description_loss(
                    &rows_tensor(&di),
                    &rows_tensor(&dj),
                    &batch,
                    radius,
                    1.0,
                )
                .map_err(|e| e.to_string())?;
                let want = description_loss_oracle(&di, &dj, &batch, radius, 1.0);
                ensure!(
                    (loss.item() - want).abs() <= 1e-6,
                    "seed {seed}: description_loss(radius {radius}) {} vs oracle {}",
                    loss.item(), want
                );
            }
        }
        Ok("windowed_softmax, distance_matrix, nn/nnt/nnr, description_loss +/- mask equal loop oracles over 200 seeds (K <= 16, 1e-6)".into())
    })());
}

// ---------------------------------------------------------------------------
// 5. Metric identities and matcher containment
// ---------------------------------------------------------------------------

#[test]
fn a05_metric_identities() {
    finish("metric identities", (|| {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
            let da = random_unit_rows(rng.gen_range(1..=12), 16, &mut rng);
            let db = random_unit_rows(rng.gen_range(2..=12), 16, &mut rng);
            let m = distance_matrix(&rows_tensor(&da), &rows_tensor(&db)).to_vec();
            for (i, a) in da.iter().enumerate() {
                for (j, b) in db.iter().enumerate() {
                    let d = m[i * db.len() + j];
                    ensure!(
                        (d - euclid(a, b)).abs() <= 1e-6,
                        "seed {seed}: d != ||x - y|| ({d} vs {})",
                        euclid(a, b)
                    );
                    ensure!((-1e-9..=2.0 + 1e-9).contains(&d), "seed {seed}: d = {d} outside [0,2]");
                }
            }
            let keys = |ms: &[Match]| -> Vec<(usize, usize)> {
                ms.iter().map(|m| (m.index_a, m.index_b)).collect()
            };
            // Ratio < 0.7 with distances capped at 2 bounds the first
            // distance by 1.4, so nnr(0.7) ⊆ nnt(1.4) ⊆ nn must hold even on
            // unstructured descriptors.
            let nn = keys(&match_nn(&da, &db));
            let nnt = keys(&match_nnt(&da, &db, 1.4));
            let nnr = keys(&match_nnr(&da, &db, 0.7).map_err(|e| e.to_string())?);
            for k in &nnt {
                ensure!(nn.contains(k), "seed {seed}: nnt match {k:?} not in nn");
            }
            for k in &nnr {
                ensure!(nnt.contains(k), "seed {seed}: nnr match {k:?} not in nnt");
            }

            // Matching-like trials: queries are noisy copies of candidates,
            // as produced by corresponding patches. Containment must hold at
            // the operating thresholds nnr(0.7) ⊆ nnt(1.0) ⊆ nn.
            let qa: Vec<Vec<f64>> = db
                .iter()
                .map(|row| {
                    let noisy: Vec<f64> =
                        row.iter().map(|v| v + rng.gen_range(-0.05..0.05)).collect();
                    let n: f64 = noisy.iter().map(|v| v * v).sum::<f64>().sqrt();
                    noisy.into_iter().map(|v| v / n).collect()
                })
                .collect();
            let nn2 = keys(&match_nn(&qa, &db));
            let nnt2 = keys(&match_nnt(&qa, &db, 1.0));
            let nnr2 = keys(&match_nnr(&qa, &db, 0.7).map_err(|e| e.to_string())?);
            for k in &nnt2 {
                ensure!(nn2.contains(k), "seed {seed}: noisy nnt match {k:?} not in nn");
            }
            for k in &nnr2 {
                ensure!(nnt2.contains(k), "seed {seed}: noisy nnr match {k:?} not in nnt");
            }
        }
        Ok("d(x,y) = ||x-y|| on unit vectors, range [0,2], nnr <= nnt <= nn over 100 trials".into())
    })());
}

// ---------------------------------------------------------------------------
// 6. Neighbor-mask behavioral check
// ---------------------------------------------------------------------------

#[test]
fn a06_neighbor_mask_behavior() {
    finish("neighbor-mask behavior", (|| {
        // Anchors are well separated; counterpart 1 sits 3 px from
        // counterpart 0, inside the C = 5 radius. Descriptors are arranged so
        // the hardest negative for anchor 0 is exactly that in-radius
        // counterpart.
        let batch = fake_batch(
            &[(0.0, 0.0), (50.0, 0.0), (0.0, 50.0)],
            &[(10.0, 10.0), (13.0, 10.0), (10.0, 50.0)],
        );
        let e = |i: usize| -> Vec<f64> {
            let mut v = vec![0.0; 8];
            v[i] = 1.0;
            v
        };
        let mix = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> {
            let r: Vec<f64> = a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y).collect();
            let n: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.into_iter().map(|v| v / n).collect()
        };
        let di = vec![e(0), e(2), e(4)];
        // counterpart 1's descriptor is very close to anchor 0's, making it
        // the hardest (in-row) negative for pair 0
        let dj = vec![e(0), mix(&e(0), &e(1), 0.05), e(4)];

        let ti = rows_tensor(&di);
        let tj = rows_tensor(&dj);
        let (masked, n_masked) =
            description_loss(&ti, &tj, &batch, 5.0, 1.0).map_err(|e| e.to_string())?;
        let (unmasked, _) =
            description_loss(&ti, &tj, &batch, 0.0, 1.0).map_err(|e| e.to_string())?;
        let want_masked = description_loss_oracle(&di, &dj, &batch, 5.0, 1.0);
        let want_unmasked = description_loss_oracle(&di, &dj, &batch, 0.0, 1.0);

        ensure!(n_masked == 0, "no pair should be fully masked, got {n_masked}");
        ensure!(
            (masked.item() - want_masked).abs() <= 1e-6,
            "masked loss {} vs oracle {}",
            masked.item(), want_masked
        );
        ensure!(
            (unmasked.item() - want_unmasked).abs() <= 1e-6,
            "unmasked loss {} vs oracle {}",
            unmasked.item(), want_unmasked
        );
        ensure!(
            (masked.item() - unmasked.item()).abs() > 1e-3,
            "mask had no effect ({} vs {})",
            masked.item(), unmasked.item()
        );
        ensure!(
            ((masked.item() - unmasked.item()) - (want_masked - want_unmasked)).abs() <= 1e-6,
            "mask effect {} differs from oracle prediction {}",
            masked.item() - unmasked.item(),
            want_masked - want_unmasked
        );
        Ok(format!(
            "in-radius hardest negative excluded exactly as the oracle predicts (masked {:.4} vs unmasked {:.4})",
            masked.item(), unmasked.item()
        ))
    })());
}

// ---------------------------------------------------------------------------
// 7. Identity-pair sanity
// ---------------------------------------------------------------------------

#[test]
fn a07_identity_pair_sanity() {
    finish("identity-pair sanity", (|| {
        let mut cfg = TrainConfig::default();
        cfg.det_layers = 3;
        cfg.det_channels = 6;
        cfg.des_widths = [8, 8, 16, 16, 32, 32];
        cfg.image_size = (48, 36);
        cfg.seed = 9;
        let model = RfNet::new(&cfg);
        let img = textured_image(48, 36, 2);
        let ecfg = EvalConfig::default();
        let (kps, d) = detect_and_describe(&model, &img, 40, &ecfg).map_err(|e| e.to_string())?;
        let h = Homography::identity();
        let mut matches = match_nn(&d, &d);
        let (score, _) = score_matches(&mut matches, &kps, &kps, &h, 5.0);
        ensure!(score == 1.0, "NN match score {score} != 1.0");
        let rep = repeatability(&kps, &kps, &h, (48, 36), 5.0)
            .ok_or("repeatability denominator empty")?;
        ensure!(rep == 1.0, "repeatability {rep} != 1.0");
        Ok(format!("identical pair: NN match score 1.0 and repeatability 1.0 over {} keypoints", kps.len()))
    })());
}

// ---------------------------------------------------------------------------
// 8 + 9. Smoke training (shared between the loss/eval and determinism tests)
// ---------------------------------------------------------------------------

fn smoke_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.det_layers = 3;
    cfg.det_channels = 6;
    cfg.des_widths = [8, 8, 16, 16, 32, 32];
    cfg.image_size = (40, 30);
    cfg.loss.k = 12;
    cfg.lr = 1e-3;
    cfg.iterations = 500;
    cfg.seed = 1234;
    cfg
}

/// 10 synthetic sequences drawn from 3 textured base images, 5 pairs each.
fn smoke_pairs() -> Vec<TrainPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let params = SynthParams::default();
    let mut pairs = Vec::new();
    for s in 0..10u64 {
        let base = textured_image(40, 30, s % 3);
        for _ in 0..5 {
            let (a, b, h_ab) = synth_pair(&base, &params, &mut rng).expect("synth pair");
            pairs.push(TrainPair { a, b, h_ab });
        }
    }
    pairs
}

fn held_out_pairs() -> Vec<(ImageBuffer, ImageBuffer, Homography)> {
    let mut rng = ChaCha8Rng::seed_from_u64(777);
    let params = SynthParams::default();
    (0..5u64)
        .map(|i| {
            let base = textured_image(40, 30, 10 + i);
            let (a, b, h) = synth_pair(&base, &params, &mut rng).expect("synth pair");
            (a, b, h)
        })
        .collect()
}

fn mean_nnr_score(model: &RfNet, held: &[(ImageBuffer, ImageBuffer, Homography)]) -> f64 {
    let cfg = EvalConfig::default();
    let mut total = 0.0;
    for (a, b, h) in held {
        let (ka, da) = detect_and_describe(model, a, 128, &cfg).expect("detect a");
        let (kb, db) = detect_and_describe(model, b, 128, &cfg).expect("detect b");
        let mut m = match_nnr(&da, &db, 0.7).expect("nnr");
        total += score_matches(&mut m, &ka, &kb, h, 5.0).0;
    }
    total / held.len() as f64
}

fn smoke_train() -> (TrainState, Vec<f64>, Duration) {
    let mut state = TrainState::new(smoke_config());
    let pairs = smoke_pairs();
    let mut desc = Vec::new();
    let t0 = Instant::now();
    train_loop(&mut state, &pairs, |_, rec| {
        let vals: Vec<f64> = [rec.forward.as_ref(), rec.backward.as_ref()]
            .into_iter()
            .flatten()
            .map(|r| r.description)
            .collect();
        if !vals.is_empty() {
            desc.push(vals.iter().sum::<f64>() / vals.len() as f64);
        }
    })
    .expect("smoke training failed");
    (state, desc, t0.elapsed())
}

fn checkpoint_bytes(state: &TrainState) -> Vec<u8> {
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("smoke.ckpt");
    save_checkpoint(state, &path).expect("save");
    std::fs::read(&path).expect("read")
}

struct SmokeOutcome {
    ckpt: Vec<u8>,
    desc: Vec<f64>,
    elapsed: Duration,
    trained_nnr: f64,
    untrained_nnr: f64,
}

static SMOKE: OnceLock<SmokeOutcome> = OnceLock::new();

fn smoke() -> &'static SmokeOutcome {
    SMOKE.get_or_init(|| {
        let (state, desc, elapsed) = smoke_train();
        let held = held_out_pairs();
        let untrained = RfNet::new(&smoke_config());
        SmokeOutcome {
            ckpt: checkpoint_bytes(&state),
            desc,
            elapsed,
            trained_nnr: mean_nnr_score(&state.model, &held),
            untrained_nnr: mean_nnr_score(&untrained, &held),
        }
    })
}

#[test]
fn a08_smoke_training() {
    finish("smoke training", (|| {
        let s = smoke();
        ensure!(
            s.elapsed <= Duration::from_secs(900),
            "training took {:?} (budget 15 min)",
            s.elapsed
        );
        ensure!(s.desc.len() >= 40, "only {} loss samples recorded", s.desc.len());
        let first: f64 = s.desc[..20].iter().sum::<f64>() / 20.0;
        let last: f64 = s.desc[s.desc.len() - 20..].iter().sum::<f64>() / 20.0;
        ensure!(
            last <= 0.8 * first,
            "description loss fell only {:.1}% (first20 {first:.4}, last20 {last:.4})",
            100.0 * (1.0 - last / first)
        );
        ensure!(
            s.trained_nnr > s.untrained_nnr,
            "NNR(0.7) K=128 held-out score did not improve ({:.4} vs {:.4})",
            s.trained_nnr, s.untrained_nnr
        );
        Ok(format!(
            "500 iters in {:.0?}: description loss {first:.3} -> {last:.3} ({:.0}% drop), held-out NNR {:.3} -> {:.3}",
            s.elapsed,
            100.0 * (1.0 - last / first),
            s.untrained_nnr,
            s.trained_nnr
        ))
    })());
}

#[test]
fn a09_determinism() {
    finish("determinism", (|| {
        let first = smoke();
        let (state2, _, _) = smoke_train();
        let bytes2 = checkpoint_bytes(&state2);
        ensure!(
            first.ckpt == bytes2,
            "checkpoints differ ({} vs {} bytes)",
            first.ckpt.len(),
            bytes2.len()
        );
        Ok(format!(
            "two 500-iteration runs with the same seed produced bit-identical {}-byte checkpoints",
            bytes2.len()
        ))
    })());
}

// ---------------------------------------------------------------------------
// 10. Format round-trips and malformed-input rejection
// ---------------------------------------------------------------------------

#[test]
fn a10_format_round_trips() {
    finish("format round-trips", (|| {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;

        // checkpoint: save -> load -> save must be byte-identical
        let mut cfg = TrainConfig::default();
        cfg.det_layers = 2;
        cfg.det_channels = 4;
        cfg.des_widths = [4, 4, 8, 8, 8, 8];
        cfg.image_size = (32, 24);
        cfg.loss.k = 8;
        cfg.lr = 0.01;
        cfg.iterations = 1;
        let mut state = TrainState::new(cfg);
        let base = textured_image(32, 24, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (a, b, h_ab) = synth_pair(&base, &SynthParams::default(), &mut rng)
            .map_err(|e| e.to_string())?;
        train_loop(&mut state, &[TrainPair { a, b, h_ab }], |_, _| {})
            .map_err(|e| e.to_string())?;
        let p1 = dir.path().join("one.ckpt");
        let p2 = dir.path().join("two.ckpt");
        save_checkpoint(&state, &p1).map_err(|e| e.to_string())?;
        let reloaded = load_checkpoint(&p1).map_err(|e| e.to_string())?;
        save_checkpoint(&reloaded, &p2).map_err(|e| e.to_string())?;
        let b1 = std::fs::read(&p1).map_err(|e| e.to_string())?;
        let b2 = std::fs::read(&p2).map_err(|e| e.to_string())?;
        ensure!(b1 == b2, "checkpoint round trip changed {} -> {} bytes", b1.len(), b2.len());

        // corrupted checkpoint must be rejected
        let mut corrupt = b1.clone();
        corrupt[0] ^= 0xFF;
        let pc = dir.path().join("corrupt.ckpt");
        std::fs::write(&pc, &corrupt).map_err(|e| e.to_string())?;
        ensure!(load_checkpoint(&pc).is_err(), "corrupted checkpoint was accepted");

        // homography text: 9 reals round trip, malformed inputs rejected
        let h = Homography::new([1.1, 0.2, 3.0, -0.1, 0.9, -2.0, 1e-4, 0.0, 1.0])
            .map_err(|e| e.to_string())?;
        let reparsed = Homography::parse(&h.to_text(), "roundtrip").map_err(|e| e.to_string())?;
        for (r, w) in reparsed.as_array().iter().zip(h.as_array().iter()) {
            ensure!((r - w).abs() < 1e-12, "homography round trip changed an entry");
        }
        for bad in ["1 2 3", "1 2 3 4 5 6 7 8", "a b c d e f g h i", ""] {
            ensure!(
                Homography::parse(bad, "bad").is_err(),
                "malformed homography {bad:?} was accepted"
            );
        }

        // PGM round trip
        let img = textured_image(16, 12, 4);
        let pp = dir.path().join("img.pgm");
        write_pgm(&pp, &img).map_err(|e| e.to_string())?;
        let raw = decode_image(&pp).map_err(|e| e.to_string())?;
        ensure!(
            raw.width == 16 && raw.height == 12 && raw.channels == 1,
            "PGM round trip changed dimensions"
        );

        // malformed PGM/PPM inputs must be rejected with errors, not panics
        let cases: [(&str, &[u8]); 5] = [
            ("bad magic", b"P7\n4 4\n255\n0123456789abcdef"),
            ("truncated payload", b"P5\n4 4\n255\n0123"),
            ("missing maxval", b"P5\n4 4\n"),
            ("16-bit maxval", b"P5\n2 2\n65535\n\0\0\0\0\0\0\0\0"),
            ("truncated ppm", b"P6\n2 2\n255\n\0\0\0"),
        ];
        for (what, bytes) in cases {
            let p = dir.path().join("bad.pgm");
            std::fs::write(&p, bytes).map_err(|e| e.to_string())?;
            ensure!(decode_image(&p).is_err(), "malformed image ({what}) was accepted");
        }
        Ok("checkpoint save/load byte-identical; malformed checkpoints, homography text, and PGM/PPM inputs rejected".into())
    })());
}
