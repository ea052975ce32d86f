//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines always reach the terminal. With
//! `ACCEPTANCE_STRICT=1` the process exits non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use hebbseg::data::{
    gen_synthetic, split_regime, RegimeSpec, Sample, SyntheticData, SyntheticKind, SyntheticTaskSpec,
};
use hebbseg::finetune::{backward, finetune, softmax_ce_loss, FinetuneOptions, SGDConfig};
use hebbseg::layers::{tsa_reconstruction, tsa_reconstruction_literal};
use hebbseg::metrics::{asd, dice, hd95, jaccard, mean_ci, BinaryMask};
use hebbseg::oracles::{HpcaOracle, SwtaOracle};
use hebbseg::pretrain::{median, norms_by_layer, pretrain, PretrainOptions};
use hebbseg::rules::gate_swta;
use hebbseg::segnet::{Network, NetworkSpec};
use hebbseg::tensor::{conv2d_forward, matmul_transposed, tconv2d_forward, unfold};
use hebbseg::{ConvGeometry, HebbianConfig, Rule, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed, detail: detail.into() }
}

fn within(limit: Duration, elapsed: Duration) -> bool {
    elapsed < limit
}

// 1. HPCA weight rows align with the leading covariance eigenvectors.
fn hpca_principal_components() -> Verdict {
    let oracle = HpcaOracle::default();
    let start = Instant::now();
    let mut passing = 0;
    let mut worst = f64::INFINITY;
    for seed in 0..5 {
        let (samples, _) = oracle.data(seed).expect("covariance data");
        let d = oracle.dim;
        let n = samples.shape()[0];
        let x = DMatrix::from_row_slice(n, d, &samples.data().iter().map(|&v| v as f64).collect::<Vec<_>>());
        let cov = x.transpose() * &x / n as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let w = oracle.train(&samples, seed).expect("training");
        let mut ok = true;
        for (j, &col) in order.iter().take(oracle.neurons).enumerate() {
            let v = eig.eigenvectors.column(col);
            let row = &w.data()[j * d..(j + 1) * d];
            let dot: f64 = row.iter().zip(v.iter()).map(|(&a, &b)| a as f64 * b).sum();
            let norm = row.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
            let c = (dot / norm).abs();
            worst = worst.min(c);
            ok &= c >= 0.99;
        }
        passing += ok as usize;
    }
    let t = start.elapsed();
    verdict(
        passing >= 4 && within(Duration::from_secs(30), t),
        format!("{passing}/5 seeds, worst |cos| {worst:.5}, {t:.2?}"),
    )
}

// 2. SWTA neurons settle on distinct cluster centroids.
fn swta_centroids() -> Verdict {
    let oracle = SwtaOracle::default();
    let start = Instant::now();
    let outcomes: Vec<_> = (0..5).map(|s| oracle.run(s).expect("swta oracle")).collect();
    let t = start.elapsed();
    let passing = outcomes.iter().filter(|o| o.passed).count();
    let worst = outcomes.iter().flat_map(|o| o.errors.iter().copied()).fold(0.0, f64::max);
    verdict(
        passing >= 4 && within(Duration::from_secs(10), t),
        format!("{passing}/5 seeds, worst matched error {worst:.3} sigma, {t:.2?}"),
    )
}

// 3. Sharp and flat temperature limits of the gate.
fn temperature_limits() -> Verdict {
    let start = Instant::now();
    let y = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let sharp = gate_swta(&y, 0.01).unwrap();
    let flat = gate_swta(&y, 1000.0).unwrap();
    let max_sharp = sharp.data().iter().copied().fold(0.0f32, f32::max);
    let dev_flat = flat.data().iter().map(|&g| (g - 0.5).abs()).fold(0.0f32, f32::max);
    let t = start.elapsed();
    verdict(
        max_sharp >= 0.999 && dev_flat <= 1e-3 && within(Duration::from_secs(1), t),
        format!("max gate at t=0.01: {max_sharp:.6}; |g - 1/2| at t=1000: {dev_flat:.2e}"),
    )
}

fn random_tconv_case(rng: &mut ChaCha8Rng) -> (Tensor, Tensor, ConvGeometry) {
    let cin = rng.random_range(1..4);
    let cout = rng.random_range(1..5);
    let k = rng.random_range(1..4);
    let stride = rng.random_range(1..4);
    let padding = rng.random_range(0..k);
    let geom = ConvGeometry::new(cin, cout, k, stride, padding);
    loop {
        let h = rng.random_range(1..6);
        let w = rng.random_range(1..6);
        if let Ok((hh, ww)) = geom.tconv_output_hw(h, w) {
            let n = rng.random_range(1..3);
            let up = Tensor::randn(&[n, cout, hh, ww], 1.0, rng);
            let weights = Tensor::randn(&geom.tconv_weight_shape(), 1.0, rng);
            return (up, weights, geom);
        }
    }
}

// 4. Fast TSA reconstruction equals the literal transform-unfold-matmul.
fn tsa_equivalence() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let (up, w, geom) = random_tconv_case(&mut rng);
        for rule in [Rule::Swta, Rule::Hpca] {
            let fast = tsa_reconstruction(&up, &w, &geom, rule).unwrap();
            let slow = tsa_reconstruction_literal(&up, &w, &geom, rule).unwrap();
            worst = worst.max(fast.max_abs_diff(&slow).unwrap());
        }
    }
    let t = start.elapsed();
    verdict(
        worst <= 1e-6 && within(Duration::from_secs(10), t),
        format!("100 geometries x 2 rules, max abs diff {worst:.2e}, {t:.2?}"),
    )
}

// 5. Each neuron's TSA reconstruction has the downsampled map's shape.
fn tsa_shapes() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failures = 0;
    for _ in 0..50 {
        let (up, w, geom) = random_tconv_case(&mut rng);
        let [n, _, hh, ww] = up.dims4().unwrap();
        let (h, wd) = geom.swapped().conv_output_hw(hh, ww).unwrap();
        let down = Tensor::randn(&[n, geom.in_channels, h, wd], 1.0, &mut rng);
        let rec = tsa_reconstruction(&up, &w, &geom, Rule::Swta).unwrap();
        let per_neuron = &rec.shape()[1..];
        if rec.shape()[0] != geom.out_channels || per_neuron != down.shape() {
            failures += 1;
        }
    }
    verdict(failures == 0, format!("50 geometries, {failures} failures"))
}

fn conv_reference(x: &Tensor, w: &Tensor, g: &ConvGeometry) -> Vec<f64> {
    let [n, c, h, wd] = x.dims4().unwrap();
    let (oh, ow) = g.conv_output_hw(h, wd).unwrap();
    let mut out = vec![0.0; n * g.out_channels * oh * ow];
    for b in 0..n {
        for o in 0..g.out_channels {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = 0.0f64;
                    for ci in 0..c {
                        for ky in 0..g.kernel_h {
                            for kx in 0..g.kernel_w {
                                let iy = (y * g.stride + ky) as isize - g.padding as isize;
                                let ix = (xx * g.stride + kx) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((b * c + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((o * c + ci) * g.kernel_h + ky) * g.kernel_w + kx];
                                s += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((b * g.out_channels + o) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    out
}

fn tconv_reference(x: &Tensor, w: &Tensor, g: &ConvGeometry) -> Vec<f64> {
    let [n, c, h, wd] = x.dims4().unwrap();
    let (oh, ow) = g.tconv_output_hw(h, wd).unwrap();
    let co = g.out_channels;
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..wd {
                    let xv = x.data()[((b * c + ci) * h + y) * wd + xx] as f64;
                    for o in 0..co {
                        for ky in 0..g.kernel_h {
                            for kx in 0..g.kernel_w {
                                let oy = (y * g.stride + ky) as isize - g.padding as isize;
                                let ox = (xx * g.stride + kx) as isize - g.padding as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                let wv = w.data()[((ci * co + o) * g.kernel_h + ky) * g.kernel_w + kx] as f64;
                                out[((b * co + o) * oh + oy as usize) * ow + ox as usize] += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn max_diff(a: &Tensor, b: &[f64]) -> f64 {
    a.data().iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}

fn random_conv_case(rng: &mut ChaCha8Rng) -> (Tensor, ConvGeometry) {
    loop {
        let cin = rng.random_range(1..4);
        let cout = rng.random_range(1..4);
        let k = rng.random_range(1..4);
        let geom = ConvGeometry::new(cin, cout, k, rng.random_range(1..3), rng.random_range(0..2));
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        if geom.conv_output_hw(h, w).is_ok() {
            let n = rng.random_range(1..3);
            return (Tensor::randn(&[n, cin, h, w], 1.0, rng), geom);
        }
    }
}

// 6. Conv / t-conv kernels against nested loops, adjointness, unfold path.
fn kernel_correctness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut conv_err, mut tconv_err, mut adj_err) = (0.0f64, 0.0f64, 0.0f64);
    let mut unfold_exact = true;
    for _ in 0..100 {
        let (x, g) = random_conv_case(&mut rng);
        let w = Tensor::randn(&g.conv_weight_shape(), 1.0, &mut rng);
        let y = conv2d_forward(&x, &w, &g).unwrap();
        conv_err = conv_err.max(max_diff(&y, &conv_reference(&x, &w, &g)));

        let [n, c, h, wd] = x.dims4().unwrap();
        let cols = unfold(&x, &g).unwrap();
        let p = cols.shape()[1];
        let wm = w.clone().reshape(&[g.out_channels, c * g.kernel_h * g.kernel_w]).unwrap();
        for b in 0..n {
            let patch = Tensor::new(vec![p, wm.shape()[1]], cols.data()[b * p * wm.shape()[1]..][..p * wm.shape()[1]].to_vec()).unwrap();
            let via = matmul_transposed(&wm, &patch).unwrap();
            let direct = &y.data()[b * g.out_channels * p..(b + 1) * g.out_channels * p];
            unfold_exact &= via.data() == direct;
        }

        // The t-conv with the same geometry maps the conv output space back.
        let yr = Tensor::randn(y.shape(), 1.0, &mut rng);
        let tw = Tensor::randn(&g.swapped().tconv_weight_shape(), 1.0, &mut rng);
        let gt = g.swapped();
        if let Ok(t) = tconv2d_forward(&yr, &tw, &gt) {
            tconv_err = tconv_err.max(max_diff(&t, &tconv_reference(&yr, &tw, &gt)));
        }
        let back = tconv2d_forward(&yr, &w.clone().reshape(&gt.tconv_weight_shape()).unwrap(), &gt);
        if let Ok(back) = back {
            if back.shape() == [n, c, h, wd] {
                let lhs = y.dot(&yr).unwrap();
                let rhs = x.dot(&back).unwrap();
                adj_err = adj_err.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12));
            }
        }
    }
    verdict(
        conv_err <= 1e-6 && tconv_err <= 1e-6 && adj_err <= 1e-4 && unfold_exact,
        format!(
            "conv {conv_err:.1e}, t-conv {tconv_err:.1e}, adjoint rel {adj_err:.1e}, unfold+matmul exact: {unfold_exact}"
        ),
    )
}

fn loss_and_pattern(net: &Network, x: &Tensor, labels: &[u8]) -> (f64, Vec<usize>) {
    let (logits, cache) = net.forward(x).unwrap();
    (softmax_ce_loss(&logits, labels).unwrap().0, cache.activation_pattern())
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if den == 0.0 { 0.0 } else { num / den }
}

/// Worst per-layer relative error against central differences, skipping
/// coordinates whose perturbation crosses a ReLU or pooling kink.
fn gradient_check(spec: NetworkSpec, seed: u64, weight_scale: f32) -> (f64, usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::init(spec.clone(), seed).unwrap();
    for l in net.layers_mut() {
        l.weights.scale(weight_scale);
    }
    let x = Tensor::randn(&[2, spec.in_channels, 4, 4], 1.0, &mut rng);
    let labels: Vec<u8> = (0..32).map(|_| rng.random_range(0..spec.classes as u8)).collect();
    let (logits, cache) = net.forward(&x).unwrap();
    let base = cache.activation_pattern();
    let (_, dl) = softmax_ce_loss(&logits, &labels).unwrap();
    let grads = backward(&net, &cache, &dl).unwrap();
    let h = 1e-3f32;
    let (mut worst, mut skipped, mut total) = (0.0f64, 0, 0);
    for (li, layer) in net.layers().iter().enumerate() {
        let (mut an, mut fd) = (Vec::new(), Vec::new());
        for i in 0..layer.weights.len() {
            let mut p = net.clone();
            p.layers_mut()[li].weights.data_mut()[i] += h;
            let mut m = net.clone();
            m.layers_mut()[li].weights.data_mut()[i] -= h;
            let (lp, pp) = loss_and_pattern(&p, &x, &labels);
            let (lm, pm) = loss_and_pattern(&m, &x, &labels);
            total += 1;
            if pp != base || pm != base {
                skipped += 1;
                continue;
            }
            fd.push((lp - lm) / (2.0 * h as f64));
            an.push(grads.grads[li].data()[i] as f64);
        }
        worst = worst.max(rel_err(&an, &fd));
    }
    (worst, skipped, total)
}

// 7. Backward passes against central finite differences.
fn gradient_checks() -> Verdict {
    let start = Instant::now();
    let (a, sa, ta) = gradient_check(NetworkSpec::new(1, vec![2, 3], 2), 11, 1.0);
    let mut plain = NetworkSpec::new(2, vec![3, 2], 3);
    plain.feature_norm = false;
    let (b, sb, tb) = gradient_check(plain, 12, 5.0);

    // Loss gradient alone.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng);
    let labels: Vec<u8> = (0..8).map(|_| rng.random_range(0..3)).collect();
    let (_, g) = softmax_ce_loss(&logits, &labels).unwrap();
    let h = 1e-2f32;
    let fd: Vec<f64> = (0..logits.len())
        .map(|i| {
            let mut p = logits.clone();
            p.data_mut()[i] += h;
            let mut m = logits.clone();
            m.data_mut()[i] -= h;
            (softmax_ce_loss(&p, &labels).unwrap().0 - softmax_ce_loss(&m, &labels).unwrap().0) / (2.0 * h as f64)
        })
        .collect();
    let an: Vec<f64> = g.data().iter().map(|&v| v as f64).collect();
    let c = rel_err(&an, &fd);
    let t = start.elapsed();
    let skipped = sa + sb;
    let total = ta + tb;
    verdict(
        a <= 1e-3 && b <= 1e-3 && c <= 1e-3 && skipped * 10 <= total && within(Duration::from_secs(30), t),
        format!(
            "normalised net {a:.1e}, plain net {b:.1e}, loss {c:.1e}; {skipped}/{total} kink coordinates skipped; {t:.2?}"
        ),
    )
}

fn brute_boundary(m: &[u8], h: usize, w: usize) -> Vec<(usize, usize)> {
    let on = |y: isize, x: isize| y >= 0 && x >= 0 && y < h as isize && x < w as isize && m[y as usize * w + x as usize] == 1;
    let mut out = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if on(y, x) && !(on(y - 1, x) && on(y + 1, x) && on(y, x - 1) && on(y, x + 1)) {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

// 8. Metrics against all-pairs brute force.
fn metrics_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (h, w) = (16, 16);
    let diag = ((h * h + w * w) as f64).sqrt();
    let mut bad = Vec::new();
    let mut identity = 0.0f64;
    for trial in 0..100 {
        let pa = rng.random_range(0.0..0.7);
        let pb = rng.random_range(0.0..0.7);
        let a: Vec<u8> = (0..h * w).map(|_| rng.random_bool(pa) as u8).collect();
        let b: Vec<u8> = (0..h * w).map(|_| rng.random_bool(pb) as u8).collect();
        let (ma, mb) = (BinaryMask::new(h, w, a.clone()).unwrap(), BinaryMask::new(h, w, b.clone()).unwrap());
        let inter = a.iter().zip(&b).filter(|(&x, &y)| x == 1 && y == 1).count() as f64;
        let (na, nb) = (a.iter().filter(|&&v| v == 1).count() as f64, b.iter().filter(|&&v| v == 1).count() as f64);
        let dc_ref = if na + nb == 0.0 { 1.0 } else { 2.0 * inter / (na + nb) };
        let ji_ref = if na + nb - inter == 0.0 { 1.0 } else { inter / (na + nb - inter) };
        let (ba, bb) = (brute_boundary(&a, h, w), brute_boundary(&b, h, w));
        let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| -> Vec<f64> {
            from.iter()
                .map(|&(y, x)| {
                    to.iter()
                        .map(|&(v, u)| (((y as f64 - v as f64).powi(2)) + (x as f64 - u as f64).powi(2)).sqrt())
                        .fold(f64::INFINITY, f64::min)
                })
                .collect()
        };
        let (hd_ref, asd_ref) = match (ba.is_empty(), bb.is_empty()) {
            (true, true) => (0.0, 0.0),
            (true, false) | (false, true) => (diag, diag),
            _ => {
                let mut d = directed(&ba, &bb);
                d.extend(directed(&bb, &ba));
                d.sort_by(|x, y| x.total_cmp(y));
                let rank = ((0.95 * d.len() as f64).ceil() as usize).max(1);
                (d[rank - 1], d.iter().sum::<f64>() / d.len() as f64)
            }
        };
        let dc = dice(&ma, &mb).unwrap();
        let ji = jaccard(&ma, &mb).unwrap();
        let hd = hd95(&ma, &mb).unwrap();
        let sd = asd(&ma, &mb).unwrap();
        if (dc - dc_ref).abs() > 1e-12 || (ji - ji_ref).abs() > 1e-12 || hd != hd_ref || (sd - asd_ref).abs() > 1e-6 {
            bad.push(trial);
        }
        identity = identity.max((dc - 2.0 * ji / (1.0 + ji)).abs());
    }
    verdict(
        bad.is_empty() && identity <= 1e-9,
        format!("100 random 16x16 pairs, {} mismatches, max |dc - 2ji/(1+ji)| {identity:.1e}", bad.len()),
    )
}

const BLOB_IMAGES: usize = 240;
const BLOB_TRAIN: usize = 200;

fn blob_task(seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let mut spec = SyntheticTaskSpec::blobs(BLOB_IMAGES, 64, 100 + seed);
    spec.kind = SyntheticKind::BlobSegmentation { size: 64, min_blobs: 1, max_blobs: 3, contrast: 0.15, noise: 0.3 };
    let SyntheticData::Blobs { samples } = gen_synthetic(&spec).unwrap() else { unreachable!() };
    let val = samples[BLOB_TRAIN..].to_vec();
    let mut train = samples;
    train.truncate(BLOB_TRAIN);
    (train, val)
}

// 9. SWTA-TSA pre-training then fine-tuning beats the same fine-tuning
// from a random initialisation.
fn two_stage_benefit() -> Verdict {
    let start = Instant::now();
    let spec = NetworkSpec::new(1, vec![8, 16], 2);
    let sgd = SGDConfig { lr0: 0.5, decay_every: 30, decay_factor: 0.1, epochs: 40, momentum: 0.9, batch_size: 4 };
    let hebbian = HebbianConfig::swta(0.05, 0.1);
    let (mut pre_dc, mut rand_dc) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let (train, val) = blob_task(seed);
        let split = split_regime(train.len(), &RegimeSpec { r: 5.0, seed }).unwrap();
        let labeled: Vec<Sample> = split.labeled.iter().map(|&i| train[i].clone()).collect();
        let images: Vec<Tensor> = train.iter().map(|s| s.image.clone()).collect();
        let mut pre = Network::init(spec.clone(), seed).unwrap();
        pretrain(&mut pre, &images, &hebbian, &PretrainOptions { epochs: 3, batch_size: 8, seed, decay: None }).unwrap();
        let opts = FinetuneOptions { augment: true, seed };
        pre_dc.push(finetune(pre, &labeled, &val, &sgd, &opts).unwrap().best_val_dc);
        let scratch = Network::init(spec.clone(), seed).unwrap();
        rand_dc.push(finetune(scratch, &labeled, &val, &sgd, &opts).unwrap().best_val_dc);
    }
    let t = start.elapsed();
    let (pm, ph) = mean_ci(&pre_dc, 0.90);
    let (rm, rh) = mean_ci(&rand_dc, 0.90);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(",");
    verdict(
        pm - rm > 0.0 && pm - ph > rm + rh && within(Duration::from_secs(15 * 60), t),
        format!(
            "pretrained {pm:.4} ± {ph:.4} [{}], random {rm:.4} ± {rh:.4} [{}], margin {:.4}, {t:.0?}",
            fmt(&pre_dc),
            fmt(&rand_dc),
            pm - rm
        ),
    )
}

// 10. Per-layer update norms decay during pre-training.
fn convergence_telemetry() -> Verdict {
    let mut passing = 0;
    let mut worst_ratio = 0.0f64;
    for seed in 0..5 {
        let SyntheticData::Blobs { samples } = gen_synthetic(&SyntheticTaskSpec::blobs(16, 32, seed)).unwrap() else {
            unreachable!()
        };
        let images: Vec<Tensor> = samples.into_iter().map(|s| s.image).collect();
        let mut net = Network::init(NetworkSpec::new(1, vec![4, 8], 2), seed).unwrap();
        let opts = PretrainOptions { epochs: 30, batch_size: 4, seed, decay: None };
        let rows = pretrain(&mut net, &images, &HebbianConfig::swta(0.05, 0.1), &opts).unwrap();
        let mut ok = true;
        for (_, norms) in norms_by_layer(&rows) {
            let ratio = median(&norms[norms.len() - 10..]) / median(&norms[..10]);
            worst_ratio = worst_ratio.max(ratio);
            ok &= ratio < 1.0;
        }
        passing += ok as usize;
    }
    verdict(
        passing >= 4,
        format!("{passing}/5 seeds with every layer decreasing, worst late/early median ratio {worst_ratio:.3}"),
    )
}

fn hebbseg(root: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_hebbseg"))
        .args(args)
        .current_dir(root)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn snapshot(dir: &Path, base: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            snapshot(&path, base, out);
        } else {
            out.insert(path.strip_prefix(base).unwrap().to_path_buf(), fs::read(&path).unwrap());
        }
    }
}

// 11. Repeating every CLI command with the same seed reproduces its outputs.
fn cli_reproducibility() -> Verdict {
    let spec = r#"{"kind":"blob_segmentation","size":32,"min_blobs":1,"max_blobs":3,"contrast":0.3,"noise":0.1,"samples":20,"seed":0}"#;
    let commands: [&[&str]; 9] = [
        &["synth", "--spec", "spec.json", "--out", "data", "--seed", "3"],
        &["pretrain", "--data", "data", "--out", "pre/swta.ckpt", "--epochs", "2", "--seed", "3"],
        &["pretrain", "--data", "data", "--out", "pre/hpca.ckpt", "--epochs", "2", "--rule", "hpca", "--variant", "s", "--seed", "3"],
        &["finetune", "--data", "data", "--regime", "50", "--init", "pre/swta.ckpt", "--epochs", "2", "--lr0", "0.1", "--out", "ft/pre.ckpt", "--seed", "3"],
        &["finetune", "--data", "data", "--regime", "50", "--init", "random", "--epochs", "2", "--lr0", "0.1", "--out", "ft/rand.ckpt", "--seed", "3"],
        &["probe", "--data", "data", "--regime", "50", "--init", "pre/swta.ckpt", "--epochs", "2", "--out", "probe/p.ckpt", "--seed", "3"],
        &["eval", "--target", "data", "--ckpt", "ft/pre.ckpt", "--save-pred", "eval/pred", "--out", "eval/metrics.csv"],
        &["inspect", "--ckpt", "pre/swta.ckpt", "--out", "inspect"],
        &["verify-oracles", "--seeds", "2", "--min-pass", "1", "--out", "oracles/report.json"],
    ];
    let mut runs = Vec::new();
    for _ in 0..2 {
        let root = tempfile::tempdir().unwrap();
        fs::write(root.path().join("spec.json"), spec).unwrap();
        for args in commands {
            if !hebbseg(root.path(), args) {
                return verdict(false, format!("`hebbseg {}` failed", args.join(" ")));
            }
        }
        let mut files = BTreeMap::new();
        snapshot(root.path(), root.path(), &mut files);
        runs.push((root, files));
    }
    let (a, b) = (&runs[0].1, &runs[1].1);
    let differing: Vec<String> = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let ckpts = a.keys().filter(|k| k.extension().is_some_and(|e| e == "ckpt")).count();
    let csvs = a.keys().filter(|k| k.extension().is_some_and(|e| e == "csv")).count();
    verdict(
        differing.is_empty() && a.len() == b.len() && ckpts >= 5 && csvs >= 5,
        format!(
            "{} commands twice, {} files ({ckpts} checkpoints, {csvs} CSVs), differing: {:?}",
            commands.len(),
            a.len(),
            differing
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 11] = [
        ("HPCA converges to principal components", hpca_principal_components),
        ("SWTA converges to cluster centroids", swta_centroids),
        ("temperature limits of the gate", temperature_limits),
        ("TSA reconstruction fast path equals literal path", tsa_equivalence),
        ("TSA reconstruction matches the downsampled shape", tsa_shapes),
        ("conv/t-conv kernels against references", kernel_correctness),
        ("gradients against finite differences", gradient_checks),
        ("metrics against brute force", metrics_oracle),
        ("pre-training improves fine-tuning", two_stage_benefit),
        ("pre-training update norms decay", convergence_telemetry),
        ("CLI outputs reproducible under a seed", cli_reproducibility),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let v = check();
        println!("criterion {n:>2} {}: {name} ({})", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        failed += !v.passed as usize;
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
        if strict { ExitCode::FAILURE } else { ExitCode::SUCCESS }
    } else {
        ExitCode::SUCCESS
    }
}
