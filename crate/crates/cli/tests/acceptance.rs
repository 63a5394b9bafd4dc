//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use gaitmorph::autoencoder::{smooth_l1, Bottleneck, LossWeights, SMOOTH_L1_BETA};
use gaitmorph::gaitdata::{augment, generate_dataset, normalize, Augmentation, GeneratorConfig};
use gaitmorph::numerics::Matrix;
use gaitmorph::quantizer::{ema_update, expire_stale, ortho_penalty, quantize};
use gaitmorph::transport::{MorphMode, TokenHistogram};
use gaitmorph::{
    apply_transport_morph, compressed_bits, compute_fgd, fit_gaussian, frechet_distance, learn_transport_maps,
    solve_emd, train_model, Autoencoder, Codebook, Dataset, Embedder, FitConfig, GaitModel, GaussianStats,
    ModelConfig, SkeletonSequence, Split, TrainConfig, TransportMapSet, VariationLabel,
};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", gradient_check),
        ("EMD oracle equivalence", emd_oracle),
        ("compression arithmetic", compression_bits),
        ("reconstruction learning", reconstruction),
        ("morph direction", morph_direction),
        ("FGD correctness", fgd_correctness),
        ("quantizer invariants", quantizer_invariants),
        ("morph identity", morph_identity),
        ("augmentation involutions", augmentation_involutions),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn normalized(cfg: &GeneratorConfig) -> Dataset {
    let ds = generate_dataset(cfg).unwrap();
    let seqs = ds.sequences.iter().map(|s| normalize(s).unwrap()).collect();
    Dataset::new(seqs, Split::Train).unwrap()
}

/// 1. Analytic gradients against central differences on a tiny model.
fn gradient_check() -> Outcome {
    let cfg = ModelConfig {
        frames: 8,
        joints: 4,
        enc_channels: vec![4],
        dec_channels: vec![4],
        n_latent: 6,
        n_code: 4,
        adjacency_scales: 2,
        seed: 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let net = Autoencoder::new(cfg.clone()).unwrap();
    let x = Array3::from_shape_fn((8, 4, 2), |_| rng.random_range(-1.0..1.0));
    let latent = net.encode(&x).unwrap();
    let flat: Vec<Array3<f64>> = vec![latent.clone()];
    let codebook = gaitmorph::quantizer::init_codebook_kmeans(&flat, 4, 5).unwrap();
    let (_, zq) = quantize(&codebook, &latent).unwrap();
    let offset = &zq - &latent;
    let weights = LossWeights::default();

    // Straight-through gradients equal the exact gradients of the frozen surrogate.
    let st = net.loss_and_grad(&x, Bottleneck::Codebook(&codebook), &weights).unwrap();
    let frozen = Bottleneck::Frozen {
        target: &zq,
        offset: &offset,
    };
    let analytic = net.loss_and_grad(&x, frozen, &weights).unwrap();
    for (a, b) in st.grads.tensors().iter().zip(analytic.grads.tensors()) {
        ensure(*a == b, || "straight-through and surrogate gradients differ".into())?;
    }

    let h = 1e-5;
    let mut probe = net.clone();
    let (mut worst_rel, mut worst_abs, mut checked) = (0.0f64, 0.0f64, 0usize);
    let count = analytic.grads.tensors().len();
    for ti in 0..count {
        let shape = analytic.grads.tensors()[ti].dim();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let original = probe.params.tensors()[ti][[r, c]];
                let mut eval = |v: f64| {
                    probe.params.tensors_mut()[ti][[r, c]] = v;
                    let b = Bottleneck::Frozen {
                        target: &zq,
                        offset: &offset,
                    };
                    probe.loss(&x, b, &weights).unwrap().total
                };
                let fd = (eval(original + h) - eval(original - h)) / (2.0 * h);
                eval(original);
                let g = analytic.grads.tensors()[ti][[r, c]];
                let abs = (g - fd).abs();
                let rel = abs / g.abs().max(fd.abs());
                ensure(abs < 1e-8 || rel < 1e-4, || {
                    format!("tensor {ti} [{r},{c}]: analytic {g:e} vs fd {fd:e}")
                })?;
                worst_abs = worst_abs.max(abs);
                if abs >= 1e-8 || g.abs() > 1e-6 {
                    worst_rel = worst_rel.max(rel);
                }
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} parameters, worst relative error {worst_rel:.1e}, worst absolute {worst_abs:.1e}"))
}

/// Minimum cost over every integer coupling with the given margins, pruned
/// by the best cost found so far (costs are non-negative).
fn brute_force_emd(a: &[u64], b: &[u64], cost: &Matrix) -> f64 {
    struct Search<'a> {
        a: &'a [u64],
        cost: &'a Matrix,
        remaining: Vec<u64>,
        best: f64,
    }
    impl Search<'_> {
        fn row(&mut self, i: usize, acc: f64) {
            if acc >= self.best {
                return;
            }
            if i == self.a.len() {
                if self.remaining.iter().all(|&r| r == 0) {
                    self.best = acc;
                }
                return;
            }
            self.cell(i, 0, self.a[i], acc);
        }
        fn cell(&mut self, i: usize, j: usize, left: u64, acc: f64) {
            if acc >= self.best {
                return;
            }
            if j + 1 == self.remaining.len() {
                if left <= self.remaining[j] {
                    self.remaining[j] -= left;
                    self.row(i + 1, acc + left as f64 * self.cost[(i, j)]);
                    self.remaining[j] += left;
                }
                return;
            }
            for f in 0..=left.min(self.remaining[j]) {
                self.remaining[j] -= f;
                self.cell(i, j + 1, left - f, acc + f as f64 * self.cost[(i, j)]);
                self.remaining[j] += f;
            }
        }
    }
    let mut s = Search {
        a,
        cost,
        remaining: b.to_vec(),
        best: f64::INFINITY,
    };
    s.row(0, 0.0);
    s.best
}

/// 2. Exact EMD against exhaustive enumeration.
fn emd_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let bins = rng.random_range(2..=5);
        let denom = rng.random_range(1..=12u64);
        let mut draw = || {
            let mut c = vec![0u64; bins];
            for _ in 0..denom {
                c[rng.random_range(0..bins)] += 1;
            }
            c
        };
        let (ca, cb) = (draw(), draw());
        let data = (0..bins * bins).map(|_| rng.random_range(0.0..10.0)).collect();
        let cost = Matrix::new(bins, bins, data).unwrap();
        let a = TokenHistogram::from_counts(ca.clone()).unwrap();
        let b = TokenHistogram::from_counts(cb.clone()).unwrap();
        let map = solve_emd(&a, &b, &cost).map_err(|e| format!("case {case}: {e}"))?;
        let oracle = brute_force_emd(&ca, &cb, &cost) / denom as f64;
        let err = (map.cost - oracle).abs();
        ensure(err < 1e-8, || format!("case {case}: solver {} vs oracle {oracle}", map.cost))?;
        worst = worst.max(err);
        let (rows, cols) = (map.row_sums(), map.col_sums());
        for k in 0..bins {
            ensure((rows[k] - a.weights()[k]).abs() < 1e-9, || format!("case {case}: row {k} marginal"))?;
            ensure((cols[k] - b.weights()[k]).abs() < 1e-9, || format!("case {case}: column {k} marginal"))?;
        }
        ensure(map.entries().iter().all(|e| e.2 >= 0.0), || format!("case {case}: negative mass"))?;
    }
    Ok(format!("200 instances, worst cost error {worst:.1e}"))
}

/// 3. Bit counts quoted for 144 positions.
fn compression_bits() -> Outcome {
    let two = compressed_bits(144, 2);
    let eight = compressed_bits(144, 8);
    ensure(two == 144 && eight == 432, || format!("got {two} and {eight}"))?;
    Ok("144 bits at K=2, 432 bits at K=8".into())
}

/// 4. Validation reconstruction beats the constant mean skeleton by 2x.
fn reconstruction() -> Outcome {
    let data = normalized(&GeneratorConfig {
        subjects: 8,
        walks_per_variation: 4,
        ..Default::default()
    });
    let (train, val) = data.split_by_walk(1).unwrap();
    let fit = FitConfig {
        steps: 2000,
        batch_size: 8,
        codebook_size: 8,
        seed: 0,
    };
    let model = train_model(&ModelConfig::default(), &TrainConfig::default(), &fit, &train.sequences, |_, _| {})
        .map_err(|e| e.to_string())?;

    let (t, j, _) = train.sequences[0].frames.dim();
    let mut pose = Array2::<f64>::zeros((j, 2));
    for s in &train.sequences {
        for f in s.frames.outer_iter() {
            pose += &f;
        }
    }
    pose /= (train.sequences.len() * t) as f64;
    let constant = Array3::from_shape_fn((t, j, 2), |(_, jj, c)| pose[[jj, c]]);

    let (mut model_loss, mut base_loss) = (0.0, 0.0);
    for s in &val.sequences {
        let recon = model.reconstruct(s).unwrap();
        model_loss += smooth_l1(&recon.frames, &s.frames, SMOOTH_L1_BETA).unwrap().0;
        base_loss += smooth_l1(&constant, &s.frames, SMOOTH_L1_BETA).unwrap().0;
    }
    let n = val.sequences.len() as f64;
    let ratio = model_loss / base_loss;
    ensure(ratio < 0.5, || {
        format!("validation loss {:.5} vs mean skeleton {:.5} (ratio {ratio:.3})", model_loss / n, base_loss / n)
    })?;
    Ok(format!(
        "validation loss {:.5} vs mean skeleton {:.5} (ratio {ratio:.3}), 2000 steps",
        model_loss / n,
        base_loss / n
    ))
}

/// 5. Held-out walks morphed from 45° to 0° are closer to real 0° walks.
fn morph_direction() -> Outcome {
    let front = VariationLabel::normal(0.0);
    let oblique = VariationLabel::normal(45.0);
    let mut details = Vec::new();
    let mut wins = 0;
    for seed in 0..3u64 {
        let data = normalized(&GeneratorConfig {
            subjects: 16,
            walks_per_variation: 4,
            variations: vec![front.clone(), oblique.clone()],
            seed,
            ..Default::default()
        });
        let (train, test) = data.split_by_walk(1).unwrap();
        let model_cfg = ModelConfig {
            seed,
            ..Default::default()
        };
        let train_cfg = TrainConfig {
            seed,
            ..Default::default()
        };
        let fit = FitConfig {
            steps: 1500,
            batch_size: 8,
            codebook_size: 8,
            seed,
        };
        let model = train_model(&model_cfg, &train_cfg, &fit, &train.sequences, |_, _| {}).map_err(|e| e.to_string())?;
        let maps = learn_transport_maps(&model, &train.filter_variation(&oblique), &train.filter_variation(&front))
            .map_err(|e| e.to_string())?;
        let source = test.filter_variation(&oblique);
        let target = test.filter_variation(&front);
        let morphed: Vec<SkeletonSequence> = source
            .iter()
            .map(|s| apply_transport_morph(&model, &maps, s).unwrap())
            .collect();
        let morphed: Vec<&SkeletonSequence> = morphed.iter().collect();
        let embedder = Embedder::new(&model);
        let raw = compute_fgd(&embedder, &source, &target).unwrap();
        let moved = compute_fgd(&embedder, &morphed, &target).unwrap();
        if moved < raw {
            wins += 1;
        }
        details.push(format!("seed {seed}: {moved:.4} < {raw:.4}"));
    }
    let detail = details.join(", ");
    ensure(wins == 3, || format!("{wins} of 3 seeds: {detail}"))?;
    Ok(detail)
}

fn gaussian_1d(m: f64, sd: f64) -> GaussianStats {
    GaussianStats {
        mean: vec![m],
        covariance: Matrix::from_diag(&[sd * sd]),
        sample_count: 2,
    }
}

/// 6. FGD self-distance, 1-D closed form and rotation invariance.
fn fgd_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let vectors = |n: usize, d: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect()
    };
    let a = fit_gaussian(&vectors(20, 16, &mut rng)).unwrap();
    let self_d = frechet_distance(&a, &a).unwrap();
    ensure(self_d.abs() < 1e-8, || format!("FGD(A, A) = {self_d:e}"))?;

    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (m1, m2) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let (s1, s2) = (rng.random_range(0.01..3.0), rng.random_range(0.01..3.0));
        let d = frechet_distance(&gaussian_1d(m1, s1), &gaussian_1d(m2, s2)).unwrap();
        let expected = (m1 - m2) * (m1 - m2) + (s1 - s2) * (s1 - s2);
        worst = worst.max((d - expected).abs());
    }
    ensure(worst < 1e-8, || format!("1-D closed form off by {worst:e}"))?;

    // Orthogonal matrix as a product of Householder reflections.
    let d = 6;
    let mut q = Matrix::identity(d);
    for _ in 0..d {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let nn: f64 = v.iter().map(|x| x * x).sum();
        let h = Matrix::new(
            d,
            d,
            (0..d * d)
                .map(|k| f64::from(u8::from(k / d == k % d)) - 2.0 * v[k / d] * v[k % d] / nn)
                .collect(),
        )
        .unwrap();
        q = q.matmul(&h).unwrap();
    }
    let rotate = |vs: &[Vec<f64>]| -> Vec<Vec<f64>> {
        vs.iter()
            .map(|v| (0..d).map(|i| (0..d).map(|k| q[(i, k)] * v[k]).sum()).collect())
            .collect()
    };
    let mut rot_worst = 0.0f64;
    for _ in 0..20 {
        let (x, y) = (vectors(12, d, &mut rng), vectors(9, d, &mut rng));
        let base = frechet_distance(&fit_gaussian(&x).unwrap(), &fit_gaussian(&y).unwrap()).unwrap();
        let turned = frechet_distance(&fit_gaussian(&rotate(&x)).unwrap(), &fit_gaussian(&rotate(&y)).unwrap()).unwrap();
        rot_worst = rot_worst.max((base - turned).abs());
    }
    ensure(rot_worst < 1e-7, || format!("rotation changed FGD by {rot_worst:e}"))?;
    Ok(format!(
        "self {self_d:.1e}, closed form {worst:.1e}, rotation {rot_worst:.1e}"
    ))
}

/// 7. Idempotence, EMA convergence, expiry timing and the orthogonal penalty.
fn quantizer_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let cb = Codebook::new(Array2::from_shape_fn((8, 4), |_| rng.random_range(-1.0..1.0))).unwrap();
        let lat = Array3::from_shape_fn((3, 5, 4), |_| rng.random_range(-2.0..2.0));
        let (tok, zq) = quantize(&cb, &lat).unwrap();
        let (tok2, zq2) = quantize(&cb, &zq).unwrap();
        ensure(tok == tok2 && zq == zq2, || "quantization is not idempotent".into())?;
    }

    // Every position of a fixed batch goes to one code; its embedding must
    // converge to the batch mean.
    let mut cb = Codebook::new(Array2::from_shape_fn((3, 4), |(k, d)| if k == d { 1.0 } else { 0.0 })).unwrap();
    let lat = Array3::from_shape_fn((2, 3, 4), |_| rng.random_range(0.5..1.5));
    let grid = gaitmorph::TokenGrid::new(2, 3, vec![1; 6]).unwrap();
    let mean: Vec<f64> = (0..4)
        .map(|d| lat.index_axis(ndarray::Axis(2), d).mean().unwrap())
        .collect();
    for _ in 0..200 {
        ema_update(&mut cb, &[&lat], &[&grid]).unwrap();
    }
    let ema_err = (0..4).map(|d| (cb.embeddings[[1, d]] - mean[d]).abs()).fold(0.0, f64::max);
    ensure(ema_err < 1e-6, || format!("EMA embedding off the mean by {ema_err:e}"))?;

    // Codes 0 and 2 decay by 0.9 per update from count 1: 0.9^43 > 0.01 > 0.9^44.
    let mut cb = Codebook::new(Array2::from_shape_fn((3, 4), |(k, d)| if k == d { 1.0 } else { 0.0 })).unwrap();
    for step in 1..=50 {
        ema_update(&mut cb, &[&lat], &[&grid]).unwrap();
        let replaced = expire_stale(&mut cb, &[&lat], step).unwrap();
        let expect_now = step == 44;
        ensure(replaced.is_empty() != expect_now, || format!("step {step}: replaced {replaced:?}"))?;
        if expect_now {
            ensure(replaced == vec![0, 2], || format!("replaced {replaced:?}"))?;
            ensure(cb.ema_counts[0] == 1.0 && cb.ema_counts[2] == 1.0, || "counts not reset".into())?;
            break;
        }
    }

    for k in 2..=4 {
        let cb = Codebook::new(Array2::from_shape_fn((k, 4), |(i, d)| if i == d { 2.5 } else { 0.0 })).unwrap();
        let p = ortho_penalty(&cb).unwrap();
        ensure(p.abs() < 1e-15, || format!("penalty {p} on an orthogonal set"))?;
    }
    Ok("idempotent, EMA within 1e-6, expiry at update 44, zero penalty".into())
}

/// 8. Identity maps reproduce the plain reconstruction bit for bit.
fn morph_identity() -> Outcome {
    let data = normalized(&GeneratorConfig {
        subjects: 2,
        walks_per_variation: 2,
        frames: 16,
        ..Default::default()
    });
    let cfg = ModelConfig {
        frames: 16,
        seed: 8,
        ..Default::default()
    };
    let fit = FitConfig {
        steps: 5,
        batch_size: 2,
        codebook_size: 8,
        seed: 8,
    };
    let model: GaitModel = train_model(&cfg, &TrainConfig::default(), &fit, &data.sequences, |_, _| {}).unwrap();
    let maps = TransportMapSet::identity(&model, VariationLabel::normal(0.0));
    for s in &data.sequences {
        let latent = model.net.encode(&s.frames).unwrap();
        let (grid, zq) = quantize(&model.codebook, &latent).unwrap();
        ensure(maps.morph_tokens(&grid, MorphMode::Argmax).unwrap() == grid, || "token grid changed".into())?;
        let expected = model.net.decode(&zq).unwrap();
        let morphed = apply_transport_morph(&model, &maps, s).unwrap();
        let same_bits = morphed
            .frames
            .iter()
            .zip(expected.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same_bits, || "output differs from the reconstruction".into())?;
    }
    Ok(format!("{} walks bit-identical", data.sequences.len()))
}

/// 9. Mirror and reverse are involutions; pace 1 is the identity.
fn augmentation_involutions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..100 {
        let frames = 8 * rng.random_range(1..=8);
        let joints = if rng.random_bool(0.5) { 18 } else { rng.random_range(2..=20) };
        let data = Array3::from_shape_fn((frames, joints, 2), |_| rng.random_range(-2.0..2.0));
        let seq = SkeletonSequence::new(data, case, 0, VariationLabel::normal(0.0)).unwrap();
        let twice = |aug: &Augmentation| augment(&augment(&seq, aug, 1).unwrap(), aug, 2).unwrap();
        ensure(twice(&Augmentation::Mirror) == seq, || format!("case {case}: mirror twice"))?;
        ensure(twice(&Augmentation::Reverse) == seq, || format!("case {case}: reverse twice"))?;
        let pace = augment(&seq, &Augmentation::RandomPace { multiplier: Some(1.0) }, 3).unwrap();
        ensure(pace == seq, || format!("case {case}: pace x1"))?;
    }
    Ok("100 random walks".into())
}
