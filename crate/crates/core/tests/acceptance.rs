//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass substrings as arguments to run a subset.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pfad_core::checkpoint::Checkpoint;
use pfad_core::codec::{Codec, CodecConfig, LayerStack};
use pfad_core::data::synth::{generate, SynthConfig};
use pfad_core::data::Dataset;
use pfad_core::frontend::{Frontend, FrontendKind};
use pfad_core::ops;
use pfad_core::perturb::{
    apply_f_drop_with_gamma, apply_f_noise, f_drop_mask, pool_select, sample_gaussian_noise, BatchPerturbation,
    PerturbationKind, PerturbationSpec,
};
use pfad_core::scoring::auroc;
use pfad_core::tape::Tape;
use pfad_core::tensor::Tensor;
use pfad_core::tokens::{TokenSequence, TokenVector};
use pfad_core::train::{ablate, evaluate, fit, AblationOptions, FitOptions, TrainConfig, TrainingSet};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- gradients

fn random_codec(r: &mut ChaCha8Rng) -> Codec<f64> {
    let config = CodecConfig {
        c_in: r.gen_range(2..=8),
        c_tok: r.gen_range(2..=8),
        n_enc_layers: r.gen_range(1..=2),
        n_dec_layers: r.gen_range(1..=2),
        hidden: r.gen_range(2..=8),
        fusion_encoder: r.gen_bool(0.5),
        fusion_decoder: r.gen_bool(0.5),
        eps: 1e-6,
    };
    let mut codec = Codec::<f32>::init(config, r.gen()).unwrap().cast::<f64>();
    // Nonzero biases so their gradients are exercised away from init.
    for p in codec.params_mut() {
        for v in p.data_mut() {
            *v += r.gen_range(-0.1..0.1);
        }
    }
    codec
}

fn reconstruction_loss(
    codec: &Codec<f64>,
    x: &Tensor<f64>,
    perturbation: &BatchPerturbation,
    with_grads: bool,
) -> (f64, Vec<Tensor<f64>>) {
    let mut tape = Tape::new();
    let bound = codec.bind(&mut tape, with_grads);
    let xi = tape.constant(x.clone());
    let trace = bound.forward(&mut tape, xi, Some(perturbation)).unwrap();
    let loss = tape.mse(trace.output, xi).unwrap();
    let value = tape.value(loss).item().unwrap();
    if !with_grads {
        return (value, Vec::new());
    }
    let mut grads = tape.backward(loss).unwrap();
    let grads = bound.param_nodes().into_iter().map(|id| grads.take(id).unwrap()).collect();
    (value, grads)
}

/// Denominator floor of the relative error; only guards against 0/0.
const REL_FLOOR: f64 = 1e-8;

fn gradient_correctness() -> Check {
    let h = 1e-3;
    let mut r = rng(11);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for case in 0..20 {
        let mut codec = random_codec(&mut r);
        let n_tokens = r.gen_range(2..=6);
        let c_in = codec.config.c_in;
        let c_tok = codec.config.c_tok;
        let x = Tensor::new(vec![n_tokens, c_in], (0..n_tokens * c_in).map(|_| r.gen_range(-1.0..1.0)).collect())
            .unwrap();
        // A fixed corruption: F-Noise style scale plus Gaussian style offset.
        let perturbation = BatchPerturbation {
            kinds: vec![PerturbationKind::GaussianNoise],
            scale: Some(
                Tensor::new(vec![n_tokens, c_tok], (0..n_tokens * c_tok).map(|_| r.gen_range(0.7f32..1.3)).collect())
                    .unwrap(),
            ),
            offset: Some(
                Tensor::new(vec![n_tokens, c_tok], (0..n_tokens * c_tok).map(|_| r.gen_range(-0.3f32..0.3)).collect())
                    .unwrap(),
            ),
        };
        let (_, analytic) = reconstruction_loss(&codec, &x, &perturbation, true);
        let n_params = analytic.len();
        for p in 0..n_params {
            for j in 0..analytic[p].numel() {
                let orig = codec.params_mut()[p].data()[j];
                codec.params_mut()[p].data_mut()[j] = orig + h;
                let (up, _) = reconstruction_loss(&codec, &x, &perturbation, false);
                codec.params_mut()[p].data_mut()[j] = orig - h;
                let (down, _) = reconstruction_loss(&codec, &x, &perturbation, false);
                codec.params_mut()[p].data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[p].data()[j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
                if rel > worst {
                    worst = rel;
                }
                ensure(rel < 1e-3, || {
                    format!("case {case}, param {p}[{j}]: analytic {a:e} vs numeric {numeric:e} (rel {rel:e})")
                })?;
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} entries over 20 configs, max rel error {worst:.2e}"))
}

// ------------------------------------------------------------- perturbation

fn empirical_std(f: &TokenVector, samples: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    let c = f.channels();
    let mut sum = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    for _ in 0..samples {
        let d = sample_gaussian_noise(f, 1.0, r).unwrap();
        for (i, &v) in d.iter().enumerate() {
            sum[i] += v as f64;
            sq[i] += v as f64 * v as f64;
        }
    }
    let n = samples as f64;
    (0..c).map(|i| (sq[i] / n - (sum[i] / n).powi(2)).sqrt()).collect()
}

fn gaussian_statistics() -> Check {
    let mut r = rng(2);
    // 64 channels of 8 give an L2 norm of 64, so the noise std is 1.
    let f = TokenVector::new(vec![8.0; 64]).unwrap();
    ensure((f.l2_norm() - 64.0).abs() < 1e-4, || "norm setup".into())?;
    let stds = empirical_std(&f, 100_000, &mut r);
    let pooled = stds.iter().sum::<f64>() / 64.0;
    for (i, s) in stds.iter().enumerate() {
        ensure((s - 1.0).abs() <= 0.02, || format!("channel {i}: std {s:.4} outside 1 ± 2%"))?;
    }
    let doubled = TokenVector::new(vec![16.0; 64]).unwrap();
    let stds2 = empirical_std(&doubled, 100_000, &mut r);
    let pooled2 = stds2.iter().sum::<f64>() / 64.0;
    let ratio = pooled2 / pooled;
    ensure((ratio / 2.0 - 1.0).abs() <= 0.02, || format!("doubling f scaled std by {ratio:.4}"))?;
    for (i, s) in stds2.iter().enumerate() {
        ensure((s / 2.0 - 1.0).abs() <= 0.02, || format!("doubled, channel {i}: std {s:.4}"))?;
    }
    Ok(format!("std {pooled:.4}, doubled {pooled2:.4}"))
}

fn f_noise_bound() -> Check {
    let mut r = rng(3);
    let mut elements = 0usize;
    for case in 0..10_000 {
        let c = r.gen_range(1..=96);
        let scale = 10f64.powi(r.gen_range(-6..=6)) as f32;
        let f = TokenVector::new((0..c).map(|_| r.gen_range(-1.0f32..1.0) * scale).collect()).unwrap();
        let out = apply_f_noise(&f, (-0.3, 0.3), &mut r).map_err(err)?;
        for (i, (&a, &b)) in f.iter().zip(out.iter()).enumerate() {
            let (a, b) = (a as f64, b as f64);
            ensure((b - a).abs() <= 0.3 * a.abs(), || {
                format!("vector {case}, element {i}: {a:e} became {b:e}")
            })?;
        }
        elements += c;
    }
    Ok(format!("10000 vectors, {elements} elements, 0 violations"))
}

fn oracle_normalized(data: &[f32], n: usize, c: usize) -> Option<Vec<f64>> {
    let acts: Vec<f64> = (0..n).map(|t| data[t * c..(t + 1) * c].iter().map(|v| (*v as f64).abs()).sum()).collect();
    let lo = acts.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = acts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (hi > lo).then(|| acts.iter().map(|a| (a - lo) / (hi - lo)).collect())
}

fn f_drop_exactness() -> Check {
    let mut r = rng(4);
    for case in 0..1000 {
        let n = r.gen_range(2..=64);
        let c = r.gen_range(1..=32);
        let data: Vec<f32> = (0..n * c).map(|_| r.gen_range(-2.0f32..2.0)).collect();
        let seq = TokenSequence::new(Tensor::new(vec![n, c], data.clone()).unwrap(), (1, n)).unwrap();
        let gamma = r.gen_range(0.6..0.9);
        let (out, mask) = apply_f_drop_with_gamma(&seq, gamma).map_err(err)?;
        let expected = match oracle_normalized(&data, n, c) {
            Some(norm) => norm.iter().filter(|&&a| a < gamma).count(),
            None => n,
        };
        let kept = mask.iter().filter(|&&k| k).count();
        ensure(kept == expected, || format!("case {case}: {kept} kept, oracle says {expected}"))?;
        for t in 0..n {
            let row = out.token(t);
            let zeroed = row.iter().all(|&v| v == 0.0);
            ensure(mask[t] || zeroed, || format!("case {case}: dropped token {t} not zeroed"))?;
            ensure(!mask[t] || row == seq.token(t), || format!("case {case}: kept token {t} altered"))?;
        }
        let mut gammas: Vec<f64> = (0..6).map(|_| r.gen_range(0.0..1.0)).collect();
        gammas.sort_by(f64::total_cmp);
        let masks: Vec<Vec<bool>> = gammas.iter().map(|&g| f_drop_mask(&seq, g)).collect();
        for w in masks.windows(2) {
            ensure(w[0].iter().zip(&w[1]).all(|(a, b)| !a || *b), || {
                format!("case {case}: raising gamma dropped a kept token")
            })?;
        }
    }
    Ok("1000 sequences, 0 violations".into())
}

fn pool_uniformity() -> Check {
    let spec = PerturbationSpec::default();
    let mut r = pfad_core::rng::derive(5, "pool");
    let mut counts: BTreeMap<PerturbationKind, usize> = BTreeMap::new();
    for _ in 0..30_000 {
        *counts.entry(pool_select(&spec, &mut r).map_err(err)?).or_default() += 1;
    }
    let mut parts = Vec::new();
    for kind in PerturbationKind::ALL {
        let freq = counts.get(&kind).copied().unwrap_or(0) as f64 / 30_000.0;
        ensure((0.32..=0.35).contains(&freq), || format!("{kind} frequency {freq:.4}"))?;
        parts.push(format!("{kind} {freq:.4}"));
    }
    Ok(parts.join(", "))
}

// ------------------------------------------------------------------- codec

fn fusion_identities() -> Check {
    let mut r = rng(6);
    let config = CodecConfig {
        c_in: 8,
        c_tok: 8,
        n_enc_layers: 4,
        n_dec_layers: 4,
        hidden: 6,
        ..CodecConfig::default()
    };
    let mut codec = Codec::<f32>::init(config.clone(), 1).map_err(err)?;
    codec.encoder = LayerStack::identity(4, 8, 6);
    let x = Tensor::new(vec![5, 8], (0..40).map(|_| r.gen_range(-3.0f32..3.0)).collect()).unwrap();
    let seq = TokenSequence::new(x.clone(), (1, 5)).unwrap();
    let (out, _) = codec.encode(&seq).map_err(err)?;
    let expect = ops::standardize(&x, 1, config.eps as f32).map_err(err)?;
    let diff = out.tokens().max_abs_diff(&expect).unwrap();
    ensure(diff <= 1e-5, || format!("identity stack deviates from standardize by {diff:e}"))?;

    let codec = Codec::<f32>::init(config, 2).map_err(err)?;
    for (name, (_, state)) in [("encoder", codec.encode(&seq).map_err(err)?), ("decoder", codec.decode(&seq).map_err(err)?)] {
        let fused = state.fused.as_ref().ok_or("no fused tensor logged")?;
        let mut sum = state.layer_outputs[0].data().to_vec();
        for o in &state.layer_outputs[1..] {
            for (s, v) in sum.iter_mut().zip(o.data()) {
                *s += v;
            }
        }
        ensure(fused.data() == sum.as_slice(), || format!("{name}: fused differs from the sum of logged outputs"))?;
    }
    Ok(format!("identity deviation {diff:.1e}, fused sums exact"))
}

fn parameter_invariance() -> Check {
    let mut report = Vec::new();
    for (label, base) in [("desk", TrainConfig::desk()), ("full", TrainConfig::default())] {
        let mut counts = Vec::new();
        for (_, name, _, fusion, _) in pfad_core::train::ablation_plan(&base) {
            let count = Codec::<f32>::init(base.codec.clone().with_fusion(fusion), 0).map_err(err)?.param_count();
            counts.push((name, count));
        }
        for alpha in [0.5, 1.0, 2.0] {
            for weights in [[1.0, 1.0, 1.0], [1.0, 0.0, 0.0], [0.2, 0.3, 0.5]] {
                let mut cfg = base.clone();
                cfg.perturbation = Some(PerturbationSpec {
                    alpha,
                    weights,
                    ..PerturbationSpec::default()
                });
                let count = Codec::<f32>::init(cfg.codec.clone(), 1).map_err(err)?.param_count();
                counts.push((format!("alpha {alpha} weights {weights:?}"), count));
            }
        }
        let first = counts[0].1;
        for (name, c) in &counts {
            ensure(*c == first, || format!("{label}: {name} has {c} parameters, expected {first}"))?;
        }
        report.push(format!("{label} {first}"));
    }
    Ok(report.join(", "))
}

// ------------------------------------------------------------------ scoring

fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let (mut pos, mut neg) = (0usize, 0usize);
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            neg += 1;
            continue;
        }
        pos += 1;
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / (pos * neg) as f64
}

fn auroc_oracle() -> Check {
    let mut r = rng(8);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let n = r.gen_range(2..=500);
        let levels = r.gen_range(1..=n.max(2));
        let mut labels: Vec<bool> = (0..n).map(|_| r.gen_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n)
            .map(|_| if r.gen_bool(0.3) { r.gen_range(0..levels) as f64 } else { r.gen_range(-1.0..levels as f64) })
            .collect();
        let fast = auroc(&scores, &labels).map_err(err)?;
        let slow = pairwise_auroc(&scores, &labels);
        let d = (fast - slow).abs();
        worst = worst.max(d);
        ensure(d <= 1e-12, || format!("case {case} (n {n}): {fast} vs oracle {slow}"))?;
    }
    Ok(format!("100 inputs, max deviation {worst:.1e}"))
}

// --------------------------------------------------------------- end to end

fn desk_dataset(dir: &std::path::Path, seed: u64) -> Result<Dataset, String> {
    generate(
        dir,
        &SynthConfig {
            seed,
            ..SynthConfig::default()
        },
    )
    .map_err(err)
}

fn end_to_end() -> Check {
    let start = Instant::now();
    let mut images = Vec::new();
    let mut pixels = Vec::new();
    for seed in 0..3u64 {
        let dir = tempfile::tempdir().map_err(err)?;
        let dataset = desk_dataset(dir.path(), 100 + seed)?;
        let frontend = FrontendKind::desk(seed);
        let set = TrainingSet::extract(&Frontend::new(frontend.clone()).map_err(err)?, &dataset).map_err(err)?;
        let config = TrainConfig {
            seed,
            ..TrainConfig::desk()
        };
        let outcome = fit(&set, &frontend, &config, FitOptions::default()).map_err(err)?;
        let report = evaluate(&outcome.checkpoint, &dataset).map_err(err)?;
        let pixel = report.pixel_auroc.ok_or("no pixel AUROC")?;
        println!("  seed {seed}: image {:.4} pixel {:.4} ({:.0?})", report.image_auroc, pixel, start.elapsed());
        images.push(report.image_auroc);
        pixels.push(pixel);
    }
    let elapsed = start.elapsed();
    let image = images.iter().sum::<f64>() / 3.0;
    let pixel = pixels.iter().sum::<f64>() / 3.0;
    let summary = format!("image {image:.4}, pixel {pixel:.4}, {:.0}s", elapsed.as_secs_f64());
    ensure(image >= 0.90 && pixel >= 0.90, || format!("below 0.90: {summary}"))?;
    ensure(elapsed < Duration::from_secs(600), || format!("too slow: {summary}"))?;
    Ok(summary)
}

/// Epoch budget per ablation run; 30 runs at the full 50 epochs would take
/// most of an hour on one core.
const ABLATION_EPOCHS: usize = 10;

fn ablation_direction() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let dataset = desk_dataset(dir.path(), 200)?;
    let frontend = FrontendKind::desk(0);
    let set = TrainingSet::extract(&Frontend::new(frontend.clone()).map_err(err)?, &dataset).map_err(err)?;
    let base = TrainConfig {
        epochs: ABLATION_EPOCHS,
        ..TrainConfig::desk()
    };
    let report = ablate(
        &set,
        &dataset,
        &frontend,
        &base,
        &AblationOptions {
            seeds: (0..5).collect(),
        },
    )
    .map_err(err)?;
    print!("{report}");
    ensure(report.rows.len() == 7, || format!("{} rows, expected 4 + 3", report.rows.len()))?;
    let full = report.row("pool+fusion").ok_or("missing pool+fusion row")?.mean_image_auroc();
    let baseline = report.row("gaussian+nofusion").ok_or("missing baseline row")?.mean_image_auroc();
    let summary = format!("pool+fusion {full:.4} vs baseline {baseline:.4}");
    ensure(full >= baseline - 0.005, || summary.clone())?;
    Ok(summary)
}

struct Run {
    checkpoint: Vec<u8>,
    log: Vec<u8>,
    report: String,
}

fn small_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        n_train: 24,
        n_test_normal: 6,
        n_test_defect: 6,
        seed,
        ..SynthConfig::default()
    }
}

fn determinism_run(config: &TrainConfig) -> Result<Run, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let dataset = generate(dir.path(), &small_synth(9)).map_err(err)?;
    let frontend = FrontendKind::desk(3);
    let set = TrainingSet::extract(&Frontend::new(frontend.clone()).map_err(err)?, &dataset).map_err(err)?;
    let mut log = Vec::new();
    let outcome = fit(
        &set,
        &frontend,
        config,
        FitOptions {
            log: Some(&mut log),
            ..FitOptions::default()
        },
    )
    .map_err(err)?;
    let report = evaluate(&outcome.checkpoint, &dataset).map_err(err)?;
    Ok(Run {
        checkpoint: outcome.checkpoint.to_bytes().map_err(err)?,
        log,
        report: report.to_record(),
    })
}

fn determinism() -> Check {
    let config = TrainConfig {
        epochs: 4,
        seed: 21,
        ..TrainConfig::desk()
    };
    let a = determinism_run(&config)?;
    let b = determinism_run(&config)?;
    ensure(a.checkpoint == b.checkpoint, || "checkpoints differ".into())?;
    ensure(a.log == b.log, || "training logs differ".into())?;
    ensure(a.report == b.report, || "eval reports differ".into())?;

    let dir = tempfile::tempdir().map_err(err)?;
    let dataset = generate(dir.path(), &small_synth(9)).map_err(err)?;
    let frontend = FrontendKind::desk(3);
    let set = TrainingSet::extract(&Frontend::new(frontend.clone()).map_err(err)?, &dataset).map_err(err)?;
    let half = fit(
        &set,
        &frontend,
        &config,
        FitOptions {
            stop_after: Some(2),
            ..FitOptions::default()
        },
    )
    .map_err(err)?;
    let path = dir.path().join("half.ckpt");
    half.checkpoint.save(&path).map_err(err)?;
    let resumed = fit(
        &set,
        &frontend,
        &config,
        FitOptions {
            resume: Some(Checkpoint::load(&path).map_err(err)?),
            ..FitOptions::default()
        },
    )
    .map_err(err)?;
    ensure(resumed.checkpoint.to_bytes().map_err(err)? == a.checkpoint, || {
        "resumed run differs from the uninterrupted run".into()
    })?;
    Ok(format!("{} checkpoint bytes, {} log bytes identical; resume exact", a.checkpoint.len(), a.log.len()))
}

fn main() {
    pfad_core::alloc::retain_freed_memory();
    let criteria: [Criterion; 11] = [
        ("gradient_correctness", gradient_correctness),
        ("gaussian_noise_statistics", gaussian_statistics),
        ("f_noise_bound", f_noise_bound),
        ("f_drop_exactness", f_drop_exactness),
        ("pool_uniformity", pool_uniformity),
        ("fusion_identities", fusion_identities),
        ("parameter_invariance", parameter_invariance),
        ("auroc_oracle", auroc_oracle),
        ("end_to_end_desk_run", end_to_end),
        ("ablation_direction", ablation_direction),
        ("determinism", determinism),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
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
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
