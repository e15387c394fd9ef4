use pfad_core::checkpoint::Checkpoint;
use pfad_core::codec::{Codec, CodecConfig, LayerStack};
use pfad_core::data::synth::{generate, SynthConfig};
use pfad_core::frontend::{Frontend, FrontendKind};
use pfad_core::ops;
use pfad_core::rng;
use pfad_core::tensor::Tensor;
use pfad_core::train::{
    ablate, evaluate, fit, train_step, AblationOptions, AdamState, FitOptions, StepContext, TrainBatch, TrainConfig,
    TrainingSet,
};

fn small_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        size: 32,
        n_train: 12,
        n_test_normal: 4,
        n_test_defect: 4,
        seed,
        ..SynthConfig::default()
    }
}

#[test]
fn smoke_run_emits_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = generate(dir.path(), &small_synth(1)).unwrap();
    let frontend = FrontendKind::desk(0);
    let set = TrainingSet::extract(&Frontend::new(frontend.clone()).unwrap(), &dataset).unwrap();
    let config = TrainConfig {
        smoke: true,
        batch: 4,
        ..TrainConfig::desk()
    };
    let out = fit(&set, &frontend, &config, FitOptions::default()).unwrap();
    assert_eq!(out.checkpoint.epoch, 2);
    assert_eq!(out.checkpoint.step, 4);
    let path = dir.path().join("smoke.pfck");
    out.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, out.checkpoint);
    let report = evaluate(&back, &dataset).unwrap();
    assert_eq!(report.n_images, 24);
}

#[test]
fn epoch_loss_decreases_on_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = generate(dir.path(), &small_synth(2)).unwrap();
    let frontend = FrontendKind::desk(0);
    let set = TrainingSet::extract(&Frontend::new(frontend.clone()).unwrap(), &dataset).unwrap();
    let config = TrainConfig {
        epochs: 8,
        batch: 6,
        ..TrainConfig::desk()
    };
    let losses = fit(&set, &frontend, &config, FitOptions::default()).unwrap().epoch_losses;
    assert_eq!(losses.len(), 8);
    assert!(losses.iter().all(|l| l.is_finite()));
    assert!(losses[7] < losses[0], "{losses:?}");
}

#[test]
fn unperturbed_identity_loss_matches_hand_composition() {
    let layers = 3;
    let config = TrainConfig {
        perturbation: None,
        codec: CodecConfig {
            c_in: 6,
            c_tok: 4,
            n_enc_layers: layers,
            n_dec_layers: layers,
            hidden: 5,
            ..CodecConfig::default()
        },
        ..TrainConfig::desk()
    };
    let mut codec = Codec::<f32>::init(config.codec.clone(), 3).unwrap();
    codec.encoder = LayerStack::identity(layers, 4, 5);
    codec.decoder = LayerStack::identity(layers, 4, 5);

    let mut r = rng::derive(4, "inputs");
    use rand::Rng as _;
    let rows = 2 * 9;
    let x = Tensor::new(vec![rows, 6], (0..rows * 6).map(|_| r.gen_range(-1.0f32..1.0)).collect()).unwrap();

    // project_in, then per stack: sum of the input and `layers` identical
    // outputs, standardized per token; then project_out.
    let linear = |x: &Tensor<f32>, l: &pfad_core::codec::Linear<f32>| {
        let y = ops::matmul(x, &l.weight).unwrap();
        ops::elementwise(ops::BinaryOp::Add, &y, &l.bias).unwrap()
    };
    let k = (layers + 1) as f32;
    let mut t = linear(&x, &codec.proj_in);
    for _ in 0..2 {
        t = ops::standardize(&t.map(|v| k * v), 1, config.codec.eps as f32).unwrap();
    }
    let out = linear(&t, &codec.proj_out);
    let expected = ops::mse(&out, &x).unwrap() as f64;

    let batch = TrainBatch {
        ids: vec!["a", "b"],
        labels: vec![false, false],
        features: x,
        per_sample: 9,
    };
    let mut optimizer = AdamState::new(&codec);
    let step = train_step(
        &mut codec,
        &mut optimizer,
        &batch,
        &config,
        &mut rng::derive(0, "unused"),
        1e-3,
        StepContext::default(),
    )
    .unwrap();
    let rel = (step.loss as f64 - expected).abs() / expected;
    assert!(rel < 1e-5, "tape {} vs hand {expected}", step.loss);
    assert_eq!(step.kind, "none");
}

#[test]
fn ablation_is_reproducible_with_matched_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = generate(dir.path(), &small_synth(5)).unwrap();
    let frontend = FrontendKind::desk(0);
    let set = TrainingSet::extract(&Frontend::new(frontend.clone()).unwrap(), &dataset).unwrap();
    let base = TrainConfig {
        epochs: 1,
        batch: 6,
        ..TrainConfig::desk()
    };
    let options = AblationOptions { seeds: vec![0, 1] };
    let a = ablate(&set, &dataset, &frontend, &base, &options).unwrap();
    let b = ablate(&set, &dataset, &frontend, &base, &options).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 7);
    assert_eq!(a.to_tsv().lines().count(), 8);
    let baseline = a.row("gaussian+nofusion").unwrap();
    assert_eq!(baseline.image_auroc, a.row("only-gaussian_noise").unwrap().image_auroc);
    assert!(a.rows.iter().all(|r| r.param_count == baseline.param_count));
}
