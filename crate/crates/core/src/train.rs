//! Denoising-reconstruction training, scoring with a trained codec, and the
//! ablation grid.

use std::io::Write;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::codec::{Codec, CodecConfig};
use crate::data::{Dataset, Record, Split};
use crate::error::{Error, Result};
use crate::frontend::{FeatureMap, Frontend, FrontendKind};
use crate::perturb::{draw_batch, PerturbationKind, PerturbationSpec, Pins};
use crate::rng::{self, Rng};
use crate::scoring::{self, anomaly_map, image_score, AnomalyScorer, EvalReport, SampleScore, ScoreMap};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            grad_clip: Some(1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    /// Fraction of epochs trained at `lr_initial`.
    pub lr_drop_fraction: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// `None` trains on clean tokens.
    pub perturbation: Option<PerturbationSpec>,
    pub codec: CodecConfig,
    /// Two epochs on eight samples.
    pub smoke: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch: 64,
            lr_initial: 1e-4,
            lr_final: 1e-5,
            lr_drop_fraction: 0.8,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            perturbation: Some(PerturbationSpec::default()),
            codec: CodecConfig::default(),
            smoke: false,
        }
    }
}

impl TrainConfig {
    /// Settings for 64×64 synthetic data on a single CPU core.
    pub fn desk() -> Self {
        Self {
            epochs: 50,
            batch: 16,
            lr_initial: 2e-3,
            lr_final: 2e-4,
            codec: CodecConfig {
                c_in: 64,
                c_tok: 16,
                hidden: 16,
                ..CodecConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("train config: {m}")));
        if self.epochs == 0 || self.batch == 0 {
            return bad("epochs and batch must be >= 1".into());
        }
        if !(self.lr_final > 0.0 && self.lr_final <= self.lr_initial && self.lr_initial.is_finite()) {
            return bad(format!("need 0 < lr_final <= lr_initial, got {} and {}", self.lr_final, self.lr_initial));
        }
        if !(self.lr_drop_fraction > 0.0 && self.lr_drop_fraction <= 1.0) {
            return bad(format!("lr_drop_fraction {} outside (0, 1]", self.lr_drop_fraction));
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0 && o.weight_decay >= 0.0) {
            return bad("optimizer needs betas in [0, 1), eps > 0, weight_decay >= 0".into());
        }
        if o.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be > 0".into());
        }
        if let Some(p) = &self.perturbation {
            p.validate()?;
        }
        self.codec.validate()
    }

    fn effective_epochs(&self) -> usize {
        if self.smoke {
            2
        } else {
            self.epochs
        }
    }
}

/// Step schedule: `lr_initial` while `epoch < lr_drop_fraction · epochs`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    if (epoch as f64) < config.lr_drop_fraction * config.epochs as f64 {
        config.lr_initial
    } else {
        config.lr_final
    }
}

/// First and second moment estimates, aligned with [`Codec::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(codec: &Codec<f32>) -> Self {
        let zeros: Vec<Tensor<f32>> = codec.params().iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One decoupled-weight-decay Adam update.
    pub fn update(&mut self, codec: &mut Codec<f32>, grads: &mut [Tensor<f32>], lr: f64, cfg: &OptimizerConfig) {
        if let Some(clip) = cfg.grad_clip {
            let norm = grads
                .iter()
                .flat_map(|g| g.data())
                .map(|&g| g as f64 * g as f64)
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let s = (clip / norm) as f32;
                for g in grads.iter_mut() {
                    g.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        self.t += 1;
        let bc1 = (1.0 - cfg.beta1.powi(self.t as i32)) as f32;
        let bc2 = (1.0 - cfg.beta2.powi(self.t as i32)) as f32;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let (lr, eps) = (lr as f32, cfg.eps as f32);
        let decay = 1.0 - lr * cfg.weight_decay as f32;
        for (((p, g), m), v) in codec.params_mut().into_iter().zip(grads.iter()).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let step = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *p = *p * decay - lr * step;
            }
        }
    }
}

/// Training features for one batch: `per_sample` consecutive token rows per
/// sample.
pub struct TrainBatch<'a> {
    pub ids: Vec<&'a str>,
    pub labels: Vec<bool>,
    pub features: Tensor<f32>,
    pub per_sample: usize,
}

/// Where a step sits in the run, for logging and diagnostics.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepContext {
    pub epoch: usize,
    pub step: usize,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    /// Loss before the update.
    pub loss: f32,
    pub kind: String,
}

/// One optimizer step on the reconstruction loss of `batch`.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    codec: &mut Codec<f32>,
    optimizer: &mut AdamState,
    batch: &TrainBatch<'_>,
    config: &TrainConfig,
    rng: &mut Rng,
    lr: f64,
    ctx: StepContext,
) -> Result<StepOutcome> {
    if batch.labels.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    if let Some(i) = batch.labels.iter().position(|&l| l) {
        return Err(Error::Dataset(format!(
            "training batch contains defective sample {}",
            batch.ids[i]
        )));
    }
    let mut kind = "none".to_string();
    let diverged = |kind: &str| Error::Diverged {
        epoch: ctx.epoch,
        step: ctx.step,
        kind: kind.to_string(),
        ids: batch.ids.iter().map(|s| s.to_string()).collect(),
    };
    let result = (|| -> Result<(f32, Vec<Tensor<f32>>)> {
        let mut tape = Tape::new();
        let bound = codec.bind(&mut tape, true);
        let x = tape.constant(batch.features.clone());
        let tokens = bound.project(&mut tape, x)?;
        let perturbation = match &config.perturbation {
            Some(spec) => Some(draw_batch(tape.value(tokens), batch.per_sample, spec, rng, Pins::default())?),
            None => None,
        };
        if let Some(p) = &perturbation {
            kind = p.label();
        }
        let trace = bound.reconstruct(&mut tape, tokens, perturbation.as_ref())?;
        let loss = tape.mse(trace.output, x)?;
        let value = tape.value(loss).item().expect("scalar loss");
        let mut grads = tape.backward(loss)?;
        let grads = bound
            .param_nodes()
            .into_iter()
            .map(|id| grads.take(id).expect("parameter gradient"))
            .collect();
        Ok((value, grads))
    })();
    let (loss, mut grads) = match result {
        Ok((loss, _)) if !loss.is_finite() => return Err(diverged(&kind)),
        Ok(v) => v,
        Err(Error::NonFinite(_)) => return Err(diverged(&kind)),
        Err(e) => return Err(e),
    };
    optimizer.update(codec, &mut grads, lr, &config.optimizer);
    Ok(StepOutcome { loss, kind })
}

/// Features of one record: extracted from pixels or loaded from disk.
pub fn record_features(frontend: &Frontend, dataset: &Dataset, record: &Record) -> Result<FeatureMap> {
    match frontend.kind() {
        FrontendKind::RandomProjection { .. } => frontend.extract(&dataset.load_image(record)?),
        FrontendKind::Precomputed { .. } => frontend.load(record.split.as_str(), &record.category, &record.id),
    }
}

/// Cached training features, in manifest order.
pub struct TrainingSet {
    pub ids: Vec<String>,
    pub labels: Vec<bool>,
    pub features: Vec<FeatureMap>,
}

impl TrainingSet {
    pub fn extract(frontend: &Frontend, dataset: &Dataset) -> Result<Self> {
        let records = dataset.split(Split::Train);
        if records.is_empty() {
            return Err(Error::Dataset("no training records".into()));
        }
        let mut set = TrainingSet {
            ids: Vec::new(),
            labels: Vec::new(),
            features: Vec::new(),
        };
        for r in records {
            set.ids.push(r.id.clone());
            set.labels.push(r.label);
            set.features.push(record_features(frontend, dataset, r)?);
        }
        let dims = set.features[0].dims();
        if let Some(i) = set.features.iter().position(|f| f.dims() != dims) {
            return Err(Error::Dataset(format!(
                "feature map of {} has dims {:?}, expected {dims:?}",
                set.ids[i],
                set.features[i].dims()
            )));
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn batch(&self, indices: &[usize]) -> Result<TrainBatch<'_>> {
        let (h, w, c) = self.features[indices[0]].dims();
        let mut data = Vec::with_capacity(indices.len() * h * w * c);
        for &i in indices {
            data.extend_from_slice(self.features[i].data().data());
        }
        Ok(TrainBatch {
            ids: indices.iter().map(|&i| self.ids[i].as_str()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            features: Tensor::new(vec![indices.len() * h * w, c], data)?,
            per_sample: h * w,
        })
    }
}

#[derive(Default)]
pub struct FitOptions<'a> {
    /// Continue from this checkpoint instead of a fresh initialization.
    pub resume: Option<Checkpoint>,
    /// Stop once this many epochs are complete.
    pub stop_after: Option<usize>,
    /// Receives one `epoch step loss lr kind` line per step.
    pub log: Option<&'a mut dyn Write>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean loss of each epoch run in this call.
    pub epoch_losses: Vec<f64>,
}

fn shuffle_rng(seed: u64, epoch: usize) -> Rng {
    rng::derive(seed, &format!("shuffle-epoch-{epoch}"))
}

fn perturb_rng(config: &TrainConfig, epoch: usize) -> Rng {
    let spec_seed = config.perturbation.as_ref().map_or(0, |p| p.seed);
    rng::derive(spec_seed, &format!("perturb-{}-epoch-{epoch}", config.seed))
}

pub fn fit(
    set: &TrainingSet,
    frontend: &FrontendKind,
    config: &TrainConfig,
    mut options: FitOptions<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if set.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    let c = set.features[0].dims().2;
    if c != config.codec.c_in {
        return Err(Error::ShapeMismatch {
            op: "fit",
            lhs: vec![config.codec.c_in],
            rhs: vec![c],
        });
    }
    let mut ck = match options.resume.take() {
        Some(ck) => {
            if &ck.config != config {
                return Err(Error::InvalidArgument("resume checkpoint was trained with a different config".into()));
            }
            ck
        }
        None => {
            let codec = Codec::init(config.codec.clone(), rng::derive_seed(config.seed, "init"))?;
            Checkpoint {
                optimizer: AdamState::new(&codec),
                codec,
                config: config.clone(),
                frontend: frontend.clone(),
                epoch: 0,
                step: 0,
                running_loss: f64::NAN,
            }
        }
    };
    let n = if config.smoke { set.len().min(8) } else { set.len() };
    let epochs = config.effective_epochs();
    let last = options.stop_after.map_or(epochs, |s| s.min(epochs));
    let mut epoch_losses = Vec::new();
    while ck.epoch < last {
        let epoch = ck.epoch;
        let lr = lr_at(epoch, config);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle_rng(config.seed, epoch));
        let mut prng = perturb_rng(config, epoch);
        let mut total = 0.0f64;
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch) {
            let batch = set.batch(chunk)?;
            let ctx = StepContext { epoch, step: ck.step };
            let out = train_step(&mut ck.codec, &mut ck.optimizer, &batch, config, &mut prng, lr, ctx)?;
            if let Some(log) = options.log.as_deref_mut() {
                writeln!(log, "{epoch}\t{}\t{}\t{lr}\t{}", ck.step, out.loss, out.kind)
                    .map_err(|e| Error::io("training log", e))?;
            }
            total += out.loss as f64;
            steps += 1;
            ck.step += 1;
        }
        ck.running_loss = total / steps as f64;
        ck.epoch += 1;
        epoch_losses.push(ck.running_loss);
        debug!("epoch {epoch} loss {:.6} lr {lr}", ck.running_loss);
    }
    info!("trained {} epochs, final loss {:.6}", ck.epoch, ck.running_loss);
    Ok(TrainOutcome {
        checkpoint: ck,
        epoch_losses,
    })
}

/// Scores test images with a trained codec.
pub struct Detector {
    pub codec: Codec<f32>,
    pub frontend: Frontend,
    pub kernel: usize,
}

impl Detector {
    pub fn new(codec: Codec<f32>, frontend: FrontendKind) -> Result<Self> {
        Ok(Self {
            codec,
            frontend: Frontend::new(frontend)?,
            kernel: scoring::IMAGE_SCORE_KERNEL,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Self::new(ck.codec.clone(), ck.frontend.clone())
    }

    /// Feature-grid anomaly map of a feature map.
    pub fn feature_map_scores(&self, features: &FeatureMap) -> Result<ScoreMap> {
        let rec = self.codec.forward(features)?;
        anomaly_map(features, &rec)
    }

    /// Image-resolution anomaly map and image score.
    pub fn score_features(&self, features: &FeatureMap, image_dims: (usize, usize)) -> Result<(ScoreMap, f32)> {
        let up = self.feature_map_scores(features)?.upsample(image_dims)?;
        let score = image_score(&up, self.kernel)?;
        Ok((up, score))
    }
}

impl AnomalyScorer for Detector {
    fn score(&self, dataset: &Dataset, record: &Record) -> Result<SampleScore> {
        let image = dataset.load_image(record)?;
        let features = match self.frontend.kind() {
            FrontendKind::RandomProjection { .. } => self.frontend.extract(&image)?,
            FrontendKind::Precomputed { .. } => {
                self.frontend.load(record.split.as_str(), &record.category, &record.id)?
            }
        };
        let (map, score) = self.score_features(&features, (image.height(), image.width()))?;
        Ok(SampleScore {
            image_score: score as f64,
            pixel_map: Some(map),
        })
    }
}

pub fn evaluate(ck: &Checkpoint, dataset: &Dataset) -> Result<EvalReport> {
    let detector = Detector::from_checkpoint(ck)?;
    scoring::eval_dataset(&detector, dataset, &dataset.split(Split::Test))
}

/// One row of the ablation report.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    /// `grid` for the pool × fusion cells, `kind` for single-mechanism runs.
    pub group: &'static str,
    pub name: String,
    pub pool: bool,
    pub fusion: bool,
    pub perturbation: PerturbationSpec,
    pub param_count: usize,
    pub seeds: Vec<u64>,
    pub image_auroc: Vec<f64>,
    pub pixel_auroc: Vec<Option<f64>>,
}

impl AblationRow {
    pub fn mean_image_auroc(&self) -> f64 {
        self.image_auroc.iter().sum::<f64>() / self.image_auroc.len() as f64
    }

    pub fn mean_pixel_auroc(&self) -> Option<f64> {
        let vals: Option<Vec<f64>> = self.pixel_auroc.iter().copied().collect();
        vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Tab-separated table with a header line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("group\tname\tpool\tfusion\tparam_count\tseeds\timage_auroc\tpixel_auroc\n");
        for r in &self.rows {
            let pixel = r.mean_pixel_auroc().map_or("na".to_string(), |v| v.to_string());
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.group,
                r.name,
                r.pool,
                r.fusion,
                r.param_count,
                r.seeds.len(),
                r.mean_image_auroc(),
                pixel
            ));
        }
        out
    }
}

impl std::fmt::Display for AblationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<22} {:>6} {:>7} {:>10} {:>7} {:>7}", "row", "pool", "fusion", "params", "image", "pixel")?;
        for r in &self.rows {
            let pixel = r.mean_pixel_auroc().map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
            writeln!(
                f,
                "{:<22} {:>6} {:>7} {:>10} {:>7.2} {:>7}",
                r.name,
                r.pool,
                r.fusion,
                r.param_count,
                100.0 * r.mean_image_auroc(),
                pixel
            )?;
        }
        Ok(())
    }
}

/// The pool × fusion grid plus one single-mechanism row per perturbation
/// kind (fusion off). Cells with identical configurations are trained once.
pub fn ablation_plan(base: &TrainConfig) -> Vec<(&'static str, String, bool, bool, PerturbationSpec)> {
    let pool = base.perturbation.clone().unwrap_or_default();
    let only = |kind| PerturbationSpec {
        weights: PerturbationSpec::only(kind).weights,
        ..pool.clone()
    };
    let gaussian = only(PerturbationKind::GaussianNoise);
    let mut plan = Vec::new();
    for (p, spec) in [(false, &gaussian), (true, &pool)] {
        for fusion in [false, true] {
            let name = format!(
                "{}+{}",
                if p { "pool" } else { "gaussian" },
                if fusion { "fusion" } else { "nofusion" }
            );
            plan.push(("grid", name, p, fusion, spec.clone()));
        }
    }
    for kind in PerturbationKind::ALL {
        plan.push(("kind", format!("only-{kind}"), false, false, only(kind)));
    }
    plan
}

pub struct AblationOptions {
    pub seeds: Vec<u64>,
}

pub fn ablate(
    set: &TrainingSet,
    dataset: &Dataset,
    frontend: &FrontendKind,
    base: &TrainConfig,
    options: &AblationOptions,
) -> Result<AblationReport> {
    if options.seeds.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one seed".into()));
    }
    let mut done: Vec<(TrainConfig, f64, Option<f64>)> = Vec::new();
    let mut rows = Vec::new();
    for (group, name, pool, fusion, spec) in ablation_plan(base) {
        let mut row = AblationRow {
            group,
            name,
            pool,
            fusion,
            perturbation: spec.clone(),
            param_count: 0,
            seeds: options.seeds.clone(),
            image_auroc: Vec::new(),
            pixel_auroc: Vec::new(),
        };
        for &seed in &options.seeds {
            let config = TrainConfig {
                seed,
                perturbation: Some(spec.clone()),
                codec: base.codec.clone().with_fusion(fusion),
                ..base.clone()
            };
            let (image, pixel) = match done.iter().find(|(c, _, _)| c == &config) {
                Some((_, i, p)) => (*i, *p),
                None => {
                    let outcome = fit(set, frontend, &config, FitOptions::default())?;
                    row.param_count = outcome.checkpoint.codec.param_count();
                    let report = evaluate(&outcome.checkpoint, dataset)?;
                    info!("ablation {} seed {seed}: image {:.4}", row.name, report.image_auroc);
                    done.push((config, report.image_auroc, report.pixel_auroc));
                    (report.image_auroc, report.pixel_auroc)
                }
            };
            row.image_auroc.push(image);
            row.pixel_auroc.push(pixel);
        }
        if row.param_count == 0 {
            row.param_count = Codec::<f32>::init(base.codec.clone().with_fusion(fusion), 0)?.param_count();
        }
        rows.push(row);
    }
    Ok(AblationReport { rows })
}
