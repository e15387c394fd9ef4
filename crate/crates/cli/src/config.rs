//! Flat `key = value` run configuration.
//!
//! Every key has a default; a file or `--set` overrides individual keys and
//! any key outside the schema is an error. [`RunConfig::to_text`] writes every
//! key, so a resolved config file reproduces the run on its own.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

use pfad_core::data::synth::{DefectKind, Pattern, SynthConfig};
use pfad_core::frontend::FrontendKind;
use pfad_core::perturb::PerturbationSpec;
use pfad_core::train::TrainConfig;

pub const RUN_CONFIG_FILE: &str = "run_config.txt";

#[derive(Clone, Debug, PartialEq)]
pub enum FrontendChoice {
    RandomProjection,
    Precomputed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Dataset seed for `gen-data`, training seed elsewhere.
    pub seed: u64,
    pub out: PathBuf,
    pub data: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub synth: SynthConfig,
    pub frontend: FrontendChoice,
    pub frontend_seed: u64,
    pub frontend_scales: usize,
    pub frontend_c_feat: usize,
    pub frontend_bias: bool,
    pub frontend_dir: PathBuf,
    pub train: TrainConfig,
    pub perturbation_enabled: bool,
    pub perturbation: PerturbationSpec,
    pub ablate_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::desk();
        let FrontendKind::RandomProjection {
            seed,
            scales,
            c_feat,
            bias,
        } = FrontendKind::desk(0)
        else {
            unreachable!("desk frontend is a random projection")
        };
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            data: PathBuf::from("data"),
            checkpoint: None,
            synth: SynthConfig::default(),
            frontend: FrontendChoice::RandomProjection,
            frontend_seed: seed,
            frontend_scales: scales,
            frontend_c_feat: c_feat,
            frontend_bias: bias,
            frontend_dir: PathBuf::from("features"),
            perturbation_enabled: train.perturbation.is_some(),
            perturbation: train.perturbation.clone().unwrap_or_default(),
            train,
            ablate_seeds: 5,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("{key}: cannot parse {value:?}: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => bail!("{key}: expected true or false, got {value:?}"),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_pair(key: &str, value: &str) -> Result<(f64, f64)> {
    match parse_list::<f64>(key, value)?.as_slice() {
        [lo, hi] => Ok((*lo, *hi)),
        _ => bail!("{key}: expected two comma-separated numbers, got {value:?}"),
    }
}

fn join<T: Display>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn defect_name(kind: DefectKind) -> &'static str {
    match kind {
        DefectKind::Scratch => "scratch",
        DefectKind::Blob => "blob",
        DefectKind::MissingRegion => "missing_region",
    }
}

fn parse_defect(key: &str, value: &str) -> Result<DefectKind> {
    DefectKind::ALL
        .into_iter()
        .find(|k| defect_name(*k) == value)
        .ok_or_else(|| anyhow!("{key}: unknown defect kind {value:?}"))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        let o = &mut t.optimizer;
        let c = &mut t.codec;
        let p = &mut self.perturbation;
        let s = &mut self.synth;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "dataset.root" => self.data = PathBuf::from(v),
            "model.checkpoint" => self.checkpoint = (v != "none").then(|| PathBuf::from(v)),
            "synth.categories" => s.categories = parse_list::<Pattern>(key, v)?,
            "synth.size" => s.size = parse(key, v)?,
            "synth.n_train" => s.n_train = parse(key, v)?,
            "synth.n_test_normal" => s.n_test_normal = parse(key, v)?,
            "synth.n_test_defect" => s.n_test_defect = parse(key, v)?,
            "synth.defect_kinds" => {
                s.defects.kinds = v.split(',').map(|d| parse_defect(key, d.trim())).collect::<Result<_>>()?
            }
            "synth.defect_size" => s.defects.size_range = parse_pair(key, v)?,
            "synth.defect_intensity" => s.defects.intensity_range = parse_pair(key, v)?,
            "frontend.kind" => {
                self.frontend = match v {
                    "random_projection" => FrontendChoice::RandomProjection,
                    "precomputed" => FrontendChoice::Precomputed,
                    _ => bail!("{key}: expected random_projection or precomputed, got {v:?}"),
                }
            }
            "frontend.seed" => self.frontend_seed = parse(key, v)?,
            "frontend.scales" => self.frontend_scales = parse(key, v)?,
            "frontend.c_feat" => self.frontend_c_feat = parse(key, v)?,
            "frontend.bias" => self.frontend_bias = parse_bool(key, v)?,
            "frontend.dir" => self.frontend_dir = PathBuf::from(v),
            "codec.c_in" => c.c_in = parse(key, v)?,
            "codec.c_tok" => c.c_tok = parse(key, v)?,
            "codec.n_enc_layers" => c.n_enc_layers = parse(key, v)?,
            "codec.n_dec_layers" => c.n_dec_layers = parse(key, v)?,
            "codec.hidden" => c.hidden = parse(key, v)?,
            "codec.fusion_encoder" => c.fusion_encoder = parse_bool(key, v)?,
            "codec.fusion_decoder" => c.fusion_decoder = parse_bool(key, v)?,
            "codec.eps" => c.eps = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch" => t.batch = parse(key, v)?,
            "train.lr_initial" => t.lr_initial = parse(key, v)?,
            "train.lr_final" => t.lr_final = parse(key, v)?,
            "train.lr_drop_fraction" => t.lr_drop_fraction = parse(key, v)?,
            "train.smoke" => t.smoke = parse_bool(key, v)?,
            "optimizer.beta1" => o.beta1 = parse(key, v)?,
            "optimizer.beta2" => o.beta2 = parse(key, v)?,
            "optimizer.eps" => o.eps = parse(key, v)?,
            "optimizer.weight_decay" => o.weight_decay = parse(key, v)?,
            "optimizer.grad_clip" => o.grad_clip = if v == "none" { None } else { Some(parse(key, v)?) },
            "perturbation.enabled" => self.perturbation_enabled = parse_bool(key, v)?,
            "perturbation.alpha" => p.alpha = parse(key, v)?,
            "perturbation.apply_prob" => p.apply_prob = parse(key, v)?,
            "perturbation.fnoise_range" => p.fnoise_range = parse_pair(key, v)?,
            "perturbation.fdrop_range" => p.fdrop_range = parse_pair(key, v)?,
            "perturbation.weights" => {
                p.weights = parse_list::<f64>(key, v)?
                    .try_into()
                    .map_err(|_| anyhow!("{key}: expected three weights"))?
            }
            "perturbation.seed" => p.seed = parse(key, v)?,
            "perturbation.per_sample_selection" => p.per_sample_selection = parse_bool(key, v)?,
            "perturbation.gate_all_kinds" => p.gate_all_kinds = parse_bool(key, v)?,
            "ablate.seeds" => self.ablate_seeds = parse(key, v)?,
            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let o = &t.optimizer;
        let c = &t.codec;
        let p = &self.perturbation;
        let s = &self.synth;
        let pair = |(a, b): (f64, f64)| format!("{a},{b}");
        vec![
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("dataset.root", self.data.display().to_string()),
            (
                "model.checkpoint",
                self.checkpoint.as_ref().map_or("none".into(), |p| p.display().to_string()),
            ),
            ("synth.categories", join(s.categories.iter().map(|p| p.name()))),
            ("synth.size", s.size.to_string()),
            ("synth.n_train", s.n_train.to_string()),
            ("synth.n_test_normal", s.n_test_normal.to_string()),
            ("synth.n_test_defect", s.n_test_defect.to_string()),
            ("synth.defect_kinds", join(s.defects.kinds.iter().map(|k| defect_name(*k)))),
            ("synth.defect_size", pair(s.defects.size_range)),
            ("synth.defect_intensity", pair(s.defects.intensity_range)),
            (
                "frontend.kind",
                match self.frontend {
                    FrontendChoice::RandomProjection => "random_projection".into(),
                    FrontendChoice::Precomputed => "precomputed".into(),
                },
            ),
            ("frontend.seed", self.frontend_seed.to_string()),
            ("frontend.scales", self.frontend_scales.to_string()),
            ("frontend.c_feat", self.frontend_c_feat.to_string()),
            ("frontend.bias", self.frontend_bias.to_string()),
            ("frontend.dir", self.frontend_dir.display().to_string()),
            ("codec.c_in", c.c_in.to_string()),
            ("codec.c_tok", c.c_tok.to_string()),
            ("codec.n_enc_layers", c.n_enc_layers.to_string()),
            ("codec.n_dec_layers", c.n_dec_layers.to_string()),
            ("codec.hidden", c.hidden.to_string()),
            ("codec.fusion_encoder", c.fusion_encoder.to_string()),
            ("codec.fusion_decoder", c.fusion_decoder.to_string()),
            ("codec.eps", c.eps.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch", t.batch.to_string()),
            ("train.lr_initial", t.lr_initial.to_string()),
            ("train.lr_final", t.lr_final.to_string()),
            ("train.lr_drop_fraction", t.lr_drop_fraction.to_string()),
            ("train.smoke", t.smoke.to_string()),
            ("optimizer.beta1", o.beta1.to_string()),
            ("optimizer.beta2", o.beta2.to_string()),
            ("optimizer.eps", o.eps.to_string()),
            ("optimizer.weight_decay", o.weight_decay.to_string()),
            ("optimizer.grad_clip", o.grad_clip.map_or("none".into(), |v| v.to_string())),
            ("perturbation.enabled", self.perturbation_enabled.to_string()),
            ("perturbation.alpha", p.alpha.to_string()),
            ("perturbation.apply_prob", p.apply_prob.to_string()),
            ("perturbation.fnoise_range", pair(p.fnoise_range)),
            ("perturbation.fdrop_range", pair(p.fdrop_range)),
            ("perturbation.weights", join(p.weights)),
            ("perturbation.seed", p.seed.to_string()),
            ("perturbation.per_sample_selection", p.per_sample_selection.to_string()),
            ("perturbation.gate_all_kinds", p.gate_all_kinds.to_string()),
            ("ablate.seeds", self.ablate_seeds.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Applies the `key = value` lines of `text`. `#` starts a comment line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`, got {line:?}", i + 1))?;
            self.set(k.trim(), v).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut config = Self::default();
        config.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
        Ok(config)
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RUN_CONFIG_FILE);
        std::fs::write(&path, self.to_text()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// `--set key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects key=value, got {assignment:?}"))?;
        self.set(k.trim(), v)
    }

    pub fn frontend_kind(&self) -> FrontendKind {
        match self.frontend {
            FrontendChoice::RandomProjection => FrontendKind::RandomProjection {
                seed: self.frontend_seed,
                scales: self.frontend_scales,
                c_feat: self.frontend_c_feat,
                bias: self.frontend_bias,
            },
            FrontendChoice::Precomputed => FrontendKind::Precomputed {
                dir: self.frontend_dir.clone(),
                c_feat: self.frontend_c_feat,
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            perturbation: self.perturbation_enabled.then(|| self.perturbation.clone()),
            ..self.train.clone()
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

}
