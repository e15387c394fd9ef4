//! The feature perturbation pool.
//!
//! Three corruption mechanisms act on projected tokens during training:
//!
//! * **Gaussian noise** — `D ~ N(0, (α‖f‖₂/C)²)` added to each token, so
//!   the noise scale follows the token's own magnitude.
//! * **F-Noise** — `f ⊙ ξ + f` with `ξ ~ U(lo, hi)` drawn per element.
//! * **F-Drop** — tokens whose min-max normalized activation
//!   `Σ_c |f_c|` reaches a threshold `γ ~ U(lo, hi)` are zeroed.
//!
//! One mechanism is picked per training iteration with probability
//! proportional to its weight. Inference never calls into this module.

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::tokens::{l2_norm, TokenSequence, TokenVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    GaussianNoise,
    FNoise,
    FDrop,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 3] = [
        PerturbationKind::GaussianNoise,
        PerturbationKind::FNoise,
        PerturbationKind::FDrop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PerturbationKind::GaussianNoise => "gaussian_noise",
            PerturbationKind::FNoise => "f_noise",
            PerturbationKind::FDrop => "f_drop",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PerturbationKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown perturbation kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    /// Noise scale of the Gaussian mechanism.
    pub alpha: f64,
    /// Per-sample probability that a selected Gaussian draw is applied.
    pub apply_prob: f64,
    pub fnoise_range: (f64, f64),
    pub fdrop_range: (f64, f64),
    /// Selection weights, indexed like [`PerturbationKind::ALL`].
    pub weights: [f64; 3],
    pub seed: u64,
    /// Select a kind for every sample instead of once per batch.
    pub per_sample_selection: bool,
    /// Extend the `apply_prob` gate to F-Noise and F-Drop.
    pub gate_all_kinds: bool,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            apply_prob: 1.0,
            fnoise_range: (-0.3, 0.3),
            fdrop_range: (0.6, 0.9),
            weights: [1.0, 1.0, 1.0],
            seed: 0,
            per_sample_selection: false,
            gate_all_kinds: false,
        }
    }
}

impl PerturbationSpec {
    /// A spec that always selects `kind`.
    pub fn only(kind: PerturbationKind) -> Self {
        let mut weights = [0.0; 3];
        weights[kind.index()] = 1.0;
        Self {
            weights,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return bad(format!("apply_prob must lie in [0, 1], got {}", self.apply_prob));
        }
        for (name, (lo, hi)) in [("fnoise_range", self.fnoise_range), ("fdrop_range", self.fdrop_range)] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return bad(format!("{name} must satisfy lo < hi, got ({lo}, {hi})"));
            }
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad(format!("selection weights must be >= 0, got {:?}", self.weights));
        }
        if self.weights.iter().sum::<f64>() <= 0.0 {
            return bad("selection weights are all zero".into());
        }
        Ok(())
    }

    /// Kinds with nonzero selection weight.
    pub fn active_kinds(&self) -> Vec<PerturbationKind> {
        PerturbationKind::ALL
            .into_iter()
            .filter(|k| self.weights[k.index()] > 0.0)
            .collect()
    }
}

fn gaussian_noise_into(f: &[f32], alpha: f64, rng: &mut Rng, out: &mut [f32]) {
    let sigma = alpha * l2_norm(f) as f64 / f.len() as f64;
    for o in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *o = (sigma * z) as f32;
    }
}

/// Draws `D` with i.i.d. entries `N(0, (α‖f‖₂/C)²)`. The caller adds it.
pub fn sample_gaussian_noise(f: &TokenVector, alpha: f64, rng: &mut Rng) -> Result<TokenVector> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be >= 0, got {alpha}")));
    }
    let mut out = vec![0.0; f.channels()];
    gaussian_noise_into(f, alpha, rng, &mut out);
    TokenVector::new(out)
}

/// `f·(1 + ξ)` rounded to f32, stepped one ulp toward `f` if rounding
/// pushed it past `bound·|f|`.
fn scaled_within(f: f32, xi: f64, bound: f64) -> f32 {
    let exact = f as f64 * (1.0 + xi);
    let out = exact as f32;
    if ((out as f64) - f as f64).abs() <= bound * (f as f64).abs() {
        return out;
    }
    let toward = if out > f { -1 } else { 1 };
    f32::from_bits((out.to_bits() as i64 + if out > 0.0 { toward } else { -toward }) as u32)
}

/// F-Noise with an explicit `ξ`: `f ⊙ ξ + f`.
pub fn apply_f_noise_with(f: &TokenVector, xi: &[f64]) -> Result<TokenVector> {
    if xi.len() != f.channels() {
        return Err(Error::ShapeMismatch {
            op: "f_noise",
            lhs: vec![f.channels()],
            rhs: vec![xi.len()],
        });
    }
    let bound = xi.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    TokenVector::new(f.iter().zip(xi).map(|(&v, &x)| scaled_within(v, x, bound)).collect())
}

/// F-Noise: `ξ ~ U(lo, hi)` per element, output `f ⊙ ξ + f`.
pub fn apply_f_noise(f: &TokenVector, range: (f64, f64), rng: &mut Rng) -> Result<TokenVector> {
    let (lo, hi) = range;
    if !(lo < hi) {
        return Err(Error::InvalidArgument(format!("F-Noise range needs lo < hi, got {range:?}")));
    }
    let bound = lo.abs().max(hi.abs());
    let out = f
        .iter()
        .map(|&v| scaled_within(v, rng.gen_range(lo..hi), bound))
        .collect();
    TokenVector::new(out)
}

/// Min-max normalized per-token activation `Σ_c |token_c|`. `None` when all
/// activations are equal.
pub fn normalized_activations(tokens: &TokenSequence) -> Option<Vec<f64>> {
    let acts: Vec<f64> = (0..tokens.len())
        .map(|n| tokens.token(n).iter().map(|v| v.abs() as f64).sum())
        .collect();
    let (lo, hi) = acts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &a| (l.min(a), h.max(a)));
    (hi > lo).then(|| acts.iter().map(|a| (a - lo) / (hi - lo)).collect())
}

/// Keep-mask of F-Drop for a fixed threshold: token `n` survives iff its
/// normalized activation is below `gamma`.
pub fn f_drop_mask(tokens: &TokenSequence, gamma: f64) -> Vec<bool> {
    match normalized_activations(tokens) {
        Some(norm) => norm.iter().map(|&a| a < gamma).collect(),
        None => vec![true; tokens.len()],
    }
}

fn mask_tokens(tokens: &TokenSequence, mask: &[bool]) -> Result<TokenSequence> {
    let c = tokens.channels();
    let mut data = tokens.tokens().data().to_vec();
    for (n, keep) in mask.iter().enumerate() {
        if !keep {
            data[n * c..(n + 1) * c].fill(0.0);
        }
    }
    TokenSequence::new(Tensor::new(vec![tokens.len(), c], data)?, tokens.grid())
}

pub fn apply_f_drop_with_gamma(tokens: &TokenSequence, gamma: f64) -> Result<(TokenSequence, Vec<bool>)> {
    if tokens.len() < 2 {
        return Err(Error::InvalidArgument("F-Drop needs at least 2 tokens".into()));
    }
    let mask = f_drop_mask(tokens, gamma);
    Ok((mask_tokens(tokens, &mask)?, mask))
}

/// F-Drop with `γ ~ U(lo, hi)`.
pub fn apply_f_drop(
    tokens: &TokenSequence,
    range: (f64, f64),
    rng: &mut Rng,
) -> Result<(TokenSequence, Vec<bool>)> {
    let (lo, hi) = range;
    if !(lo < hi) {
        return Err(Error::InvalidArgument(format!("F-Drop range needs lo < hi, got {range:?}")));
    }
    let gamma = rng.gen_range(lo..hi);
    apply_f_drop_with_gamma(tokens, gamma)
}

pub fn pool_select(spec: &PerturbationSpec, rng: &mut Rng) -> Result<PerturbationKind> {
    let dist = WeightedIndex::new(spec.weights)
        .map_err(|e| Error::InvalidArgument(format!("selection weights: {e}")))?;
    Ok(PerturbationKind::ALL[dist.sample(rng)])
}

/// Values that override sampled ones (test and replay hooks).
#[derive(Clone, Copy, Debug, Default)]
pub struct Pins {
    pub xi: Option<f64>,
    pub gamma: Option<f64>,
}

/// A drawn corruption for a batch of token sequences, expressed as
/// `tokens ⊙ scale + offset` so it can be replayed on a gradient tape.
#[derive(Clone, Debug)]
pub struct BatchPerturbation {
    /// Kind selected for each sample in the batch.
    pub kinds: Vec<PerturbationKind>,
    pub scale: Option<Tensor<f32>>,
    pub offset: Option<Tensor<f32>>,
}

impl BatchPerturbation {
    pub fn identity(samples: usize, kind: PerturbationKind) -> Self {
        Self {
            kinds: vec![kind; samples],
            scale: None,
            offset: None,
        }
    }

    /// Stable label for logs: the single kind, or a comma-joined list.
    pub fn label(&self) -> String {
        let first = self.kinds.first().copied();
        if self.kinds.iter().all(|k| Some(*k) == first) {
            first.map(|k| k.as_str().to_string()).unwrap_or_default()
        } else {
            self.kinds.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(",")
        }
    }

    pub fn apply(&self, tokens: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut out = tokens.clone();
        if let Some(scale) = &self.scale {
            out = crate::ops::elementwise(crate::ops::BinaryOp::Mul, &out, scale)?;
        }
        if let Some(offset) = &self.offset {
            out = crate::ops::elementwise(crate::ops::BinaryOp::Add, &out, offset)?;
        }
        Ok(out)
    }
}

/// Draws one perturbation for `tokens`, a stack of samples with
/// `per_sample` consecutive rows each. Kind selection and `γ` are per batch
/// unless `spec.per_sample_selection` is set.
pub fn draw_batch(
    tokens: &Tensor<f32>,
    per_sample: usize,
    spec: &PerturbationSpec,
    rng: &mut Rng,
    pins: Pins,
) -> Result<BatchPerturbation> {
    spec.validate()?;
    let [rows, c] = tokens.shape() else {
        return Err(Error::InvalidShape {
            shape: tokens.shape().to_vec(),
            reason: "tokens must be an N×C matrix".into(),
        });
    };
    let (rows, c) = (*rows, *c);
    if per_sample == 0 || rows % per_sample != 0 {
        return Err(Error::InvalidArgument(format!(
            "{rows} token rows do not split into samples of {per_sample}"
        )));
    }
    let samples = rows / per_sample;
    let kinds = if spec.per_sample_selection {
        (0..samples).map(|_| pool_select(spec, rng)).collect::<Result<Vec<_>>>()?
    } else {
        vec![pool_select(spec, rng)?; samples]
    };
    let gamma = if kinds.contains(&PerturbationKind::FDrop) {
        let (lo, hi) = spec.fdrop_range;
        Some(pins.gamma.unwrap_or_else(|| rng.gen_range(lo..hi)))
    } else {
        None
    };

    let data = tokens.data();
    let mut scale: Option<Vec<f32>> = None;
    let mut offset: Option<Vec<f32>> = None;
    for (s, &kind) in kinds.iter().enumerate() {
        let gated = kind == PerturbationKind::GaussianNoise || spec.gate_all_kinds;
        if gated && spec.apply_prob < 1.0 && rng.gen::<f64>() >= spec.apply_prob {
            continue;
        }
        let range = s * per_sample * c..(s + 1) * per_sample * c;
        match kind {
            PerturbationKind::GaussianNoise => {
                let off = offset.get_or_insert_with(|| vec![0.0; rows * c]);
                for n in 0..per_sample {
                    let at = range.start + n * c;
                    gaussian_noise_into(&data[at..at + c], spec.alpha, rng, &mut off[at..at + c]);
                }
            }
            PerturbationKind::FNoise => {
                let sc = scale.get_or_insert_with(|| vec![1.0; rows * c]);
                let (lo, hi) = spec.fnoise_range;
                for v in &mut sc[range] {
                    let xi = pins.xi.unwrap_or_else(|| rng.gen_range(lo..hi));
                    *v = (1.0 + xi) as f32;
                }
            }
            PerturbationKind::FDrop => {
                let sample = TokenSequence::new(
                    Tensor::new(vec![per_sample, c], data[range.clone()].to_vec())?,
                    (1, per_sample),
                )?;
                let mask = f_drop_mask(&sample, gamma.expect("gamma drawn for F-Drop"));
                let sc = scale.get_or_insert_with(|| vec![1.0; rows * c]);
                for (n, keep) in mask.iter().enumerate() {
                    if !keep {
                        let at = range.start + n * c;
                        sc[at..at + c].fill(0.0);
                    }
                }
            }
        }
    }
    Ok(BatchPerturbation {
        kinds,
        scale: scale.map(|d| Tensor::new(vec![rows, c], d)).transpose()?,
        offset: offset.map(|d| Tensor::new(vec![rows, c], d)).transpose()?,
    })
}

/// Selects a mechanism from the pool and applies it to one token sequence.
pub fn perturb(
    tokens: &TokenSequence,
    spec: &PerturbationSpec,
    rng: &mut Rng,
) -> Result<(TokenSequence, PerturbationKind)> {
    perturb_pinned(tokens, spec, rng, Pins::default())
}

pub fn perturb_pinned(
    tokens: &TokenSequence,
    spec: &PerturbationSpec,
    rng: &mut Rng,
    pins: Pins,
) -> Result<(TokenSequence, PerturbationKind)> {
    let drawn = draw_batch(tokens.tokens(), tokens.len(), spec, rng, pins)?;
    let out = TokenSequence::new(drawn.apply(tokens.tokens())?, tokens.grid())?;
    Ok((out, drawn.kinds[0]))
}
