//! Token encoder-decoder with multi-layer fusion.
//!
//! `project_in → encode → decode → project_out`. Each stack runs its
//! residual layers sequentially on raw predecessor outputs; when fusion is
//! enabled the stack output is `standardize(Σ_{i=0..L} out_i)` with `out_0`
//! the stack input, otherwise it is the last layer's output. The
//! standardization has no affine part, so fusion flags never change the
//! parameter count.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::FeatureMap;
use crate::perturb::BatchPerturbation;
use crate::rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Element, Tensor};
use crate::tokens::TokenSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub c_in: usize,
    pub c_tok: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub hidden: usize,
    pub fusion_encoder: bool,
    pub fusion_decoder: bool,
    pub eps: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            c_in: 272,
            c_tok: 256,
            n_enc_layers: 4,
            n_dec_layers: 4,
            hidden: 1024,
            fusion_encoder: true,
            fusion_decoder: true,
            eps: 1e-6,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(format!("codec config: {msg}")));
        if self.c_in == 0 || self.hidden == 0 {
            return bad("c_in and hidden must be >= 1");
        }
        if self.c_tok < 2 {
            return bad("c_tok must be >= 2");
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return bad("layer counts must be >= 1");
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return bad("eps must be > 0");
        }
        Ok(())
    }

    pub fn with_fusion(mut self, on: bool) -> Self {
        self.fusion_encoder = on;
        self.fusion_decoder = on;
        self
    }
}

/// `y = x·W + b` with `W: in×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T: Element = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> Linear<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let [fan_in, fan_out] = weight.shape() else {
            return Err(Error::InvalidShape {
                shape: weight.shape().to_vec(),
                reason: "linear weight must be in×out".into(),
            });
        };
        if bias.shape() != [*fan_out] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: vec![*fan_in, *fan_out],
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    fn uniform(fan_in: usize, fan_out: usize, rng: &mut rng::Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| dist.sample(rng)).collect() };
        let w = draw(fan_in * fan_out);
        let b = draw(fan_out);
        Self {
            weight: Tensor::from_f64(vec![fan_in, fan_out], &w).expect("positive dims"),
            bias: Tensor::from_f64(vec![fan_out], &b).expect("positive dims"),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(x.clone());
        let bound = BoundLinear::constant(&mut tape, self);
        let y = bound.apply(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    fn cast<U: Element>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// `x + fc2(gelu(fc1(x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualLayer<T: Element = f32> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack<T: Element = f32> {
    pub layers: Vec<ResidualLayer<T>>,
}

impl<T: Element> LayerStack<T> {
    /// Layers with all-zero sublayers, each of which is the identity map.
    pub fn identity(n_layers: usize, dim: usize, hidden: usize) -> Self {
        let layers = (0..n_layers)
            .map(|_| ResidualLayer {
                fc1: Linear::zeros(dim, hidden),
                fc2: Linear::zeros(hidden, dim),
            })
            .collect();
        Self { layers }
    }

    fn random(n_layers: usize, dim: usize, hidden: usize, rng: &mut rng::Rng) -> Self {
        let layers = (0..n_layers)
            .map(|_| ResidualLayer {
                fc1: Linear::uniform(dim, hidden, rng),
                fc2: Linear::uniform(hidden, dim, rng),
            })
            .collect();
        Self { layers }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.fc1.fan_in())
    }

    fn check_dim(&self, c: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::InvalidArgument("layer stack is empty".into()));
        }
        if self.dim() != c {
            return Err(Error::ShapeMismatch {
                op: "layer stack",
                lhs: vec![self.dim()],
                rhs: vec![c],
            });
        }
        Ok(())
    }
}

/// Intermediate values of one stack pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionState<T: Element = f32> {
    /// Stack input followed by each layer's output.
    pub layer_outputs: Vec<Tensor<T>>,
    /// `Σ layer_outputs`, present only with fusion enabled.
    pub fused: Option<Tensor<T>>,
    pub normalized: Option<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codec<T: Element = f32> {
    pub config: CodecConfig,
    pub proj_in: Linear<T>,
    pub encoder: LayerStack<T>,
    pub decoder: LayerStack<T>,
    pub proj_out: Linear<T>,
}

impl<T: Element> Codec<T> {
    /// Uniform `±1/√fan_in` initialization drawn from `seed`.
    pub fn init(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::derive(seed, "codec-init");
        let proj_in = Linear::uniform(config.c_in, config.c_tok, &mut r);
        let encoder = LayerStack::random(config.n_enc_layers, config.c_tok, config.hidden, &mut r);
        let decoder = LayerStack::random(config.n_dec_layers, config.c_tok, config.hidden, &mut r);
        let proj_out = Linear::uniform(config.c_tok, config.c_in, &mut r);
        Ok(Self {
            config,
            proj_in,
            encoder,
            decoder,
            proj_out,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Parameters in their canonical order.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("proj_in.weight".to_string(), &self.proj_in.weight),
            ("proj_in.bias".to_string(), &self.proj_in.bias),
        ];
        for (stack_name, stack) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            for (i, layer) in stack.layers.iter().enumerate() {
                out.push((format!("{stack_name}.{i}.fc1.weight"), &layer.fc1.weight));
                out.push((format!("{stack_name}.{i}.fc1.bias"), &layer.fc1.bias));
                out.push((format!("{stack_name}.{i}.fc2.weight"), &layer.fc2.weight));
                out.push((format!("{stack_name}.{i}.fc2.bias"), &layer.fc2.bias));
            }
        }
        out.push(("proj_out.weight".to_string(), &self.proj_out.weight));
        out.push(("proj_out.bias".to_string(), &self.proj_out.bias));
        out
    }

    /// Mutable parameters in the same order as [`Codec::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.proj_in.weight, &mut self.proj_in.bias];
        for stack in [&mut self.encoder, &mut self.decoder] {
            for layer in &mut stack.layers {
                out.push(&mut layer.fc1.weight);
                out.push(&mut layer.fc1.bias);
                out.push(&mut layer.fc2.weight);
                out.push(&mut layer.fc2.bias);
            }
        }
        out.push(&mut self.proj_out.weight);
        out.push(&mut self.proj_out.bias);
        out
    }

    /// Rebuilds a codec from named parameters, as written by a checkpoint.
    pub fn from_params(config: CodecConfig, mut named: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let mut codec = Self::init(config, 0)?;
        let names: Vec<(String, Vec<usize>)> = codec
            .params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        for ((name, shape), slot) in names.into_iter().zip(codec.params_mut()) {
            let t = named
                .remove(&name)
                .ok_or_else(|| Error::Format {
                    what: "codec parameters",
                    reason: format!("missing {name}"),
                })?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format {
                    what: "codec parameters",
                    reason: format!("{name} has shape {:?}, expected {shape:?}", t.shape()),
                });
            }
            *slot = t;
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::Format {
                what: "codec parameters",
                reason: format!("unexpected parameter {extra}"),
            });
        }
        Ok(codec)
    }

    pub fn cast<U: Element>(&self) -> Codec<U> {
        let stack = |s: &LayerStack<T>| LayerStack {
            layers: s
                .layers
                .iter()
                .map(|l| ResidualLayer {
                    fc1: l.fc1.cast(),
                    fc2: l.fc2.cast(),
                })
                .collect(),
        };
        Codec {
            config: self.config.clone(),
            proj_in: self.proj_in.cast(),
            encoder: stack(&self.encoder),
            decoder: stack(&self.decoder),
            proj_out: self.proj_out.cast(),
        }
    }

    /// Registers every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> BoundCodec {
        let leaf = |tape: &mut Tape<T>, l: &Linear<T>| BoundLinear {
            weight: tape.leaf(l.weight.clone(), requires_grad),
            bias: tape.leaf(l.bias.clone(), requires_grad),
        };
        let stack = |tape: &mut Tape<T>, s: &LayerStack<T>| {
            s.layers
                .iter()
                .map(|l| (leaf(tape, &l.fc1), leaf(tape, &l.fc2)))
                .collect()
        };
        BoundCodec {
            proj_in: leaf(tape, &self.proj_in),
            encoder: stack(tape, &self.encoder),
            decoder: stack(tape, &self.decoder),
            proj_out: leaf(tape, &self.proj_out),
            fusion_encoder: self.config.fusion_encoder,
            fusion_decoder: self.config.fusion_decoder,
            eps: self.config.eps,
        }
    }

    pub fn project_in(&self, map: &FeatureMap<T>) -> Result<TokenSequence<T>> {
        let (h, w, c) = map.dims();
        if c != self.config.c_in {
            return Err(Error::ShapeMismatch {
                op: "project_in",
                lhs: vec![self.config.c_in],
                rhs: vec![c],
            });
        }
        let flat = map.data().clone().reshape(vec![h * w, c])?;
        TokenSequence::new(self.proj_in.apply(&flat)?, (h, w))
    }

    pub fn project_out(&self, tokens: &TokenSequence<T>) -> Result<FeatureMap<T>> {
        if tokens.channels() != self.config.c_tok {
            return Err(Error::ShapeMismatch {
                op: "project_out",
                lhs: vec![self.config.c_tok],
                rhs: vec![tokens.channels()],
            });
        }
        let (h, w) = tokens.grid();
        let out = self.proj_out.apply(tokens.tokens())?;
        FeatureMap::new(out.reshape(vec![h, w, self.config.c_in])?)
    }

    pub fn encode(&self, tokens: &TokenSequence<T>) -> Result<(TokenSequence<T>, FusionState<T>)> {
        run_stack_values(&self.encoder, tokens, self.config.fusion_encoder, self.config.eps)
    }

    pub fn decode(&self, tokens: &TokenSequence<T>) -> Result<(TokenSequence<T>, FusionState<T>)> {
        run_stack_values(&self.decoder, tokens, self.config.fusion_decoder, self.config.eps)
    }

    /// Inference-mode reconstruction of a feature map.
    pub fn forward(&self, map: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let (h, w, c) = map.dims();
        if c != self.config.c_in {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: vec![self.config.c_in],
                rhs: vec![c],
            });
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(map.data().clone().reshape(vec![h * w, c])?);
        let out = bound.forward(&mut tape, x, None)?;
        FeatureMap::new(tape.value(out.output).clone().reshape(vec![h, w, c])?)
    }
}

fn run_stack_values<T: Element>(
    stack: &LayerStack<T>,
    tokens: &TokenSequence<T>,
    fusion: bool,
    eps: f64,
) -> Result<(TokenSequence<T>, FusionState<T>)> {
    stack.check_dim(tokens.channels())?;
    let mut tape = Tape::new();
    let layers: Vec<(BoundLinear, BoundLinear)> = stack
        .layers
        .iter()
        .map(|l| {
            (
                BoundLinear::constant(&mut tape, &l.fc1),
                BoundLinear::constant(&mut tape, &l.fc2),
            )
        })
        .collect();
    let x = tape.constant(tokens.tokens().clone());
    let trace = run_stack(&mut tape, &layers, x, fusion, eps)?;
    let state = trace.state(&tape);
    let out = TokenSequence::new(tape.value(trace.output).clone(), tokens.grid())?;
    Ok((out, state))
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: NodeId,
    pub bias: NodeId,
}

impl BoundLinear {
    fn constant<T: Element>(tape: &mut Tape<T>, l: &Linear<T>) -> Self {
        Self {
            weight: tape.constant(l.weight.clone()),
            bias: tape.constant(l.bias.clone()),
        }
    }

    pub fn apply<T: Element>(&self, tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
        tape.linear(x, self.weight, self.bias)
    }
}

/// Tape handles of a codec's parameters.
#[derive(Clone, Debug)]
pub struct BoundCodec {
    pub proj_in: BoundLinear,
    pub encoder: Vec<(BoundLinear, BoundLinear)>,
    pub decoder: Vec<(BoundLinear, BoundLinear)>,
    pub proj_out: BoundLinear,
    fusion_encoder: bool,
    fusion_decoder: bool,
    eps: f64,
}

/// Node handles of one stack pass.
#[derive(Clone, Debug)]
pub struct StackTrace {
    pub layer_outputs: Vec<NodeId>,
    pub fused: Option<NodeId>,
    pub output: NodeId,
}

impl StackTrace {
    pub fn state<T: Element>(&self, tape: &Tape<T>) -> FusionState<T> {
        FusionState {
            layer_outputs: self.layer_outputs.iter().map(|&id| tape.value(id).clone()).collect(),
            fused: self.fused.map(|id| tape.value(id).clone()),
            normalized: self.fused.map(|_| tape.value(self.output).clone()),
        }
    }
}

/// Node handles of a full forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub tokens: NodeId,
    pub encoder: StackTrace,
    pub decoder: StackTrace,
    pub output: NodeId,
}

fn run_stack<T: Element>(
    tape: &mut Tape<T>,
    layers: &[(BoundLinear, BoundLinear)],
    x: NodeId,
    fusion: bool,
    eps: f64,
) -> Result<StackTrace> {
    let mut outputs = vec![x];
    let mut cur = x;
    for (fc1, fc2) in layers {
        let h = fc1.apply(tape, cur)?;
        let h = tape.gelu(h)?;
        let h = fc2.apply(tape, h)?;
        cur = tape.add(cur, h)?;
        outputs.push(cur);
    }
    if !fusion {
        return Ok(StackTrace {
            layer_outputs: outputs,
            fused: None,
            output: cur,
        });
    }
    let mut fused = outputs[0];
    for &o in &outputs[1..] {
        fused = tape.add(fused, o)?;
    }
    let output = tape.standardize(fused, 1, T::from_f64(eps))?;
    Ok(StackTrace {
        layer_outputs: outputs,
        fused: Some(fused),
        output,
    })
}

impl BoundCodec {
    /// Runs `x: R×c_in` through the codec. A perturbation, when given, is
    /// applied to the projected tokens as constant scale and offset.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        x: NodeId,
        perturbation: Option<&BatchPerturbation>,
    ) -> Result<ForwardTrace> {
        let tokens = self.project(tape, x)?;
        self.reconstruct(tape, tokens, perturbation)
    }

    pub fn project<T: Element>(&self, tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
        self.proj_in.apply(tape, x)
    }

    /// Everything after `project_in`: perturb, encode, decode, project out.
    pub fn reconstruct<T: Element>(
        &self,
        tape: &mut Tape<T>,
        mut tokens: NodeId,
        perturbation: Option<&BatchPerturbation>,
    ) -> Result<ForwardTrace> {
        if let Some(p) = perturbation {
            if let Some(scale) = &p.scale {
                let s = tape.constant(scale.cast());
                tokens = tape.mul(tokens, s)?;
            }
            if let Some(offset) = &p.offset {
                let o = tape.constant(offset.cast());
                tokens = tape.add(tokens, o)?;
            }
        }
        let encoder = run_stack(tape, &self.encoder, tokens, self.fusion_encoder, self.eps)?;
        let decoder = run_stack(tape, &self.decoder, encoder.output, self.fusion_decoder, self.eps)?;
        let output = self.proj_out.apply(tape, decoder.output)?;
        Ok(ForwardTrace {
            tokens,
            encoder,
            decoder,
            output,
        })
    }

    /// Parameter leaves in the order of [`Codec::params`].
    pub fn param_nodes(&self) -> Vec<NodeId> {
        let mut out = vec![self.proj_in.weight, self.proj_in.bias];
        for (fc1, fc2) in self.encoder.iter().chain(&self.decoder) {
            out.extend([fc1.weight, fc1.bias, fc2.weight, fc2.bias]);
        }
        out.extend([self.proj_out.weight, self.proj_out.bias]);
        out
    }
}
