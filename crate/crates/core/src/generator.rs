//! Encoder and decoder graphs built from a [`CodecConfig`], the executable
//! [`Network`] that binds a graph to weights, and graph analysis
//! (lookahead, parameter counts).
//!
//! # Node names
//!
//! Every node has a dotted name that doubles as the prefix of its weight
//! records (`<node>.weight`, `<node>.bias`, `<node>.alpha`):
//!
//! ```text
//! node     := dir "." item
//! dir      := "enc" | "dec"
//! item     := "in" | "out" | "post_act" | "tanh" | "stages." N "." stage
//! stage    := "act" | "down" | "up" | "res" | "res.layers." N "." layer
//! layer    := "act1" | "conv1" | "act2" | "conv2"
//! ```
//!
//! The encoder is `in`, then per stage `res`, `act`, `down`, then
//! `post_act`, `out`. The decoder is `in`, then per stage `act`, `up`,
//! `res`, then `post_act`, `out`, `tanh`.

use serde::Serialize;

use crate::config::{ratio_f64, CodecConfig, Rate};
use crate::dsp::{self, ConvLayer, ConvSpec, FeatureMap, LayerState};
use crate::error::{Error, Result};
use crate::weights::WeightMap;

/// Slope of the encoder's leaky ReLU.
pub const LEAKY_SLOPE: f32 = 0.1;
/// Kernel size of the input and output projections of both graphs.
pub const PROJECTION_KERNEL: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Direction {
    Encoder,
    Decoder,
}

impl Direction {
    pub fn prefix(self) -> &'static str {
        match self {
            Direction::Encoder => "enc",
            Direction::Decoder => "dec",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Activation {
    LeakyRelu { slope: f32 },
    /// One learnable alpha per channel.
    Snake { channels: usize },
    Tanh,
}

/// A stack of residual layers at fixed width. Layer `j` computes
/// `x + conv2(act2(conv1(act1(x))))`, where `conv1` is dilated by
/// `dilations[j]` and `conv2` is undilated.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResidualBlockPlan {
    pub channels: usize,
    pub dilations: Vec<usize>,
    pub kernel_size: usize,
    pub causal: bool,
    pub activation: Activation,
}

impl ResidualBlockPlan {
    pub fn num_layers(&self) -> usize {
        self.dilations.len()
    }

    fn conv_specs(&self, layer: usize) -> (ConvSpec, ConvSpec) {
        let c = self.channels;
        (
            ConvSpec::conv(c, c, self.kernel_size, self.causal).with_dilation(self.dilations[layer]),
            ConvSpec::conv(c, c, self.kernel_size, self.causal),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum NodeKind {
    /// Input or output projection (stride 1).
    Projection(ConvSpec),
    /// Strided downsampling conv.
    Conv(ConvSpec),
    ConvTransposed(ConvSpec),
    Activation(Activation),
    Residual(ResidualBlockPlan),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Node {
    pub name: String,
    pub kind: NodeKind,
}

/// Shape of one weight record expected by a graph.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TensorPlan {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GeneratorGraph {
    pub direction: Direction,
    pub nodes: Vec<Node>,
    pub sample_rate_hz: u32,
    pub hop_samples: u64,
    pub latent_dim: usize,
}

fn residual_plan(config: &CodecConfig, channels: usize, causal: bool, activation: Activation) -> ResidualBlockPlan {
    ResidualBlockPlan {
        channels,
        dilations: config.residual_dilations.iter().map(|&d| d as usize).collect(),
        kernel_size: config.residual_kernel_size,
        causal,
        activation,
    }
}

pub fn build_encoder(config: &CodecConfig) -> Result<GeneratorGraph> {
    config.check()?;
    let causal = config.encoder_causal;
    let leaky = Activation::LeakyRelu { slope: LEAKY_SLOPE };
    let mut nodes = Vec::new();
    let mut push = |name: String, kind| nodes.push(Node { name, kind });

    let mut channels = config.encoder_initial_channels;
    push("enc.in".into(), NodeKind::Projection(ConvSpec::conv(1, channels, PROJECTION_KERNEL, causal)));
    for (i, &stride) in config.encoder_strides.iter().enumerate() {
        let stride = stride as usize;
        push(format!("enc.stages.{i}.res"), NodeKind::Residual(residual_plan(config, channels, causal, leaky)));
        push(format!("enc.stages.{i}.act"), NodeKind::Activation(leaky));
        let down = ConvSpec::conv(channels, channels * 2, 2 * stride, causal).with_stride(stride);
        push(format!("enc.stages.{i}.down"), NodeKind::Conv(down));
        channels *= 2;
    }
    push("enc.post_act".into(), NodeKind::Activation(leaky));
    push(
        "enc.out".into(),
        NodeKind::Projection(ConvSpec::conv(channels, config.fsq.latent_dim(), PROJECTION_KERNEL, causal)),
    );
    Ok(GeneratorGraph {
        direction: Direction::Encoder,
        nodes,
        sample_rate_hz: config.sample_rate_hz,
        hop_samples: config.hop_samples(),
        latent_dim: config.fsq.latent_dim(),
    })
}

pub fn build_decoder(config: &CodecConfig) -> Result<GeneratorGraph> {
    config.check()?;
    let causal = config.decoder_causal;
    let mut nodes = Vec::new();
    let mut push = |name: String, kind| nodes.push(Node { name, kind });

    let mut channels = config.decoder_initial_channels;
    push(
        "dec.in".into(),
        NodeKind::Projection(ConvSpec::conv(config.fsq.latent_dim(), channels, PROJECTION_KERNEL, causal)),
    );
    for (i, rate) in config.decoder_upsample_rates().into_iter().enumerate() {
        let rate = rate as usize;
        push(format!("dec.stages.{i}.act"), NodeKind::Activation(Activation::Snake { channels }));
        let up = ConvSpec::transposed(channels, channels / 2, 2 * rate, rate, causal);
        push(format!("dec.stages.{i}.up"), NodeKind::ConvTransposed(up));
        channels /= 2;
        let snake = Activation::Snake { channels };
        push(format!("dec.stages.{i}.res"), NodeKind::Residual(residual_plan(config, channels, causal, snake)));
    }
    push("dec.post_act".into(), NodeKind::Activation(Activation::Snake { channels }));
    push("dec.out".into(), NodeKind::Projection(ConvSpec::conv(channels, 1, PROJECTION_KERNEL, causal)));
    push("dec.tanh".into(), NodeKind::Activation(Activation::Tanh));
    Ok(GeneratorGraph {
        direction: Direction::Decoder,
        nodes,
        sample_rate_hz: config.sample_rate_hz,
        hop_samples: config.hop_samples(),
        latent_dim: config.fsq.latent_dim(),
    })
}

/// Future context a graph needs before its earliest output is final.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Lookahead {
    /// Right context in audio samples.
    pub samples: u64,
    /// Right context in latent frames.
    #[serde(serialize_with = "serialize_rate")]
    pub frames: Rate,
    pub ms: f64,
}

fn serialize_rate<S: serde::Serializer>(r: &Rate, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(ratio_f64(*r))
}

impl Lookahead {
    pub fn zero() -> Self {
        Self {
            samples: 0,
            frames: Rate::from(0),
            ms: 0.0,
        }
    }

    pub fn frames_f64(&self) -> f64 {
        ratio_f64(self.frames)
    }

    /// Sum of two stages (encoder then decoder) of the same codec.
    pub fn plus(&self, other: &Lookahead) -> Lookahead {
        Lookahead {
            samples: self.samples + other.samples,
            frames: self.frames + other.frames,
            ms: self.ms + other.ms,
        }
    }
}

// Largest input index needed to produce output index `n` of one conv,
// on an unbounded signal.
fn conv_reach(spec: &ConvSpec, n: i64) -> i64 {
    if spec.transposed {
        (n + spec.transposed_left_trim() as i64).div_euclid(spec.stride as i64)
    } else {
        n * spec.stride as i64 - spec.left_pad() as i64 + spec.span() as i64
    }
}

impl GeneratorGraph {
    pub fn is_causal(&self) -> bool {
        self.conv_specs().iter().all(|s| s.causal)
    }

    /// Every conv in execution order, with its node name.
    pub fn conv_nodes(&self) -> Vec<(String, ConvSpec)> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.kind {
                NodeKind::Projection(spec) | NodeKind::Conv(spec) | NodeKind::ConvTransposed(spec) => {
                    out.push((node.name.clone(), *spec))
                }
                NodeKind::Residual(plan) => {
                    for j in 0..plan.num_layers() {
                        let (c1, c2) = plan.conv_specs(j);
                        out.push((format!("{}.layers.{j}.conv1", node.name), c1));
                        out.push((format!("{}.layers.{j}.conv2", node.name), c2));
                    }
                }
                NodeKind::Activation(_) => {}
            }
        }
        out
    }

    fn conv_specs(&self) -> Vec<ConvSpec> {
        self.conv_nodes().into_iter().map(|(_, s)| s).collect()
    }

    /// Every weight record the graph needs, in execution order.
    pub fn tensor_plan(&self) -> Vec<TensorPlan> {
        let mut out = Vec::new();
        let conv = |out: &mut Vec<TensorPlan>, name: &str, spec: &ConvSpec| {
            out.push(TensorPlan {
                name: format!("{name}.weight"),
                shape: spec.weight_shape().to_vec(),
            });
            out.push(TensorPlan {
                name: format!("{name}.bias"),
                shape: vec![spec.out_channels],
            });
        };
        let act = |out: &mut Vec<TensorPlan>, name: &str, act: &Activation| {
            if let Activation::Snake { channels } = act {
                out.push(TensorPlan {
                    name: format!("{name}.alpha"),
                    shape: vec![*channels],
                });
            }
        };
        for node in &self.nodes {
            match &node.kind {
                NodeKind::Projection(spec) | NodeKind::Conv(spec) | NodeKind::ConvTransposed(spec) => {
                    conv(&mut out, &node.name, spec)
                }
                NodeKind::Activation(a) => act(&mut out, &node.name, a),
                NodeKind::Residual(plan) => {
                    for j in 0..plan.num_layers() {
                        let (c1, c2) = plan.conv_specs(j);
                        let layer = format!("{}.layers.{j}", node.name);
                        act(&mut out, &format!("{layer}.act1"), &plan.activation);
                        conv(&mut out, &format!("{layer}.conv1"), &c1);
                        act(&mut out, &format!("{layer}.act2"), &plan.activation);
                        conv(&mut out, &format!("{layer}.conv2"), &c2);
                    }
                }
            }
        }
        out
    }

    /// Exact count of weight, bias and alpha scalars.
    pub fn parameter_count(&self) -> u64 {
        self.tensor_plan()
            .iter()
            .map(|t| t.shape.iter().product::<usize>() as u64)
            .sum()
    }

    /// Channel width after every node that changes it, starting with the
    /// graph input.
    pub fn channel_trajectory(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, (_, spec)) in self.conv_nodes().iter().enumerate() {
            if i == 0 {
                out.push(spec.in_channels);
            }
            if spec.out_channels != *out.last().unwrap() {
                out.push(spec.out_channels);
            }
        }
        out
    }

    /// Composed reach: the largest graph-input index needed for output `n`.
    fn reach(&self, n: i64) -> i64 {
        let mut idx = n;
        for node in self.nodes.iter().rev() {
            idx = match &node.kind {
                NodeKind::Projection(spec) | NodeKind::Conv(spec) | NodeKind::ConvTransposed(spec) => {
                    conv_reach(spec, idx)
                }
                NodeKind::Activation(_) => idx,
                NodeKind::Residual(plan) => {
                    let mut inner = idx;
                    for j in (0..plan.num_layers()).rev() {
                        let (c1, c2) = plan.conv_specs(j);
                        let through = conv_reach(&c1, conv_reach(&c2, inner));
                        // The skip path reads the same index.
                        inner = through.max(inner);
                    }
                    inner
                }
            };
        }
        idx
    }

    /// Right-side receptive field. For the encoder this is the audio past
    /// the start of a frame's hop that the frame depends on; for the
    /// decoder it is the number of later frames an output sample depends
    /// on. Fully causal graphs return exactly zero.
    pub fn lookahead(&self) -> Lookahead {
        let hop = self.hop_samples as i64;
        let fps = Rate::new(u64::from(self.sample_rate_hz), self.hop_samples);
        // Far from the signal start so padding never clips the reach.
        let anchor = 1 << 12;
        let frames = match self.direction {
            Direction::Encoder => {
                let samples = (self.reach(anchor) - anchor * hop).max(0);
                Rate::new(samples as u64, self.hop_samples)
            }
            Direction::Decoder => {
                let base = anchor * hop;
                let extra = (base..base + hop)
                    .map(|n| self.reach(n) - n.div_euclid(hop))
                    .max()
                    .unwrap_or(0)
                    .max(0);
                Rate::from(extra as u64)
            }
        };
        let samples = (frames * self.hop_samples).ceil().to_integer();
        Lookahead {
            samples,
            frames,
            ms: ratio_f64(frames / fps) * 1000.0,
        }
    }
}

/// Lookahead of the full codec: encoder context plus decoder token
/// buffering.
pub fn lookahead_frames(config: &CodecConfig) -> Result<(Lookahead, Lookahead)> {
    Ok((build_encoder(config)?.lookahead(), build_decoder(config)?.lookahead()))
}

#[derive(Clone, Debug)]
enum Pointwise {
    Leaky(f32),
    Snake(Vec<f32>),
    Tanh,
}

impl Pointwise {
    fn apply(&self, x: &mut FeatureMap) -> Result<()> {
        match self {
            Pointwise::Leaky(slope) => dsp::leaky_relu_inplace(x, *slope),
            Pointwise::Snake(alphas) => dsp::snake_channels(x, alphas)?,
            Pointwise::Tanh => dsp::tanh_inplace(x),
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResidualLayer {
    act1: Pointwise,
    conv1: ConvLayer,
    act2: Pointwise,
    conv2: ConvLayer,
}

#[derive(Clone, Debug)]
enum Op {
    Conv(ConvLayer),
    Act(Pointwise),
    Residual(Vec<ResidualLayer>),
}

/// A graph bound to weights, ready to run.
#[derive(Clone, Debug)]
pub struct Network {
    graph: GeneratorGraph,
    ops: Vec<Op>,
}

/// Streaming state of a [`Network`]: one history per conv, keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState {
    pub layers: Vec<(String, LayerState)>,
}

impl Network {
    pub fn new(graph: GeneratorGraph, weights: &WeightMap) -> Result<Self> {
        let conv = |name: &str, spec: &ConvSpec| -> Result<ConvLayer> {
            let w = weights.expect(&format!("{name}.weight"), &spec.weight_shape())?;
            let b = weights.expect(&format!("{name}.bias"), &[spec.out_channels])?;
            ConvLayer::new(*spec, w, b)
        };
        let act = |name: &str, a: &Activation| -> Result<Pointwise> {
            Ok(match a {
                Activation::LeakyRelu { slope } => Pointwise::Leaky(*slope),
                Activation::Tanh => Pointwise::Tanh,
                Activation::Snake { channels } => {
                    let alphas = weights.expect(&format!("{name}.alpha"), &[*channels])?;
                    if let Some(bad) = alphas.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
                        return Err(Error::Parameter(format!("{name}.alpha contains {bad}; snake alpha must be positive")));
                    }
                    Pointwise::Snake(alphas.to_vec())
                }
            })
        };
        let mut ops = Vec::with_capacity(graph.nodes.len());
        for node in &graph.nodes {
            ops.push(match &node.kind {
                NodeKind::Projection(spec) | NodeKind::Conv(spec) | NodeKind::ConvTransposed(spec) => {
                    Op::Conv(conv(&node.name, spec)?)
                }
                NodeKind::Activation(a) => Op::Act(act(&node.name, a)?),
                NodeKind::Residual(plan) => {
                    let mut layers = Vec::with_capacity(plan.num_layers());
                    for j in 0..plan.num_layers() {
                        let (c1, c2) = plan.conv_specs(j);
                        let prefix = format!("{}.layers.{j}", node.name);
                        layers.push(ResidualLayer {
                            act1: act(&format!("{prefix}.act1"), &plan.activation)?,
                            conv1: conv(&format!("{prefix}.conv1"), &c1)?,
                            act2: act(&format!("{prefix}.act2"), &plan.activation)?,
                            conv2: conv(&format!("{prefix}.conv2"), &c2)?,
                        });
                    }
                    Op::Residual(layers)
                }
            });
        }
        Ok(Self { graph, ops })
    }

    pub fn graph(&self) -> &GeneratorGraph {
        &self.graph
    }

    /// Walks the ops, delegating each conv (with its execution index) to
    /// `conv`.
    fn walk(
        &self,
        mut x: FeatureMap,
        mut conv: impl FnMut(usize, &ConvLayer, &FeatureMap) -> Result<FeatureMap>,
    ) -> Result<FeatureMap> {
        let mut k = 0;
        let mut next = |layer: &ConvLayer, x: &FeatureMap| {
            let out = conv(k, layer, x);
            k += 1;
            out
        };
        for op in &self.ops {
            match op {
                Op::Conv(layer) => x = next(layer, &x)?,
                Op::Act(a) => a.apply(&mut x)?,
                Op::Residual(layers) => {
                    for layer in layers {
                        let mut h = x.clone();
                        layer.act1.apply(&mut h)?;
                        let mut h = next(&layer.conv1, &h)?;
                        layer.act2.apply(&mut h)?;
                        let h = next(&layer.conv2, &h)?;
                        x.add_assign(&h)?;
                    }
                }
            }
        }
        Ok(x)
    }

    /// One-shot inference over a whole signal.
    pub fn forward(&self, x: FeatureMap) -> Result<FeatureMap> {
        self.walk(x, |_, layer, x| layer.forward(x))
    }

    pub fn new_state(&self) -> NetworkState {
        NetworkState {
            layers: self
                .graph
                .conv_nodes()
                .into_iter()
                .map(|(name, spec)| {
                    let state = LayerState::new(&spec);
                    (name, state)
                })
                .collect(),
        }
    }

    /// Streaming inference over the next chunk of a causal graph.
    pub fn step(&self, state: &mut NetworkState, x: FeatureMap) -> Result<FeatureMap> {
        if !self.graph.is_causal() {
            return Err(Error::Contract(format!(
                "streaming needs a causal graph; this one needs {} frames of lookahead",
                crate::config::format_rate(self.graph.lookahead().frames)
            )));
        }
        if state.layers.len() != self.graph.conv_nodes().len() {
            return Err(Error::shape("network state layers", self.graph.conv_nodes().len(), state.layers.len()));
        }
        self.walk(x, |k, layer, x| layer.step(&mut state.layers[k].1, x))
    }
}

/// Pre-quantization encoder output: `dim` channels by `num_frames`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentFrames {
    pub values: FeatureMap,
}

impl LatentFrames {
    pub fn dim(&self) -> usize {
        self.values.channels()
    }

    pub fn num_frames(&self) -> usize {
        self.values.len()
    }

    /// Latent vector of frame `t`.
    pub fn frame(&self, t: usize) -> Vec<f32> {
        (0..self.dim()).map(|c| self.values.get(c, t)).collect()
    }

    /// Builds latents from per-frame vectors of length `dim`.
    pub fn from_frames(dim: usize, frames: &[Vec<f32>]) -> Result<Self> {
        let mut values = FeatureMap::zeros(dim, frames.len());
        for (t, frame) in frames.iter().enumerate() {
            if frame.len() != dim {
                return Err(Error::shape("latent frame", dim, frame.len()));
            }
            for (c, &v) in frame.iter().enumerate() {
                values.row_mut(c)[t] = v;
            }
        }
        Ok(Self { values })
    }
}

/// Right-pads `audio` with zeros to a multiple of `hop`.
pub fn pad_to_hop(audio: &[f32], hop: usize) -> Vec<f32> {
    let mut padded = audio.to_vec();
    padded.resize(audio.len().div_ceil(hop) * hop, 0.0);
    padded
}

/// Encodes mono audio, zero-padded on the right to a whole number of hops.
pub fn encode_audio(encoder: &Network, audio: &[f32]) -> Result<LatentFrames> {
    let graph = encoder.graph();
    if graph.direction != Direction::Encoder {
        return Err(Error::Contract("encode_audio needs an encoder network".into()));
    }
    if audio.is_empty() {
        return Err(Error::Audio("cannot encode empty audio".into()));
    }
    let padded = pad_to_hop(audio, graph.hop_samples as usize);
    let values = encoder.forward(FeatureMap::from_mono(&padded))?;
    assert_eq!(values.len(), padded.len() / graph.hop_samples as usize);
    Ok(LatentFrames { values })
}

/// Decodes latents to exactly `num_frames * hop` samples.
pub fn decode_latents(decoder: &Network, latents: &LatentFrames) -> Result<Vec<f32>> {
    let graph = decoder.graph();
    if graph.direction != Direction::Decoder {
        return Err(Error::Contract("decode_latents needs a decoder network".into()));
    }
    if latents.dim() != graph.latent_dim {
        return Err(Error::shape("latent dimension", graph.latent_dim, latents.dim()));
    }
    if latents.num_frames() == 0 {
        return Ok(Vec::new());
    }
    Ok(decoder.forward(latents.values.clone())?.into_data())
}
