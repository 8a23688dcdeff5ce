//! Layer graph: spiking conv / fully-connected / residual stages wired as
//! synapse -> tdBN -> LIF, followed by a non-firing readout that averages the
//! synaptic drive over time.
//!
//! Activations are time-major, `[T, N, C, H, W]`; fully-connected stages use
//! `H = W = 1`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuron::{self, NeuronConfig};
use crate::normalization::{NormCache, NormMode, TdbnLayer};
use crate::rng::Rng;
use crate::surrogate::SgConfig;
use crate::tensor::{self, ConvGeometry, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    /// `xCy`: `out` channels, `kernel x kernel`, given stride and padding.
    Conv { out: usize, kernel: usize, stride: usize, padding: usize },
    /// `xFC`.
    Fc { out: usize },
    /// `2AP`.
    AvgPool2,
    /// `xRB` (stride 1) or `xRB*` (first conv and shortcut stride 2).
    Residual { out: usize, stride: usize },
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::Conv { out, kernel, stride: 1, padding: 1 } => write!(f, "{out}C{kernel}"),
            Self::Conv { out, kernel, stride, padding } => write!(f, "{out}C{kernel}s{stride}p{padding}"),
            Self::Fc { out } => write!(f, "{out}FC"),
            Self::AvgPool2 => write!(f, "2AP"),
            Self::Residual { out, stride: 1 } => write!(f, "{out}RB"),
            Self::Residual { out, .. } => write!(f, "{out}RB*"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Architecture(format!("cannot parse layer {s:?}"));
        let num = |x: &str| x.parse::<usize>().ok().filter(|&v| v > 0).ok_or_else(bad);
        if s == "2AP" {
            return Ok(Self::AvgPool2);
        }
        if let Some(n) = s.strip_suffix("FC") {
            return Ok(Self::Fc { out: num(n)? });
        }
        if let Some(n) = s.strip_suffix("RB*") {
            return Ok(Self::Residual { out: num(n)?, stride: 2 });
        }
        if let Some(n) = s.strip_suffix("RB") {
            return Ok(Self::Residual { out: num(n)?, stride: 1 });
        }
        if let Some((out, rest)) = s.split_once('C') {
            let out = num(out)?;
            let (kernel, rest) = match rest.find('s') {
                Some(i) => (&rest[..i], Some(&rest[i + 1..])),
                None => (rest, None),
            };
            let kernel = num(kernel)?;
            let (stride, padding) = match rest {
                None => (1, 1),
                Some(r) => {
                    let (st, pd) = r.split_once('p').ok_or_else(bad)?;
                    (num(st)?, pd.parse::<usize>().map_err(|_| bad())?)
                }
            };
            return Ok(Self::Conv { out, kernel, stride, padding });
        }
        Err(bad())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// `(C, H, W)` of one input frame.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub timesteps: usize,
    pub classes: usize,
    /// Insert tdBN between every synapse and its neurons.
    pub normalize: bool,
}

pub const PRESETS: [&str; 3] = ["mlp-64", "convs", "minires"];

impl Architecture {
    pub fn preset(name: &str, input: [usize; 3], classes: usize, timesteps: usize) -> Result<Self> {
        let layers: &[&str] = match name {
            "mlp-64" => &["64FC", "64FC"],
            "convs" => &["8C3", "8C3", "2AP"],
            "minires" => &["16C3", "16RB", "32RB*", "2AP"],
            other => return Err(Error::Architecture(format!("unknown preset {other:?}"))),
        };
        Ok(Self {
            input,
            layers: layers.iter().map(|l| l.parse()).collect::<Result<_>>()?,
            timesteps,
            classes,
            normalize: true,
        })
    }

    pub fn parse_layers(text: &str) -> Result<Vec<LayerSpec>> {
        if text.trim().is_empty() {
            return Ok(Vec::new());
        }
        text.split(['-', ',']).map(str::parse).collect()
    }

    pub fn layers_string(&self) -> String {
        self.layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("-")
    }

    /// Checks that every stage's dimensions chain into the next; returns each stage's
    /// output `(C, H, W)`.
    pub fn validate(&self) -> Result<Vec<[usize; 3]>> {
        if self.timesteps == 0 || self.classes == 0 || self.input.contains(&0) {
            return Err(Error::Architecture("timesteps, classes and input dims must be positive".into()));
        }
        let mut shape = self.input;
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, spec) in self.layers.iter().enumerate() {
            let ctx = |e: Error| Error::Architecture(format!("layer {i} ({spec}): {e}"));
            shape = match *spec {
                LayerSpec::Conv { out, kernel, stride, padding } => {
                    let g = conv_geometry(shape, out, kernel, stride, padding);
                    let (h, w) = g.output_hw().map_err(ctx)?;
                    [out, h, w]
                }
                LayerSpec::Fc { out } => [out, 1, 1],
                LayerSpec::AvgPool2 => {
                    if !shape[1].is_multiple_of(2) || !shape[2].is_multiple_of(2) {
                        return Err(Error::Architecture(format!(
                            "layer {i} (2AP): odd spatial dims {}x{}",
                            shape[1], shape[2]
                        )));
                    }
                    [shape[0], shape[1] / 2, shape[2] / 2]
                }
                LayerSpec::Residual { out, stride } => {
                    let g = conv_geometry(shape, out, 3, stride, 1);
                    let (h, w) = g.output_hw().map_err(ctx)?;
                    if stride != 1 {
                        conv_geometry(shape, out, 1, stride, 0).output_hw().map_err(ctx)?;
                    }
                    [out, h, w]
                }
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    pub fn feature_count(&self) -> Result<usize> {
        let shapes = self.validate()?;
        let last = shapes.last().copied().unwrap_or(self.input);
        Ok(last.iter().product())
    }
}

fn conv_geometry(input: [usize; 3], out: usize, kernel: usize, stride: usize, padding: usize) -> ConvGeometry {
    ConvGeometry {
        in_channels: input[0],
        out_channels: out,
        height: input[1],
        width: input[2],
        kernel_h: kernel,
        kernel_w: kernel,
        stride,
        padding,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SynapseKind {
    Conv(ConvGeometry),
    Fc { in_features: usize, out_features: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synapse {
    pub kind: SynapseKind,
    pub weight: Tensor,
}

impl Synapse {
    fn new(kind: SynapseKind, rng: &mut Rng) -> Self {
        let (shape, fan_in) = match kind {
            SynapseKind::Conv(g) => (
                vec![g.out_channels, g.in_channels, g.kernel_h, g.kernel_w],
                g.in_channels * g.kernel_h * g.kernel_w,
            ),
            SynapseKind::Fc { in_features, out_features } => (vec![out_features, in_features], in_features),
        };
        let bound = (1.0 / fan_in as f64).sqrt();
        Self { kind, weight: rng.uniform_tensor(&shape, -bound, bound) }
    }

    pub fn in_len(&self) -> usize {
        match self.kind {
            SynapseKind::Conv(g) => g.in_channels * g.height * g.width,
            SynapseKind::Fc { in_features, .. } => in_features,
        }
    }

    pub fn out_shape(&self) -> [usize; 3] {
        match self.kind {
            SynapseKind::Conv(g) => {
                let (h, w) = g.output_hw().expect("validated geometry");
                [g.out_channels, h, w]
            }
            SynapseKind::Fc { out_features, .. } => [out_features, 1, 1],
        }
    }

    /// Iso-architecture ANN multiply-accumulates per input frame.
    pub fn ann_ops(&self) -> u64 {
        match self.kind {
            SynapseKind::Conv(g) => g.macs().expect("validated geometry"),
            SynapseKind::Fc { in_features, out_features } => (in_features * out_features) as u64,
        }
    }

    /// Applies the synapse to `frames` stacked inputs.
    pub(crate) fn apply(&self, x: &[f64], frames: usize) -> Vec<f64> {
        match self.kind {
            SynapseKind::Conv(g) => tensor::conv2d_raw(x, frames, self.weight.data(), &g),
            SynapseKind::Fc { .. } => tensor::linear(x, frames, &self.weight),
        }
    }

    /// Accumulates into `grad_w`; returns the input gradient when requested.
    pub(crate) fn backward(&self, x: &[f64], frames: usize, grad_out: &[f64], grad_w: &mut [f64], want_input: bool) -> Option<Vec<f64>> {
        match self.kind {
            SynapseKind::Conv(g) => tensor::conv2d_backward_raw(x, frames, self.weight.data(), &g, grad_out, grad_w, want_input),
            SynapseKind::Fc { .. } => tensor::linear_backward(x, frames, &self.weight, grad_out, grad_w, want_input),
        }
    }
}

/// Synapse -> optional tdBN -> LIF.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikingLayer {
    pub synapse: Synapse,
    pub norm: Option<TdbnLayer>,
    pub neuron: NeuronConfig,
}

impl SpikingLayer {
    fn new(synapse: Synapse, normalize: bool, neuron: NeuronConfig) -> Self {
        let channels = synapse.out_shape()[0];
        let norm = normalize.then(|| TdbnLayer::new(channels, neuron.v_th));
        Self { synapse, norm, neuron }
    }

    pub fn gamma_bar(&self) -> f64 {
        self.norm.as_ref().map_or(1.0, TdbnLayer::gamma_bar)
    }

    pub fn beta_bar(&self) -> f64 {
        self.norm.as_ref().map_or(0.0, TdbnLayer::beta_bar)
    }

    pub fn tau(&self) -> f64 {
        self.neuron.tau()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub first: SpikingLayer,
    /// Its synaptic current is summed with the shortcut current before normalization.
    pub second: SpikingLayer,
    /// `None` is the identity shortcut.
    pub shortcut: Option<Synapse>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Spiking(SpikingLayer),
    Pool { input: [usize; 3] },
    Residual(ResidualBlock),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Gamma,
    Beta,
    Rho,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpikeMode {
    /// Heaviside spikes.
    Hard,
    /// Spike wires carry the surrogate's antiderivative; used by gradient checks.
    Relaxed,
}

/// Per-spiking-layer values pinned from an earlier forward.
#[derive(Debug, Clone, PartialEq)]
pub struct Frozen {
    pub kappas: Vec<Vec<f64>>,
    /// Values substituted for `S` inside the `(1 - S)` reset factor.
    pub reset_gates: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub sg: SgConfig,
    pub norm_mode: NormMode,
    pub spike_mode: SpikeMode,
    pub frozen: Option<&'a Frozen>,
}

impl<'a> ForwardOptions<'a> {
    pub fn train(sg: SgConfig) -> Self {
        Self { sg, norm_mode: NormMode::Train, spike_mode: SpikeMode::Hard, frozen: None }
    }

    /// Batch statistics without touching running statistics.
    pub fn probe(sg: SgConfig) -> Self {
        Self { norm_mode: NormMode::TrainFrozen, ..Self::train(sg) }
    }

    pub fn eval(sg: SgConfig) -> Self {
        Self { norm_mode: NormMode::Inference, ..Self::train(sg) }
    }
}

/// Forward record of one spiking layer. Flat buffers are `[T, N, C, H, W]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTape {
    pub name: String,
    pub steps: usize,
    pub batch: usize,
    pub in_shape: [usize; 3],
    pub out_shape: [usize; 3],
    /// Synapse input.
    pub input: Vec<f64>,
    pub norm_cache: Option<NormCache>,
    /// Post-normalization pre-synaptic input.
    pub current: Vec<f64>,
    pub v: Vec<f64>,
    pub s: Vec<f64>,
    /// Width used at each timestep.
    pub kappas: Vec<f64>,
    pub tau: f64,
    pub v_th: f64,
    pub gamma_bar: f64,
    pub beta_bar: f64,
    pub gamma_sq_mean: f64,
    pub reset_gates: Option<Vec<f64>>,
}

impl LayerTape {
    /// Neurons per timestep across the batch.
    pub fn width(&self) -> usize {
        self.batch * self.out_shape.iter().product::<usize>()
    }

    pub fn v_at(&self, t: usize) -> &[f64] {
        let w = self.width();
        &self.v[t * w..(t + 1) * w]
    }

    pub fn s_at(&self, t: usize) -> &[f64] {
        let w = self.width();
        &self.s[t * w..(t + 1) * w]
    }

    pub fn current_at(&self, t: usize) -> &[f64] {
        let w = self.width();
        &self.current[t * w..(t + 1) * w]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StageTape {
    Spiking(LayerTape),
    Pool { input: [usize; 3] },
    Residual { first: LayerTape, second: LayerTape },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TapeCache {
    pub steps: usize,
    pub batch: usize,
    pub sg: SgConfig,
    pub spike_mode: SpikeMode,
    pub stages: Vec<StageTape>,
    pub readout_input: Vec<f64>,
    pub readout_features: usize,
}

impl TapeCache {
    /// Spiking layers in forward order.
    pub fn layers(&self) -> Vec<&LayerTape> {
        let mut out = Vec::new();
        for st in &self.stages {
            match st {
                StageTape::Spiking(l) => out.push(l),
                StageTape::Residual { first, second } => {
                    out.push(first);
                    out.push(second);
                }
                StageTape::Pool { .. } => {}
            }
        }
        out
    }

    pub fn frozen(&self, with_gates: bool) -> Frozen {
        let layers = self.layers();
        Frozen {
            kappas: layers.iter().map(|l| l.kappas.clone()).collect(),
            reset_gates: with_gates.then(|| layers.iter().map(|l| l.s.clone()).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub stages: Vec<Stage>,
    /// `[classes, features]`.
    pub readout: Tensor,
}

impl Model {
    /// Fan-in uniform weights, `gamma = 1`, `beta = 0`, decay `tau` in every layer.
    pub fn new(arch: Architecture, v_th: f64, tau: f64, rng: &mut Rng) -> Result<Self> {
        let shapes = arch.validate()?;
        let neuron = NeuronConfig::new(v_th, tau)?;
        let mut shape = arch.input;
        let mut stages = Vec::with_capacity(arch.layers.len());
        for (spec, &next) in arch.layers.iter().zip(&shapes) {
            let stage = match *spec {
                LayerSpec::Conv { out, kernel, stride, padding } => {
                    let syn = Synapse::new(SynapseKind::Conv(conv_geometry(shape, out, kernel, stride, padding)), rng);
                    Stage::Spiking(SpikingLayer::new(syn, arch.normalize, neuron))
                }
                LayerSpec::Fc { out } => {
                    let syn = Synapse::new(SynapseKind::Fc { in_features: shape.iter().product(), out_features: out }, rng);
                    Stage::Spiking(SpikingLayer::new(syn, arch.normalize, neuron))
                }
                LayerSpec::AvgPool2 => Stage::Pool { input: shape },
                LayerSpec::Residual { out, stride } => {
                    let a = Synapse::new(SynapseKind::Conv(conv_geometry(shape, out, 3, stride, 1)), rng);
                    let b = Synapse::new(SynapseKind::Conv(conv_geometry(next, out, 3, 1, 1)), rng);
                    let shortcut = (stride != 1 || out != shape[0])
                        .then(|| Synapse::new(SynapseKind::Conv(conv_geometry(shape, out, 1, stride, 0)), rng));
                    Stage::Residual(ResidualBlock {
                        first: SpikingLayer::new(a, arch.normalize, neuron),
                        second: SpikingLayer::new(b, arch.normalize, neuron),
                        shortcut,
                    })
                }
            };
            stages.push(stage);
            shape = next;
        }
        let features: usize = shape.iter().product();
        let bound = (1.0 / features as f64).sqrt();
        let readout = rng.uniform_tensor(&[arch.classes, features], -bound, bound);
        Ok(Self { arch, stages, readout })
    }

    pub fn spiking_layers(&self) -> Vec<&SpikingLayer> {
        let mut out = Vec::new();
        for st in &self.stages {
            match st {
                Stage::Spiking(l) => out.push(l),
                Stage::Residual(b) => {
                    out.push(&b.first);
                    out.push(&b.second);
                }
                Stage::Pool { .. } => {}
            }
        }
        out
    }

    pub fn spiking_layers_mut(&mut self) -> Vec<&mut SpikingLayer> {
        let mut out = Vec::new();
        for st in &mut self.stages {
            match st {
                Stage::Spiking(l) => out.push(l),
                Stage::Residual(b) => {
                    out.push(&mut b.first);
                    out.push(&mut b.second);
                }
                Stage::Pool { .. } => {}
            }
        }
        out
    }

    pub fn layer_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, st) in self.stages.iter().enumerate() {
            match st {
                Stage::Spiking(_) => out.push(format!("s{i}")),
                Stage::Residual(_) => {
                    out.push(format!("s{i}.a"));
                    out.push(format!("s{i}.b"));
                }
                Stage::Pool { .. } => {}
            }
        }
        out
    }

    /// Trainable parameters in canonical order: per stage weight, gamma, beta, rho
    /// (residual: first, second, shortcut), then the readout.
    pub fn params(&self) -> Vec<(String, ParamKind, &[f64])> {
        fn layer<'a>(out: &mut Vec<(String, ParamKind, &'a [f64])>, p: &str, l: &'a SpikingLayer) {
            out.push((format!("{p}.weight"), ParamKind::Weight, l.synapse.weight.data()));
            if let Some(n) = &l.norm {
                out.push((format!("{p}.gamma"), ParamKind::Gamma, &n.gamma));
                out.push((format!("{p}.beta"), ParamKind::Beta, &n.beta));
            }
            out.push((format!("{p}.rho"), ParamKind::Rho, std::slice::from_ref(&l.neuron.rho)));
        }
        let mut out = Vec::new();
        for (i, st) in self.stages.iter().enumerate() {
            match st {
                Stage::Spiking(l) => layer(&mut out, &format!("s{i}"), l),
                Stage::Residual(b) => {
                    layer(&mut out, &format!("s{i}.a"), &b.first);
                    layer(&mut out, &format!("s{i}.b"), &b.second);
                    if let Some(sc) = &b.shortcut {
                        out.push((format!("s{i}.shortcut.weight"), ParamKind::Weight, sc.weight.data()));
                    }
                }
                Stage::Pool { .. } => {}
            }
        }
        out.push(("readout.weight".into(), ParamKind::Weight, self.readout.data()));
        out
    }

    /// Mutable view of [`params`](Self::params), same order.
    pub fn params_mut(&mut self) -> Vec<(ParamKind, &mut [f64])> {
        fn layer<'a>(out: &mut Vec<(ParamKind, &'a mut [f64])>, l: &'a mut SpikingLayer) {
            out.push((ParamKind::Weight, l.synapse.weight.data_mut()));
            if let Some(n) = &mut l.norm {
                out.push((ParamKind::Gamma, &mut n.gamma));
                out.push((ParamKind::Beta, &mut n.beta));
            }
            out.push((ParamKind::Rho, std::slice::from_mut(&mut l.neuron.rho)));
        }
        let mut out = Vec::new();
        for st in &mut self.stages {
            match st {
                Stage::Spiking(l) => layer(&mut out, l),
                Stage::Residual(b) => {
                    layer(&mut out, &mut b.first);
                    layer(&mut out, &mut b.second);
                    if let Some(sc) = &mut b.shortcut {
                        out.push((ParamKind::Weight, sc.weight.data_mut()));
                    }
                }
                Stage::Pool { .. } => {}
            }
        }
        out.push((ParamKind::Weight, self.readout.data_mut()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, _, p)| p.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|(_, _, p)| p.iter().copied()).collect()
    }

    /// Mutable access to the `index`-th scalar of [`flat_params`](Self::flat_params).
    pub fn flat_param_mut(&mut self, mut index: usize) -> Option<&mut f64> {
        for (_, slice) in self.params_mut() {
            if index < slice.len() {
                return Some(&mut slice[index]);
            }
            index -= slice.len();
        }
        None
    }

    /// Parameters plus normalization running statistics, for checkpoints.
    pub fn to_named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = Vec::new();
        for (name, _, values) in self.params() {
            let shape = if name.ends_with(".weight") {
                self.weight_shape(&name)
            } else {
                vec![values.len()]
            };
            out.push((name, Tensor::new(shape, values.to_vec()).expect("finite parameters")));
        }
        for (name, layer) in self.layer_names().iter().zip(self.spiking_layers()) {
            if let Some(n) = &layer.norm {
                out.push((format!("{name}.running_mean"), Tensor::new(vec![n.channels()], n.running_mean.clone()).expect("finite")));
                out.push((format!("{name}.running_var"), Tensor::new(vec![n.channels()], n.running_var.clone()).expect("finite")));
            }
        }
        out
    }

    fn weight_shape(&self, name: &str) -> Vec<usize> {
        if name == "readout.weight" {
            return self.readout.shape().to_vec();
        }
        for (i, st) in self.stages.iter().enumerate() {
            match st {
                Stage::Spiking(l) if name == format!("s{i}.weight") => return l.synapse.weight.shape().to_vec(),
                Stage::Residual(b) => {
                    if name == format!("s{i}.a.weight") {
                        return b.first.synapse.weight.shape().to_vec();
                    }
                    if name == format!("s{i}.b.weight") {
                        return b.second.synapse.weight.shape().to_vec();
                    }
                    if let Some(sc) = &b.shortcut {
                        if name == format!("s{i}.shortcut.weight") {
                            return sc.weight.shape().to_vec();
                        }
                    }
                }
                _ => {}
            }
        }
        unreachable!("unknown weight {name}")
    }

    /// Restores values written by [`to_named_tensors`](Self::to_named_tensors).
    pub fn load_named_tensors(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let expected = self.to_named_tensors();
        if entries.len() != expected.len() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint has {} entries, model expects {}",
                entries.len(),
                expected.len()
            )));
        }
        for ((n1, t1), (n2, t2)) in entries.iter().zip(&expected) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(Error::ShapeMismatch(format!("checkpoint entry {n1} {:?} vs model {n2} {:?}", t1.shape(), t2.shape())));
            }
        }
        let n_params = self.params().len();
        for ((_, slice), (_, t)) in self.params_mut().into_iter().zip(entries) {
            slice.copy_from_slice(t.data());
        }
        let mut stats = entries[n_params..].iter();
        for layer in self.spiking_layers_mut() {
            if let Some(n) = &mut layer.norm {
                n.running_mean.copy_from_slice(stats.next().expect("checked length").1.data());
                n.running_var.copy_from_slice(stats.next().expect("checked length").1.data());
            }
        }
        Ok(())
    }

    /// Runs the network on `input: [T, N, C, H, W]` and returns `([N, classes] logits, tape)`.
    pub fn forward(&mut self, input: &Tensor, opts: &ForwardOptions) -> Result<(Tensor, TapeCache)> {
        let shape = input.shape();
        let expect = [self.arch.timesteps, 0, self.arch.input[0], self.arch.input[1], self.arch.input[2]];
        if shape.len() != 5 || shape[0] != expect[0] || shape[2..] != expect[2..] {
            return Err(Error::ShapeMismatch(format!(
                "model expects input [T={}, N, {}, {}, {}], got {shape:?}",
                expect[0], expect[2], expect[3], expect[4]
            )));
        }
        input.check_finite("model input")?;
        let (steps, batch) = (shape[0], shape[1]);
        let mut x = input.data().to_vec();
        let mut cur_shape = self.arch.input;
        let mut tapes = Vec::with_capacity(self.stages.len());
        let mut layer_index = 0;
        for (i, stage) in self.stages.iter_mut().enumerate() {
            match stage {
                Stage::Spiking(layer) => {
                    let tape = run_layer(layer, &format!("s{i}"), layer_index, &x, cur_shape, None, steps, batch, opts)?;
                    layer_index += 1;
                    cur_shape = tape.out_shape;
                    x = tape.s.clone();
                    tapes.push(StageTape::Spiking(tape));
                }
                Stage::Pool { input } => {
                    let [c, h, w] = *input;
                    x = tensor::avgpool2_raw(&x, steps * batch * c, h, w);
                    cur_shape = [c, h / 2, w / 2];
                    tapes.push(StageTape::Pool { input: *input });
                }
                Stage::Residual(block) => {
                    let first = run_layer(&mut block.first, &format!("s{i}.a"), layer_index, &x, cur_shape, None, steps, batch, opts)?;
                    let skip = match &block.shortcut {
                        Some(sc) => sc.apply(&x, steps * batch),
                        None => x.clone(),
                    };
                    let second = run_layer(&mut block.second, &format!("s{i}.b"), layer_index + 1, &first.s, first.out_shape, Some(&skip), steps, batch, opts)?;
                    layer_index += 2;
                    cur_shape = second.out_shape;
                    x = second.s.clone();
                    tapes.push(StageTape::Residual { first, second });
                }
            }
        }
        let features: usize = cur_shape.iter().product();
        let logits = readout_raw(&x, steps, batch, &self.readout);
        let logits = Tensor::new(vec![batch, self.arch.classes], logits)?;
        let tape = TapeCache {
            steps,
            batch,
            sg: opts.sg,
            spike_mode: opts.spike_mode,
            stages: tapes,
            readout_input: x,
            readout_features: features,
        };
        Ok((logits, tape))
    }
}

#[allow(clippy::too_many_arguments)]
fn run_layer(
    layer: &mut SpikingLayer,
    name: &str,
    layer_index: usize,
    x: &[f64],
    in_shape: [usize; 3],
    extra_current: Option<&[f64]>,
    steps: usize,
    batch: usize,
    opts: &ForwardOptions,
) -> Result<LayerTape> {
    let frames = steps * batch;
    let out_shape = layer.synapse.out_shape();
    let mut current = layer.synapse.apply(x, frames);
    if let Some(extra) = extra_current {
        for (c, e) in current.iter_mut().zip(extra) {
            *c += e;
        }
    }
    let (current, norm_cache) = match &mut layer.norm {
        Some(norm) => {
            let t = Tensor::new(vec![steps, batch, out_shape[0], out_shape[1] * out_shape[2]], current)?;
            let (out, cache) = norm.forward(&t, opts.norm_mode)?;
            (out.into_data(), cache)
        }
        None => {
            if current.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("{name} synaptic current")));
            }
            (current, None)
        }
    };
    let tau = layer.tau();
    let v_th = layer.neuron.v_th;
    let gamma_bar = layer.gamma_bar();
    let kappas: Vec<f64> = match opts.frozen {
        Some(f) => f.kappas.get(layer_index).cloned().ok_or_else(|| Error::MissingTape(format!("frozen widths for {name}")))?,
        None => (1..=steps).map(|t| opts.sg.width_at(tau, gamma_bar, v_th, t)).collect(),
    };
    let gates = match opts.frozen.and_then(|f| f.reset_gates.as_ref()) {
        Some(g) => Some(g.get(layer_index).cloned().ok_or_else(|| Error::MissingTape(format!("frozen reset gates for {name}")))?),
        None => None,
    };
    let width = batch * out_shape.iter().product::<usize>();
    let sg = opts.sg;
    let (v, s) = match opts.spike_mode {
        SpikeMode::Hard => neuron::unroll_with(&current, steps, width, tau, gates.as_deref(), |_, v| if v >= v_th { 1.0 } else { 0.0 }),
        SpikeMode::Relaxed => neuron::unroll_with(&current, steps, width, tau, gates.as_deref(), |t, v| sg.relaxed_spike(v, v_th, kappas[t])),
    };
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("{name} membrane potential")));
    }
    let (beta_bar, gamma_sq_mean) = match &layer.norm {
        Some(n) => (n.beta_bar(), n.gamma_sq_mean()),
        None => (0.0, 1.0),
    };
    Ok(LayerTape {
        name: name.to_string(),
        steps,
        batch,
        in_shape,
        out_shape,
        input: x.to_vec(),
        norm_cache,
        current,
        v,
        s,
        kappas,
        tau,
        v_th,
        gamma_bar,
        beta_bar,
        gamma_sq_mean,
        reset_gates: gates,
    })
}

fn readout_raw(x: &[f64], steps: usize, batch: usize, weights: &Tensor) -> Vec<f64> {
    let classes = weights.shape()[0];
    let per_step = tensor::linear(x, steps * batch, weights);
    let mut logits = vec![0.0; batch * classes];
    for t in 0..steps {
        for (l, p) in logits.iter_mut().zip(&per_step[t * batch * classes..(t + 1) * batch * classes]) {
            *l += p;
        }
    }
    let inv = 1.0 / steps as f64;
    for l in &mut logits {
        *l *= inv;
    }
    logits
}

/// Non-firing readout: `o_i = (1/T) sum_t sum_j w_ij S_j(t)` for `spikes: [T, N, F...]`
/// and `weights: [classes, F]`.
pub fn readout(spikes: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let shape = spikes.shape();
    if shape.len() < 3 || weights.rank() != 2 {
        return Err(Error::ShapeMismatch(format!("readout spikes {shape:?} weights {:?}", weights.shape())));
    }
    let features: usize = shape[2..].iter().product();
    if features != weights.shape()[1] {
        return Err(Error::ShapeMismatch(format!("readout expects {} features, got {features}", weights.shape()[1])));
    }
    let out = readout_raw(spikes.data(), shape[0], shape[1], weights);
    let out = Tensor::new(vec![shape[1], weights.shape()[0]], out)?;
    Ok(out)
}
