//! Network specification, parameters and forward passes.
//!
//! A parametric layer computes `h = (W (f ∘ z) + b) ∘ s` followed by its
//! activation, where `z` multiplies the incoming signal and `s` the
//! outgoing pre-activation. Absent multipliers are fixed at 1. Conv layers
//! carry one multiplier per channel.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::{self, Padding};
use crate::autodiff::{Gradients, Graph, NodeId, Unary};
use crate::error::{Error, Result};
use crate::posterior::{LatentLayout, LatentSample, LatentStructure, MoGPosterior};
use crate::tensor::Tensor;

/// Number of posterior samples used for prediction when unspecified.
pub const DEFAULT_PREDICTION_SAMPLES: usize = 30;

// rows per graph during batched inference
const INFERENCE_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Softplus,
}

impl Activation {
    fn unary(self) -> Option<Unary> {
        match self {
            Activation::Identity => None,
            Activation::Relu => Some(Unary::Relu),
            Activation::Tanh => Some(Unary::Tanh),
            Activation::Softplus => Some(Unary::Softplus),
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        self.unary().map_or(x, |u| u.apply(x))
    }

    /// Derivative with respect to the pre-activation.
    pub fn derivative(self, h: f64) -> f64 {
        self.unary().map_or(1.0, |u| u.derivative(h, u.apply(h)))
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "linear" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "softplus" => Ok(Activation::Softplus),
            other => Err(Error::invalid(format!("unknown activation `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Fully connected; inputs of higher rank are flattened first.
    Dense {
        inputs: usize,
        outputs: usize,
        activation: Activation,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        activation: Activation,
    },
    GlobalAvgPool,
}

impl LayerSpec {
    pub fn is_parametric(&self) -> bool {
        !matches!(self, LayerSpec::GlobalAvgPool)
    }

    pub fn activation(&self) -> Activation {
        match self {
            LayerSpec::Dense { activation, .. } | LayerSpec::Conv2d { activation, .. } => *activation,
            LayerSpec::GlobalAvgPool => Activation::Identity,
        }
    }

    /// `(incoming, outgoing)` node counts of a parametric layer.
    pub fn node_counts(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Dense { inputs, outputs, .. } => Some((inputs, outputs)),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                ..
            } => Some((in_channels, out_channels)),
            LayerSpec::GlobalAvgPool => None,
        }
    }
}

/// Architecture of a classifier: input shape (without batch axis), class
/// count and an ordered list of layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Dense network with the given hidden widths and an identity output.
    pub fn mlp(input_shape: Vec<usize>, hidden: &[usize], classes: usize, activation: Activation) -> Self {
        let mut layers = Vec::new();
        let mut width = input_shape.iter().product();
        for &h in hidden {
            layers.push(LayerSpec::Dense {
                inputs: width,
                outputs: h,
                activation,
            });
            width = h;
        }
        layers.push(LayerSpec::Dense {
            inputs: width,
            outputs: classes,
            activation: Activation::Identity,
        });
        NetworkSpec {
            input_shape,
            classes,
            layers,
        }
    }

    /// Parses a comma separated layer list such as
    /// `conv:16:3:1:same:relu, conv:32:3:2:same:relu, gap, dense:10`.
    ///
    /// Input widths are inferred; the last layer's width is the class count.
    pub fn parse(input_shape: Vec<usize>, text: &str) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Config(format!("bad input shape {input_shape:?}")));
        }
        let bad = |item: &str| Error::Config(format!("cannot parse layer `{item}`"));
        let mut shape = input_shape.clone();
        let mut layers = Vec::new();
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let parts: Vec<&str> = item.split(':').map(str::trim).collect();
            let num = |i: usize| -> Result<usize> {
                parts
                    .get(i)
                    .and_then(|p| p.parse().ok())
                    .filter(|&v| v > 0)
                    .ok_or_else(|| bad(item))
            };
            let act = |i: usize| -> Result<Activation> {
                parts.get(i).map_or(Ok(Activation::Identity), |p| p.parse())
            };
            let layer = match parts[0] {
                "dense" if parts.len() <= 3 => LayerSpec::Dense {
                    inputs: shape.iter().product(),
                    outputs: num(1)?,
                    activation: act(2)?,
                },
                "conv" if (5..=6).contains(&parts.len()) => {
                    let padding = match parts[4] {
                        "same" => Padding::Same,
                        "valid" => Padding::Valid,
                        _ => return Err(bad(item)),
                    };
                    LayerSpec::Conv2d {
                        in_channels: shape[0],
                        out_channels: num(1)?,
                        kernel: num(2)?,
                        stride: num(3)?,
                        padding,
                        activation: act(5)?,
                    }
                }
                "gap" if parts.len() == 1 => LayerSpec::GlobalAvgPool,
                _ => return Err(bad(item)),
            };
            shape = layer_output_shape(&layer, &shape).map_err(|e| Error::Config(e.to_string()))?;
            layers.push(layer);
        }
        let classes = match shape.as_slice() {
            [c] => *c,
            _ => return Err(Error::Config("last layer must produce a flat vector of logits".into())),
        };
        let spec = NetworkSpec {
            input_shape,
            classes,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Renders the layer list in the grammar accepted by [`NetworkSpec::parse`].
    pub fn layers_string(&self) -> String {
        let items: Vec<String> = self
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::Dense { outputs, activation, .. } => format!("dense:{outputs}:{activation}"),
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    activation,
                    ..
                } => {
                    let pad = match padding {
                        Padding::Same => "same",
                        Padding::Valid => "valid",
                    };
                    format!("conv:{out_channels}:{kernel}:{stride}:{pad}:{activation}")
                }
                LayerSpec::GlobalAvgPool => "gap".into(),
            })
            .collect();
        items.join(",")
    }

    /// Shapes of every layer output without the batch axis; entry 0 is the
    /// input shape.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        if self.layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::shape(format!("bad input shape {:?}", self.input_shape)));
        }
        let mut shapes = vec![self.input_shape.clone()];
        for layer in &self.layers {
            let next = layer_output_shape(layer, shapes.last().unwrap())?;
            shapes.push(next);
        }
        if shapes.last().unwrap() != &[self.classes] {
            return Err(Error::shape(format!(
                "final layer produces {:?}, expected {} logits",
                shapes.last().unwrap(),
                self.classes
            )));
        }
        Ok(shapes)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// `(incoming, outgoing)` node counts of each parametric layer.
    pub fn node_counts(&self) -> Vec<(usize, usize)> {
        self.layers.iter().filter_map(LayerSpec::node_counts).collect()
    }

    pub fn latent_layout(&self, structure: LatentStructure) -> LatentLayout {
        LatentLayout::new(structure, &self.node_counts())
    }
}

fn layer_output_shape(layer: &LayerSpec, input: &[usize]) -> Result<Vec<usize>> {
    match *layer {
        LayerSpec::Dense { inputs, outputs, .. } => {
            let width: usize = input.iter().product();
            if width != inputs || outputs == 0 {
                return Err(Error::shape(format!(
                    "dense layer expects {inputs} inputs, previous layer gives {input:?}"
                )));
            }
            Ok(vec![outputs])
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => {
            let &[c, h, w] = input else {
                return Err(Error::shape(format!("conv layer needs CHW input, got {input:?}")));
            };
            if c != in_channels || out_channels == 0 {
                return Err(Error::shape(format!(
                    "conv layer expects {in_channels} channels, got {input:?}"
                )));
            }
            let geom = kernels::ConvGeom::new(
                &[1, c, h, w],
                &[out_channels, in_channels, kernel, kernel],
                stride,
                padding,
            )?;
            Ok(geom.out_shape()[1..].to_vec())
        }
        LayerSpec::GlobalAvgPool => match input {
            [c, _, _] => Ok(vec![*c]),
            _ => Err(Error::shape(format!("global pool needs CHW input, got {input:?}"))),
        },
    }
}

/// Weight and bias of one parametric layer. Dense weights are stored
/// `[inputs, outputs]`, conv kernels `[out, in, k, k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// A network with point-estimated parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<Option<LayerParams>>,
}

fn expected_param_shapes(layer: &LayerSpec) -> Option<(Vec<usize>, Vec<usize>)> {
    match *layer {
        LayerSpec::Dense { inputs, outputs, .. } => Some((vec![inputs, outputs], vec![outputs])),
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            ..
        } => Some((vec![out_channels, in_channels, kernel, kernel], vec![out_channels])),
        LayerSpec::GlobalAvgPool => None,
    }
}

impl Network {
    /// He-normal weights for rectifying activations, `1/fan_in` variance
    /// otherwise; zero biases.
    pub fn init<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let params = spec
            .layers
            .iter()
            .map(|layer| {
                let (wshape, bshape) = expected_param_shapes(layer)?;
                let fan_in: usize = wshape.iter().product::<usize>()
                    / match layer {
                        LayerSpec::Dense { outputs, .. } => *outputs,
                        _ => wshape[0],
                    };
                let gain = match layer.activation() {
                    Activation::Relu | Activation::Softplus => 2.0,
                    _ => 1.0,
                };
                let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("finite std");
                let n: usize = wshape.iter().product();
                let data = (0..n).map(|_| normal.sample(rng)).collect();
                Some(LayerParams {
                    weight: Tensor::from_parts(wshape, data),
                    bias: Tensor::zeros(&bshape),
                })
            })
            .collect();
        Ok(Network { spec, params })
    }

    pub fn from_params(spec: NetworkSpec, params: Vec<Option<LayerParams>>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.layers.len() {
            return Err(Error::shape(format!(
                "{} parameter slots for {} layers",
                params.len(),
                spec.layers.len()
            )));
        }
        for (i, (layer, p)) in spec.layers.iter().zip(&params).enumerate() {
            match (expected_param_shapes(layer), p) {
                (None, None) => {}
                (Some((w, b)), Some(p)) if p.weight.shape() == w && p.bias.shape() == b => {}
                _ => return Err(Error::shape(format!("parameters of layer {i} do not match its spec"))),
            }
        }
        Ok(Network { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Option<LayerParams>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<LayerParams>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().flatten().map(|p| p.weight.len() + p.bias.len()).sum()
    }

    /// `||θ||²` over all weights and biases.
    pub fn squared_norm(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .map(|p| p.weight.squared_norm() + p.bias.squared_norm())
            .sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != self.spec.input_shape.len() + 1 || x.shape()[1..] != self.spec.input_shape[..] {
            return Err(Error::shape(format!(
                "input {:?} does not match network input {:?} with a batch axis",
                x.shape(),
                self.spec.input_shape
            )));
        }
        Ok(())
    }

    fn check_layout(&self, layout: &LatentLayout, sample: &LatentSample) -> Result<()> {
        if layout.layers().len() != self.spec.node_counts().len() || sample.values.len() != layout.dim() {
            return Err(Error::shape(format!(
                "latent sample of length {} does not match the network layout",
                sample.values.len()
            )));
        }
        let expected = self.spec.latent_layout(layout.structure());
        if &expected != layout {
            return Err(Error::shape("latent layout was built for a different network"));
        }
        Ok(())
    }

    /// Adds weights and biases to `g`, as named inputs when `trainable`.
    pub fn bind_params(&self, g: &mut Graph, trainable: bool) -> Result<ParamNodes> {
        let mut nodes = Vec::with_capacity(self.params.len());
        for (i, p) in self.params.iter().enumerate() {
            nodes.push(match p {
                None => None,
                Some(p) if trainable => Some((
                    g.input(format!("weight.{i}"), p.weight.clone())?,
                    g.input(format!("bias.{i}"), p.bias.clone())?,
                )),
                Some(p) => Some((g.constant(p.weight.clone()), g.constant(p.bias.clone()))),
            });
        }
        Ok(ParamNodes(nodes))
    }

    /// Adds one latent sample to `g` split per layer, each slice shaped to
    /// broadcast over its layer's activations.
    pub fn bind_latents(
        &self,
        g: &mut Graph,
        layout: &LatentLayout,
        sample: &LatentSample,
        trainable: Option<&str>,
    ) -> Result<LatentNodes> {
        self.check_layout(layout, sample)?;
        let mut slots = layout.layers().iter();
        let mut nodes = Vec::with_capacity(self.spec.layers.len());
        for (i, layer) in self.spec.layers.iter().enumerate() {
            if !layer.is_parametric() {
                nodes.push((None, None));
                continue;
            }
            let slot = slots.next().expect("layout matches layers");
            let conv = matches!(layer, LayerSpec::Conv2d { .. });
            let mut bind = |span: Option<crate::posterior::Span>, dir: &str| -> Result<Option<NodeId>> {
                let Some(span) = span else { return Ok(None) };
                let values = sample.values[span.range()].to_vec();
                let shape = if conv { vec![span.len, 1, 1] } else { vec![span.len] };
                let t = Tensor::from_parts(shape, values);
                Ok(Some(match trainable {
                    Some(tag) => g.input(format!("{tag}.{dir}.{i}"), t)?,
                    None => g.constant(t),
                }))
            };
            let z = bind(slot.incoming, "in")?;
            let s = bind(slot.outgoing, "out")?;
            nodes.push((z, s));
        }
        Ok(LatentNodes(nodes))
    }

    /// `W x + b` of layer 0 when it is parametric; reusable across latent
    /// samples that carry no incoming multiplier on that layer.
    pub fn first_affine(&self, g: &mut Graph, params: &ParamNodes, x: NodeId) -> Result<Option<NodeId>> {
        if !self.spec.layers[0].is_parametric() {
            return Ok(None);
        }
        self.affine(g, params, 0, x).map(Some)
    }

    fn affine(&self, g: &mut Graph, params: &ParamNodes, layer: usize, input: NodeId) -> Result<NodeId> {
        let (w, b) = params.0[layer].ok_or_else(|| Error::invalid("layer has no parameters"))?;
        let batch = g.shape(input)[0];
        match self.spec.layers[layer] {
            LayerSpec::Dense { inputs, outputs, .. } => {
                let flat = if g.shape(input).len() == 2 {
                    input
                } else {
                    g.reshape(input, &[batch, inputs])?
                };
                let y = g.matmul(flat, w)?;
                let bb = g.broadcast(b, &[batch, outputs])?;
                g.add(y, bb)
            }
            LayerSpec::Conv2d {
                out_channels,
                stride,
                padding,
                ..
            } => {
                let y = g.conv2d(input, w, stride, padding)?;
                let b3 = g.reshape(b, &[out_channels, 1, 1])?;
                let shape = g.shape(y).to_vec();
                let bb = g.broadcast(b3, &shape)?;
                g.add(y, bb)
            }
            LayerSpec::GlobalAvgPool => unreachable!(),
        }
    }

    /// Records the forward pass in `g`. `shared_first` may hold the result
    /// of [`Network::first_affine`] for the same input.
    pub fn build_forward(
        &self,
        g: &mut Graph,
        params: &ParamNodes,
        x: NodeId,
        latents: Option<&LatentNodes>,
        shared_first: Option<NodeId>,
    ) -> Result<ForwardNodes> {
        let mut pre = Vec::with_capacity(self.spec.layers.len());
        let mut post = vec![x];
        let mut cur = x;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            if !layer.is_parametric() {
                cur = g.global_avg_pool(cur)?;
                pre.push(None);
                post.push(cur);
                continue;
            }
            let (z, s) = latents.map_or((None, None), |l| l.0[i]);
            let mut h = match (i, shared_first, z) {
                (0, Some(shared), None) => shared,
                _ => {
                    if let (LayerSpec::Dense { inputs, .. }, Some(_)) = (layer, z) {
                        let batch = g.shape(cur)[0];
                        if g.shape(cur).len() != 2 {
                            cur = g.reshape(cur, &[batch, *inputs])?;
                        }
                    }
                    let input = match z {
                        Some(z) => {
                            let shape = g.shape(cur).to_vec();
                            let zb = g.broadcast(z, &shape)?;
                            g.mul(cur, zb)?
                        }
                        None => cur,
                    };
                    self.affine(g, params, i, input)?
                }
            };
            if let Some(s) = s {
                let shape = g.shape(h).to_vec();
                let sb = g.broadcast(s, &shape)?;
                h = g.mul(h, sb)?;
            }
            pre.push(Some(h));
            cur = match layer.activation().unary() {
                Some(u) => g.unary(u, h)?,
                None => h,
            };
            post.push(cur);
        }
        Ok(ForwardNodes { pre, post })
    }

    fn run(
        &self,
        x: &Tensor,
        latent: Option<(&LatentLayout, &LatentSample)>,
        upto: usize,
    ) -> Result<(Graph, ForwardNodes)> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let params = self.bind_params(&mut g, false)?;
        let xn = g.constant(x.clone());
        let latents = match latent {
            Some((layout, sample)) => Some(self.bind_latents(&mut g, layout, sample, None)?),
            None => None,
        };
        let truncated = Network {
            spec: NetworkSpec {
                layers: self.spec.layers[..upto].to_vec(),
                ..self.spec.clone()
            },
            params: Vec::new(),
        };
        let fwd = truncated.build_forward(&mut g, &params, xn, latents.as_ref(), None)?;
        Ok((g, fwd))
    }

    /// Logits of the plain network.
    pub fn forward_deterministic(&self, x: &Tensor) -> Result<Tensor> {
        self.layer_output(x, self.spec.depth(), None)
    }

    /// Logits with latent multipliers applied.
    pub fn forward_stochastic(&self, layout: &LatentLayout, x: &Tensor, sample: &LatentSample) -> Result<Tensor> {
        self.layer_output(x, self.spec.depth(), Some((layout, sample)))
    }

    /// Post-activation output of layer `layer` (0 is the input itself).
    pub fn layer_output(
        &self,
        x: &Tensor,
        layer: usize,
        latent: Option<(&LatentLayout, &LatentSample)>,
    ) -> Result<Tensor> {
        if layer > self.spec.depth() {
            return Err(Error::invalid(format!(
                "layer {layer} out of range 0..={}",
                self.spec.depth()
            )));
        }
        let (g, fwd) = self.run(x, latent, layer)?;
        Ok(g.value(fwd.post[layer]).clone())
    }

    /// Pre- and post-activations of every layer of the plain network.
    pub fn trace(&self, x: &Tensor) -> Result<Trace> {
        let (g, fwd) = self.run(x, None, self.spec.depth())?;
        Ok(Trace {
            pre: fwd.pre.iter().map(|p| p.map(|id| g.value(id).clone())).collect(),
            post: fwd.post.iter().map(|&id| g.value(id).clone()).collect(),
        })
    }

    /// Logits for `samples.len()` latent draws on the same input, shaped
    /// `[S, batch, classes]` flattened as a list.
    pub fn forward_samples(&self, layout: &LatentLayout, x: &Tensor, samples: &[LatentSample]) -> Result<Vec<Tensor>> {
        self.map_samples(layout, x, samples, |_, t| Ok(t.clone()))
    }

    fn map_samples<T>(
        &self,
        layout: &LatentLayout,
        x: &Tensor,
        samples: &[LatentSample],
        mut f: impl FnMut(usize, &Tensor) -> Result<T>,
    ) -> Result<Vec<T>> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let params = self.bind_params(&mut g, false)?;
        let xn = g.constant(x.clone());
        let shared = if layout.structure().has_incoming() {
            None
        } else {
            self.first_affine(&mut g, &params, xn)?
        };
        let base = g.len();
        let mut out = Vec::with_capacity(samples.len());
        for (i, sample) in samples.iter().enumerate() {
            g.truncate(base);
            let lat = self.bind_latents(&mut g, layout, sample, None)?;
            let fwd = self.build_forward(&mut g, &params, xn, Some(&lat), shared)?;
            out.push(f(i, g.value(*fwd.post.last().unwrap()))?);
        }
        Ok(out)
    }

    /// Average of softmax outputs over the given latent draws.
    pub fn predictive_mean_with(&self, layout: &LatentLayout, x: &Tensor, samples: &[LatentSample]) -> Result<Tensor> {
        if samples.is_empty() {
            return Err(Error::invalid("predictive mean needs at least one sample"));
        }
        self.check_input(x)?;
        let n = x.rows();
        let classes = self.spec.classes;
        let mut acc = vec![0.0; n * classes];
        let start_rows: Vec<usize> = (0..n).step_by(INFERENCE_CHUNK).collect();
        for start in start_rows {
            let end = (start + INFERENCE_CHUNK).min(n);
            let chunk = if start == 0 && end == n {
                x.clone()
            } else {
                x.select_rows(&(start..end).collect::<Vec<_>>())
            };
            self.map_samples(layout, &chunk, samples, |_, logits| {
                let p = kernels::softmax_rows(logits)?;
                for (a, v) in acc[start * classes..end * classes].iter_mut().zip(p.data()) {
                    *a += v;
                }
                Ok(())
            })?;
        }
        let inv = 1.0 / samples.len() as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        Tensor::new(vec![n, classes], acc)
    }

    /// Predictive class probabilities averaged over `samples` posterior draws.
    pub fn predictive_mean<R: Rng + ?Sized>(
        &self,
        posterior: &MoGPosterior,
        x: &Tensor,
        samples: usize,
        rng: &mut R,
    ) -> Result<Tensor> {
        let draws: Vec<LatentSample> = (0..samples).map(|_| posterior.sample(rng)).collect();
        self.predictive_mean_with(posterior.layout(), x, &draws)
    }

    /// Collects `d objective / d θ` from a backward pass over trainable
    /// parameter nodes.
    pub fn param_grads(&self, params: &ParamNodes, grads: &Gradients) -> Vec<Option<LayerParams>> {
        params
            .0
            .iter()
            .map(|p| {
                p.map(|(w, b)| LayerParams {
                    weight: grads.get(w).cloned().expect("input gradient"),
                    bias: grads.get(b).cloned().expect("input gradient"),
                })
            })
            .collect()
    }
}

/// Parameter nodes of a network recorded in a graph.
#[derive(Debug, Clone)]
pub struct ParamNodes(Vec<Option<(NodeId, NodeId)>>);

/// Per-layer `(incoming, outgoing)` latent multiplier nodes.
#[derive(Debug, Clone)]
pub struct LatentNodes(Vec<(Option<NodeId>, Option<NodeId>)>);

impl LatentNodes {
    /// Flattens the gradients of the latent nodes into layout order.
    pub fn gather_grad(&self, grads: &Gradients, layout: &LatentLayout) -> Vec<f64> {
        let mut out = vec![0.0; layout.dim()];
        let slots = self.0.iter().filter(|(z, s)| z.is_some() || s.is_some());
        for ((z, s), slot) in slots.zip(layout.layers()) {
            for (node, span) in [(z, slot.incoming), (s, slot.outgoing)] {
                if let (Some(node), Some(span)) = (node, span) {
                    let g = grads.get(*node).expect("latent gradient");
                    out[span.range()].copy_from_slice(g.data());
                }
            }
        }
        out
    }
}

/// Node ids produced by [`Network::build_forward`]. `post[0]` is the input
/// and `post[l]` the output of layer `l`; `pre[l - 1]` is layer `l`'s
/// pre-activation.
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    pub pre: Vec<Option<NodeId>>,
    pub post: Vec<NodeId>,
}

impl ForwardNodes {
    pub fn logits(&self) -> NodeId {
        *self.post.last().unwrap()
    }
}

/// Values of a deterministic forward pass, indexed like [`ForwardNodes`].
#[derive(Debug, Clone)]
pub struct Trace {
    pub pre: Vec<Option<Tensor>>,
    pub post: Vec<Tensor>,
}

/// A trained network together with its latent posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub network: Network,
    pub posterior: MoGPosterior,
}

impl Model {
    pub fn new(network: Network, posterior: MoGPosterior) -> Result<Self> {
        let expected = network.spec().latent_layout(posterior.layout().structure());
        if &expected != posterior.layout() {
            return Err(Error::shape("posterior layout does not match the network"));
        }
        Ok(Model { network, posterior })
    }

    pub fn predictive_mean<R: Rng + ?Sized>(&self, x: &Tensor, samples: usize, rng: &mut R) -> Result<Tensor> {
        self.network.predictive_mean(&self.posterior, x, samples, rng)
    }
}
