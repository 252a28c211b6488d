use std::collections::HashMap;

use super::kernels::{self, ConvGeom, Padding};
use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Named tensors bound to graph inputs.
pub type Bindings = HashMap<String, Tensor>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise unary operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Tanh,
    Softplus,
    Exp,
    Log,
    Sqrt,
    Square,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Relu => "relu",
            Unary::Tanh => "tanh",
            Unary::Softplus => "softplus",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Sqrt => "sqrt",
            Unary::Square => "square",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Tanh => x.tanh(),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
        }
    }

    /// Derivative given the input `x` and output `y = apply(x)`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            // subgradient 0 at the kink
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Sqrt => 0.5 / y,
            Unary::Square => 2.0 * x,
        }
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input(String),
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: Padding,
    },
    GlobalAvgPool(NodeId),
    Unary(Unary, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Broadcast(NodeId),
    Reshape(NodeId),
    Softmax(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: NodeId,
    },
    Gather {
        input: NodeId,
        indices: NodeId,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Unary(u, _) => u.name(),
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Broadcast(_) => "broadcast",
            Op::Reshape(_) => "reshape",
            Op::Softmax(_) => "softmax",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Gather { .. } => "gather",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// A recorded expression graph with eager forward evaluation.
///
/// Nodes are appended in topological order and computed as they are added.
/// [`Graph::evaluate`] re-runs the whole graph in one pass with new values
/// for named inputs, so a graph can be built once and reused. Inputs are
/// differentiable; constants are not.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: HashMap<String, NodeId>,
    outputs: Vec<(String, NodeId)>,
    stale: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node at or after position `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.inputs.retain(|_, id| id.0 < len);
        self.outputs.retain(|(_, id)| id.0 < len);
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    /// Declares a named, differentiable input with its initial value.
    pub fn input(&mut self, name: impl Into<String>, value: Tensor) -> Result<NodeId> {
        let name = name.into();
        if self.inputs.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate graph input `{name}`")));
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Input(name.clone()),
            value,
            requires_grad: true,
        });
        self.inputs.insert(name, id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Constant,
            value,
            requires_grad: false,
        });
        id
    }

    /// Marks a node as a named output returned by [`Graph::evaluate`].
    pub fn set_output(&mut self, name: impl Into<String>, id: NodeId) {
        self.outputs.push((name.into(), id));
    }

    fn push(&mut self, op: Op, parents: &[NodeId]) -> Result<NodeId> {
        let value = forward(&op, &self.nodes)?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, factor), &[a])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b), &[a, b])
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        self.push(
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            &[input, kernel],
        )
    }

    pub fn global_avg_pool(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::GlobalAvgPool(a), &[a])
    }

    pub fn unary(&mut self, kind: Unary, a: NodeId) -> Result<NodeId> {
        self.push(Op::Unary(kind, a), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Relu, a)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Tanh, a)
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Softplus, a)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Log, a)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Sqrt, a)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Square, a)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(a), &[a])
    }

    /// Expands `a` to `shape`; axes align from the right and source
    /// extents must be 1 or equal to the target extent.
    pub fn broadcast(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        kernels::check_broadcast(self.shape(a), shape)?;
        let value = kernels::broadcast(self.value(a), shape)?;
        self.push_with_value(Op::Broadcast(a), &[a], value)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if numel(shape) != self.value(a).len() {
            return Err(Error::shape(format!(
                "reshape {:?} to {shape:?}",
                self.shape(a)
            )));
        }
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        self.push_with_value(Op::Reshape(a), &[a], value)
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax(a), &[a])
    }

    /// Fused per-row `-log softmax(logits)[label]`; `labels` holds class
    /// indices as integral values and receives no gradient.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: NodeId) -> Result<NodeId> {
        self.push(Op::SoftmaxCrossEntropy { logits, labels }, &[logits])
    }

    /// Picks `input[r, indices[r]]` for every row `r`.
    pub fn gather(&mut self, input: NodeId, indices: NodeId) -> Result<NodeId> {
        self.push(Op::Gather { input, indices }, &[input])
    }

    // Ops whose target shape is not derivable from parent values alone
    // store it in the computed value; re-evaluation reads it from there.
    fn push_with_value(&mut self, op: Op, parents: &[NodeId], value: Tensor) -> Result<NodeId> {
        check_finite(&op, &value)?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(id)
    }

    /// Re-runs the graph in one topological pass with new input values.
    ///
    /// Inputs absent from `bindings` keep their current values. Returns the
    /// values of the nodes registered with [`Graph::set_output`].
    pub fn evaluate(&mut self, bindings: &Bindings) -> Result<HashMap<String, Tensor>> {
        for (name, value) in bindings {
            let id = self
                .inputs
                .get(name)
                .ok_or_else(|| Error::UnknownInput(name.clone()))?;
            let expected = self.nodes[id.0].value.shape();
            if expected != value.shape() {
                return Err(Error::shape(format!(
                    "input `{name}` declared {expected:?}, bound {:?}",
                    value.shape()
                )));
            }
        }
        self.stale = true;
        for i in 0..self.nodes.len() {
            let (done, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            match &node.op {
                Op::Input(name) => {
                    if let Some(v) = bindings.get(name) {
                        node.value = v.clone();
                    }
                }
                Op::Constant => {}
                Op::Broadcast(a) => {
                    let shape = node.value.shape().to_vec();
                    node.value = kernels::broadcast(&done[a.0].value, &shape)?;
                    check_finite(&node.op, &node.value)?;
                }
                Op::Reshape(a) => {
                    let shape = node.value.shape().to_vec();
                    node.value = done[a.0].value.clone().reshape(shape)?;
                }
                op => node.value = forward(op, done)?,
            }
        }
        self.stale = false;
        Ok(self
            .outputs
            .iter()
            .map(|(name, id)| (name.clone(), self.nodes[id.0].value.clone()))
            .collect())
    }

    /// Reverse-mode sweep from a scalar node.
    ///
    /// Gradients accumulate by summation over fan-out. Every input node gets
    /// a gradient; inputs with no path to `seed` get zeros.
    pub fn backward(&self, seed: NodeId) -> Result<Gradients> {
        if self.stale {
            return Err(Error::NotEvaluated);
        }
        let seed_value = &self.nodes[seed.0].value;
        if seed_value.len() != 1 {
            return Err(Error::SeedNotScalar(seed_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[seed.0] = Some(Tensor::ones(seed_value.shape()));
        for i in (0..=seed.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Input(_)) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: NodeId, delta: Tensor) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Input(_) | Op::Constant => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y)?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y)?);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g.data(), false, vb.data(), true, &mut da, false);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, va.data(), true, g.data(), false, &mut db, false);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (vx, vk) = (val(*input), val(*kernel));
                let geom = ConvGeom::new(vx.shape(), vk.shape(), *stride, *padding)?;
                let (dx, dk) = kernels::conv2d_backward(
                    &geom,
                    vx.data(),
                    vk.data(),
                    g.data(),
                    self.wants(*input),
                    self.wants(*kernel),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, Tensor::from_parts(vx.shape().to_vec(), dx));
                }
                if let Some(dk) = dk {
                    self.accumulate(grads, *kernel, Tensor::from_parts(vk.shape().to_vec(), dk));
                }
            }
            Op::GlobalAvgPool(a) => {
                let shape = val(*a).shape().to_vec();
                let d = kernels::global_avg_pool_backward(&shape, g.data());
                self.accumulate(grads, *a, Tensor::from_parts(shape, d));
            }
            Op::Unary(kind, a) => {
                let x = val(*a);
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(y.data()))
                    .map(|(&gv, (&xv, &yv))| gv * kind.derivative(xv, yv))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), data));
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), gv));
            }
            Op::Mean(a) => {
                let x = val(*a);
                let gv = g.data()[0] / x.len() as f64;
                self.accumulate(grads, *a, Tensor::full(x.shape(), gv));
            }
            Op::Broadcast(a) => {
                let from = val(*a).shape().to_vec();
                let d = kernels::broadcast_backward(&from, node.value.shape(), g.data());
                self.accumulate(grads, *a, Tensor::from_parts(from, d));
            }
            Op::Reshape(a) => {
                let shape = val(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let cols = y.shape()[1];
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d
                    .chunks_exact_mut(cols)
                    .zip(y.data().chunks_exact(cols))
                    .zip(g.data().chunks_exact(cols))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(y.shape().to_vec(), d));
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let l = val(*logits);
                let cols = l.shape()[1];
                let labels = kernels::tensor_to_indices(val(*labels))?;
                let mut d = l.data().to_vec();
                for ((row, &y), &gv) in d.chunks_exact_mut(cols).zip(&labels).zip(g.data()) {
                    kernels::softmax_in_place(row);
                    row[y] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= gv;
                    }
                }
                self.accumulate(grads, *logits, Tensor::from_parts(l.shape().to_vec(), d));
            }
            Op::Gather { input, indices } => {
                let x = val(*input);
                let cols = x.shape()[1];
                let idx = kernels::tensor_to_indices(val(*indices))?;
                let mut d = vec![0.0; x.len()];
                for (r, (&j, &gv)) in idx.iter().zip(g.data()).enumerate() {
                    d[r * cols + j] += gv;
                }
                self.accumulate(grads, *input, Tensor::from_parts(x.shape().to_vec(), d));
            }
        }
        Ok(())
    }
}

fn check_finite(op: &Op, value: &Tensor) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op: op.name() })
    }
}

fn forward(op: &Op, nodes: &[Node]) -> Result<Tensor> {
    let v = |id: &NodeId| &nodes[id.0].value;
    let out = match op {
        Op::Input(_) | Op::Constant | Op::Broadcast(_) | Op::Reshape(_) => {
            unreachable!("handled by the caller")
        }
        Op::Add(a, b) => v(a).zip_map(v(b), |x, y| x + y)?,
        Op::Sub(a, b) => v(a).zip_map(v(b), |x, y| x - y)?,
        Op::Mul(a, b) => v(a).zip_map(v(b), |x, y| x * y)?,
        Op::Scale(a, c) => {
            let c = *c;
            v(a).map(|x| x * c)
        }
        Op::MatMul(a, b) => kernels::matmul(v(a), v(b))?,
        Op::Conv2d {
            input,
            kernel,
            stride,
            padding,
        } => kernels::conv2d(v(input), v(kernel), *stride, *padding)?,
        Op::GlobalAvgPool(a) => kernels::global_avg_pool(v(a))?,
        Op::Unary(kind, a) => {
            let k = *kind;
            v(a).map(|x| k.apply(x))
        }
        Op::Sum(a) => Tensor::scalar(v(a).sum()),
        Op::Mean(a) => Tensor::scalar(v(a).sum() / v(a).len() as f64),
        Op::Softmax(a) => kernels::softmax_rows(v(a))?,
        Op::SoftmaxCrossEntropy { logits, labels } => {
            let labels = kernels::tensor_to_indices(v(labels))?;
            kernels::softmax_cross_entropy(v(logits), &labels)?
        }
        Op::Gather { input, indices } => {
            let x = v(input);
            let &[rows, cols] = x.shape() else {
                return Err(Error::shape(format!("gather expects a matrix, got {:?}", x.shape())));
            };
            let idx = kernels::tensor_to_indices(v(indices))?;
            kernels::check_labels(rows, cols, &idx)?;
            let data = idx
                .iter()
                .enumerate()
                .map(|(r, &j)| x.data()[r * cols + j])
                .collect();
            Tensor::from_parts(vec![rows], data)
        }
    };
    check_finite(op, &out)?;
    Ok(out)
}

/// Result of a backward sweep, indexed by [`NodeId`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the seed with respect to `id`. Always present for
    /// inputs; `None` for intermediate nodes off every path to the seed.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}
