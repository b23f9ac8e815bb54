//! Parameterized layers and the plumbing that binds them to a [`Graph`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{BatchNormMode, BnState, Graph, Rng, Tensor, Var};

/// How a tensor held by a network participates in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Mutable state that is not optimized (batch-norm running statistics).
    Buffer,
    /// Fixed after initialization.
    Frozen,
}

/// Named traversal over every tensor a network owns.
///
/// Names are dot-separated paths, stable across runs; checkpoints and
/// optimizer state are keyed by them.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind));

    /// `(name, tensor)` for every trainable parameter, in visit order.
    fn named_trainable(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |name, t, kind| {
            if kind == ParamKind::Trainable {
                out.push((name.to_string(), t.clone()));
            }
        });
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t, kind| {
            if kind == ParamKind::Trainable {
                n += t.len();
            }
        });
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Whether a forward pass records parameter gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    /// Parameters become graph leaves.
    Trainable,
    /// Parameters enter as constants; no gradient reaches them.
    Constant,
}

/// Forward-pass context: the graph, batch-norm mode and the parameters bound
/// so far.
pub struct Forward<'g> {
    pub graph: &'g mut Graph<f32>,
    pub mode: BatchNormMode,
    binding: Binding,
    bound: Vec<(String, Var)>,
}

impl<'g> Forward<'g> {
    pub fn new(graph: &'g mut Graph<f32>, mode: BatchNormMode, binding: Binding) -> Self {
        Forward {
            graph,
            mode,
            binding,
            bound: Vec::new(),
        }
    }

    pub fn binding(&self) -> Binding {
        self.binding
    }

    pub fn set_binding(&mut self, binding: Binding) {
        self.binding = binding;
    }

    pub(crate) fn param(&mut self, name: String, value: &Tensor) -> Var {
        match self.binding {
            Binding::Trainable => {
                let v = self.graph.leaf(value.clone());
                self.bound.push((name, v));
                v
            }
            Binding::Constant => self.graph.constant(value.clone()),
        }
    }

    /// Parameters bound as leaves, in binding order.
    pub fn bound(&self) -> &[(String, Var)] {
        &self.bound
    }

    pub fn into_bound(self) -> Vec<(String, Var)> {
        self.bound
    }
}

/// Gradients gathered after a backward pass, keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Grads {
    map: HashMap<String, Tensor>,
}

impl Grads {
    pub fn collect(graph: &Graph<f32>, bound: &[(String, Var)]) -> Self {
        let mut map = HashMap::new();
        for (name, v) in bound {
            if let Some(g) = graph.grad(*v) {
                match map.get_mut(name) {
                    None => {
                        map.insert(name.clone(), g.clone());
                    }
                    Some(acc) => {
                        let acc: &mut Tensor = acc;
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                }
            }
        }
        Grads { map }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.map.insert(name.into(), grad);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }
}

/// Uniform fan-in initialization, `U(−1/√fan_in, 1/√fan_in)`.
pub(crate) fn fan_in_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv3d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv3d {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut Rng) -> Self {
        let fan_in = cin * kernel.pow(3);
        Conv3d {
            weight: fan_in_uniform(vec![cout, cin, kernel, kernel, kernel], fan_in, rng),
            bias: fan_in_uniform(vec![cout], fan_in, rng),
            stride,
            padding: kernel / 2,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, ctx: &mut Forward, prefix: &str, x: Var) -> Result<Var> {
        let w = ctx.param(join(prefix, "weight"), &self.weight);
        let b = ctx.param(join(prefix, "bias"), &self.bias);
        ctx.graph.conv3d(x, w, b, self.stride, self.padding)
    }

    /// Sets weights and bias to zero.
    pub fn zero(&mut self) {
        self.weight.data_mut().fill(0.0);
        self.bias.data_mut().fill(0.0);
    }
}

impl Params for Conv3d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f(&join(prefix, "weight"), &self.weight, ParamKind::Trainable);
        f(&join(prefix, "bias"), &self.bias, ParamKind::Trainable);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(
            &join(prefix, "weight"),
            &mut self.weight,
            ParamKind::Trainable,
        );
        f(&join(prefix, "bias"), &mut self.bias, ParamKind::Trainable);
    }
}

/// Stride-2 transposed convolution that doubles every spatial extent.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose3d {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvTranspose3d {
    pub const KERNEL: usize = 3;

    pub fn new(cin: usize, cout: usize, rng: &mut Rng) -> Self {
        let k = Self::KERNEL;
        let fan_in = cout * k.pow(3);
        ConvTranspose3d {
            weight: fan_in_uniform(vec![cin, cout, k, k, k], fan_in, rng),
            bias: fan_in_uniform(vec![cout], fan_in, rng),
        }
    }

    pub fn forward(&self, ctx: &mut Forward, prefix: &str, x: Var) -> Result<Var> {
        let w = ctx.param(join(prefix, "weight"), &self.weight);
        let b = ctx.param(join(prefix, "bias"), &self.bias);
        ctx.graph.conv3d_transpose(x, w, b, 2, 1, 1)
    }
}

impl Params for ConvTranspose3d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f(&join(prefix, "weight"), &self.weight, ParamKind::Trainable);
        f(&join(prefix, "bias"), &self.bias, ParamKind::Trainable);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(
            &join(prefix, "weight"),
            &mut self.weight,
            ParamKind::Trainable,
        );
        f(&join(prefix, "bias"), &mut self.bias, ParamKind::Trainable);
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm3d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub state: BnState,
}

impl BatchNorm3d {
    pub fn new(channels: usize) -> Self {
        BatchNorm3d {
            gamma: Tensor::ones(vec![channels]),
            beta: Tensor::zeros(vec![channels]),
            state: BnState::new(channels),
        }
    }

    pub fn forward(&mut self, ctx: &mut Forward, prefix: &str, x: Var) -> Result<Var> {
        let g = ctx.param(join(prefix, "gamma"), &self.gamma);
        let b = ctx.param(join(prefix, "beta"), &self.beta);
        let mode = ctx.mode;
        ctx.graph
            .batch_norm3d(x, g, b, &mut self.state, mode, BN_MOMENTUM, BN_EPS)
    }
}

impl Params for BatchNorm3d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f(&join(prefix, "gamma"), &self.gamma, ParamKind::Trainable);
        f(&join(prefix, "beta"), &self.beta, ParamKind::Trainable);
        f(
            &join(prefix, "running_mean"),
            &self.state.running_mean,
            ParamKind::Buffer,
        );
        f(
            &join(prefix, "running_var"),
            &self.state.running_var,
            ParamKind::Buffer,
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(
            &join(prefix, "gamma"),
            &mut self.gamma,
            ParamKind::Trainable,
        );
        f(&join(prefix, "beta"), &mut self.beta, ParamKind::Trainable);
        f(
            &join(prefix, "running_mean"),
            &mut self.state.running_mean,
            ParamKind::Buffer,
        );
        f(
            &join(prefix, "running_var"),
            &mut self.state.running_var,
            ParamKind::Buffer,
        );
    }
}

/// Fully connected layer, weight `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        Dense {
            weight: fan_in_uniform(vec![outputs, inputs], inputs, rng),
            bias: fan_in_uniform(vec![outputs], inputs, rng),
        }
    }

    pub fn forward(&self, ctx: &mut Forward, prefix: &str, x: Var) -> Result<Var> {
        let w = ctx.param(join(prefix, "weight"), &self.weight);
        let b = ctx.param(join(prefix, "bias"), &self.bias);
        ctx.graph.linear(x, w, b)
    }
}

impl Params for Dense {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f(&join(prefix, "weight"), &self.weight, ParamKind::Trainable);
        f(&join(prefix, "bias"), &self.bias, ParamKind::Trainable);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(
            &join(prefix, "weight"),
            &mut self.weight,
            ParamKind::Trainable,
        );
        f(&join(prefix, "bias"), &mut self.bias, ParamKind::Trainable);
    }
}

/// Fails unless `x` is `[N, channels, extent, extent, extent]`.
pub(crate) fn expect_volume(
    graph: &Graph<f32>,
    x: Var,
    channels: usize,
    extent: usize,
    what: &str,
) -> Result<usize> {
    let [n, c, d, h, w] = graph.value(x).dims5()?;
    if c != channels || d != extent || h != extent || w != extent {
        return Err(Error::shape(format!(
            "{what} expects [N, {channels}, {extent}, {extent}, {extent}], got {:?}",
            graph.value(x).shape()
        )));
    }
    Ok(n)
}
