use std::fmt;

use super::conv::{self, ConvPlan};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    MeanAbs,
    MeanSq,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T: Real = f32> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Real> BnState<T> {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::ones(vec![channels]),
        }
    }
}

/// User-defined differentiable primitive.
///
/// Mainly a seam for tests: a deliberately wrong `backward` is how the
/// gradient checker's negative control is built.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;

    /// Gradients with respect to each input given the output gradient.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Conv3d {
        input: Var,
        weight: Var,
        bias: Var,
        plan: ConvPlan,
    },
    ConvTranspose3d {
        input: Var,
        weight: Var,
        bias: Var,
        plan: ConvPlan,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        mode: BatchNormMode,
    },
    LeakyRelu {
        input: Var,
        slope: T,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Shift(Var),
    Concat {
        a: Var,
        b: Var,
    },
    Reshape(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Reduce {
        input: Var,
        kind: ReduceKind,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<usize>,
    },
    Custom {
        op: Box<dyn CustomOp<T>>,
        inputs: Vec<Var>,
    },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv3d { .. } => "conv3d",
            Op::ConvTranspose3d { .. } => "conv3d_transpose",
            Op::BatchNorm { .. } => "batch_norm3d",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Concat { .. } => "concat",
            Op::Reshape(..) => "reshape",
            Op::Linear { .. } => "linear",
            Op::Reduce { .. } => "reduce",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of executed primitives.
///
/// Nodes are appended in execution order; [`Graph::backward`] walks them in
/// exact reverse. A graph supports one backward pass.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("backward_done", &self.backward_done)
            .finish()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Records a value whose gradient is collected by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Constant copy of `v`, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if `v`
    /// participated in it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.backward_done {
            return Err(Error::Graph(
                "cannot record new operations after backward".into(),
            ));
        }
        value.ensure_finite(op.name())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(format!(
                "{what}: shapes {sa:?} and {sb:?} differ"
            )));
        }
        Ok(())
    }

    // ---- primitives -------------------------------------------------------

    pub fn conv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let plan = ConvPlan::conv(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            padding,
        )?;
        let y = conv::conv_forward(
            &plan,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let y = Tensor::new(plan.strided_shape(), y)?;
        self.push(
            y,
            Op::Conv3d {
                input,
                weight,
                bias,
                plan,
            },
            &[input, weight, bias],
        )
    }

    /// Transposed convolution, weight `[Cin, Cout, k, k, k]`.
    pub fn conv3d_transpose(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let plan = ConvPlan::transpose(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            padding,
            output_padding,
        )?;
        let mut y =
            conv::conv_input_grad(&plan, self.value(input).data(), self.value(weight).data());
        let batch = plan.dense_shape()[0];
        conv::add_channel_bias(&mut y, batch, self.value(bias).data());
        let y = Tensor::new(plan.dense_shape(), y)?;
        self.push(
            y,
            Op::ConvTranspose3d {
                input,
                weight,
                bias,
                plan,
            },
            &[input, weight, bias],
        )
    }

    /// Per-channel batch normalization over `[N, C, D, H, W]`.
    ///
    /// Train mode normalizes with the biased batch variance and folds the
    /// unbiased one into `state`; eval mode reads `state` only.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm3d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState<T>,
        mode: BatchNormMode,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::invalid("batch norm eps must be positive"));
        }
        let x = self.value(input);
        let [n, c, d, h, w] = x.dims5()?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape(format!(
                    "batch norm {name} shape {:?} does not match {c} channels",
                    self.value(v).shape()
                )));
            }
        }
        if state.running_mean.shape() != [c] || state.running_var.shape() != [c] {
            return Err(Error::shape("batch norm running statistics shape mismatch"));
        }
        let spatial = d * h * w;
        let count = n * spatial;
        if mode == BatchNormMode::Train && count < 2 {
            return Err(Error::shape(format!(
                "batch norm in train mode needs at least 2 values per channel, got {count}"
            )));
        }
        let xs = x.data();
        let (mean, var) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * spatial;
                        acc += xs[base..base + spatial]
                            .iter()
                            .map(|v| v.as_f64())
                            .sum::<f64>();
                    }
                    mean[ch] = acc / count as f64;
                    let mut sq = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * spatial;
                        sq += xs[base..base + spatial]
                            .iter()
                            .map(|v| {
                                let z = v.as_f64() - mean[ch];
                                z * z
                            })
                            .sum::<f64>();
                    }
                    var[ch] = sq / count as f64;
                }
                let unbias = count as f64 / (count as f64 - 1.0);
                let rm = state.running_mean.data_mut();
                for ch in 0..c {
                    rm[ch] = T::of((1.0 - momentum) * rm[ch].as_f64() + momentum * mean[ch]);
                }
                let rv = state.running_var.data_mut();
                for ch in 0..c {
                    rv[ch] =
                        T::of((1.0 - momentum) * rv[ch].as_f64() + momentum * var[ch] * unbias);
                }
                (mean, var)
            }
            BatchNormMode::Eval => (
                state
                    .running_mean
                    .data()
                    .iter()
                    .map(|v| v.as_f64())
                    .collect(),
                state
                    .running_var
                    .data()
                    .iter()
                    .map(|v| v.as_f64())
                    .collect(),
            ),
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + eps).sqrt())).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut y = vec![T::zero(); xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * spatial;
                let m = T::of(mean[ch]);
                for i in base..base + spatial {
                    let z = (xs[i] - m) * inv_std[ch];
                    xhat[i] = z;
                    y[i] = g[ch] * z + bt[ch];
                }
            }
        }
        let y = Tensor::new(vec![n, c, d, h, w], y)?;
        self.push(
            y,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            },
            &[input, gamma, beta],
        )
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Result<Var> {
        let s = T::of(slope);
        let y = self
            .value(input)
            .map(|v| if v > T::zero() { v } else { s * v });
        self.push(y, Op::LeakyRelu { input, slope: s }, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.leaky_relu(input, 0.0)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let y = self.zip(a, b, |x, y| x + y);
        self.push(y, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let y = self.zip(a, b, |x, y| x - y);
        self.push(y, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let y = self.zip(a, b, |x, y| x * y);
        self.push(y, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let y = self.value(a).map(|v| v * c);
        self.push(y, Op::Scale(a, c), &[a])
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let y = self.value(a).map(|v| v + c);
        self.push(y, Op::Shift(a), &[a])
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape checked")
    }

    /// Concatenates two rank-5 tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, da, ha, wa] = self.value(a).dims5()?;
        let [nb, cb, db, hb, wb] = self.value(b).dims5()?;
        if (na, da, ha, wa) != (nb, db, hb, wb) {
            return Err(Error::shape(format!(
                "concat: {:?} and {:?} differ outside the channel axis",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let s = da * ha * wa;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(xa.len() + xb.len());
        for n in 0..na {
            out.extend_from_slice(&xa[n * ca * s..(n + 1) * ca * s]);
            out.extend_from_slice(&xb[n * cb * s..(n + 1) * cb * s]);
        }
        let y = Tensor::new(vec![na, ca + cb, da, ha, wa], out)?;
        self.push(y, Op::Concat { a, b }, &[a, b])
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let y = self.value(input).clone().reshape(shape)?;
        self.push(y, Op::Reshape(input), &[input])
    }

    /// `[N, C, D, H, W]` → `[N, C·D·H·W]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let shape = self.value(input).shape();
        let n = *shape
            .first()
            .ok_or_else(|| Error::shape("flatten of a scalar"))?;
        let rest = shape[1..].iter().product::<usize>();
        self.reshape(input, vec![n, rest])
    }

    /// `input [N, F] · weightᵀ [F, G] + bias [G]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let (n, f) = match x.shape() {
            [n, f] => (*n, *f),
            s => {
                return Err(Error::shape(format!(
                    "linear input must be [N, F], got {s:?}"
                )))
            }
        };
        let g = match w.shape() {
            [g, wf] if *wf == f => *g,
            s => {
                return Err(Error::shape(format!(
                    "linear weight {s:?} does not match {f} input features"
                )))
            }
        };
        if b.shape() != [g] {
            return Err(Error::shape(format!(
                "linear bias {:?} does not match {g} outputs",
                b.shape()
            )));
        }
        let mut y = Vec::with_capacity(n * g);
        for _ in 0..n {
            y.extend_from_slice(b.data());
        }
        T::gemm(
            n,
            f,
            g,
            T::one(),
            x.data(),
            f as isize,
            1,
            w.data(),
            1,
            f as isize,
            T::one(),
            &mut y,
            g as isize,
            1,
        );
        let y = Tensor::new(vec![n, g], y)?;
        self.push(
            y,
            Op::Linear {
                input,
                weight,
                bias,
            },
            &[input, weight, bias],
        )
    }

    pub fn reduce(&mut self, input: Var, kind: ReduceKind) -> Result<Var> {
        let x = self.value(input);
        if x.is_empty() {
            return Err(Error::shape("reduction over an empty tensor"));
        }
        let count = T::of(x.len() as f64);
        let v = match kind {
            ReduceKind::Sum => x.data().iter().copied().sum::<T>(),
            ReduceKind::Mean => x.data().iter().copied().sum::<T>() / count,
            ReduceKind::MeanAbs => x.data().iter().map(|v| v.abs()).sum::<T>() / count,
            ReduceKind::MeanSq => x.data().iter().map(|&v| v * v).sum::<T>() / count,
        };
        self.push(Tensor::scalar(v), Op::Reduce { input, kind }, &[input])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        self.reduce(input, ReduceKind::Sum)
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        self.reduce(input, ReduceKind::Mean)
    }

    pub fn mean_abs(&mut self, input: Var) -> Result<Var> {
        self.reduce(input, ReduceKind::MeanAbs)
    }

    pub fn mean_sq(&mut self, input: Var) -> Result<Var> {
        self.reduce(input, ReduceKind::MeanSq)
    }

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let (n, k) = match x.shape() {
            [n, k] => (*n, *k),
            s => {
                return Err(Error::shape(format!(
                    "softmax_cross_entropy expects [N, K] logits, got {s:?}"
                )))
            }
        };
        if targets.len() != n || n == 0 {
            return Err(Error::invalid(format!(
                "{} targets for {n} logit rows",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::invalid(format!(
                "target class {t} out of range 0..{k}"
            )));
        }
        let mut probs = vec![T::zero(); n * k];
        let mut loss = 0.0f64;
        for (row, &t) in targets.iter().enumerate() {
            let z = &x.data()[row * k..(row + 1) * k];
            let max = z.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = z.iter().map(|&v| (v - max).exp()).sum();
            let log_sum = sum.ln();
            for j in 0..k {
                probs[row * k + j] = (z[j] - max).exp() / sum;
            }
            loss += (log_sum - (z[t] - max)).as_f64();
        }
        let y = Tensor::scalar(T::of(loss / n as f64));
        self.push(
            y,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp<T>>, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let y = op.forward(&values)?;
        self.push(
            y,
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
            inputs,
        )
    }

    // ---- reverse pass -----------------------------------------------------

    /// Populates gradients of the scalar `loss` with respect to every node
    /// that depends on a leaf. Leaves used several times accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph(
                "backward already ran on this graph; record a new forward".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(Tensor::new(
            self.value(loss).shape().to_vec(),
            vec![T::one()],
        )?);
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let contributions = self.adjoint(node, &gy)?;
            grads[idx] = Some(gy);
            for (v, g) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn adjoint(&self, node: &Node<T>, gy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let g = gy.data();
        let shaped = |v: Var, data: Vec<T>| -> Result<(Var, Tensor<T>)> {
            Ok((v, Tensor::new(self.value(v).shape().to_vec(), data)?))
        };
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv3d {
                input,
                weight,
                bias,
                plan,
            } => {
                let mut res = Vec::new();
                let w = self.value(*weight).data();
                if self.requires_grad(*input) {
                    res.push(shaped(*input, conv::conv_input_grad(plan, g, w))?);
                }
                if self.requires_grad(*weight) {
                    let mut dw = vec![T::zero(); w.len()];
                    conv::conv_weight_grad(plan, self.value(*input).data(), g, &mut dw);
                    res.push(shaped(*weight, dw)?);
                }
                if self.requires_grad(*bias) {
                    let batch = plan.strided_shape()[0];
                    let nb = self.value(*bias).len();
                    res.push(shaped(*bias, conv::channel_sums(batch, nb, g))?);
                }
                res
            }
            Op::ConvTranspose3d {
                input,
                weight,
                bias,
                plan,
            } => {
                let mut res = Vec::new();
                let w = self.value(*weight).data();
                if self.requires_grad(*input) {
                    let zero_bias = vec![T::zero(); self.value(*input).dims5()?[1]];
                    res.push(shaped(*input, conv::conv_forward(plan, g, w, &zero_bias))?);
                }
                if self.requires_grad(*weight) {
                    let mut dw = vec![T::zero(); w.len()];
                    conv::conv_weight_grad(plan, g, self.value(*input).data(), &mut dw);
                    res.push(shaped(*weight, dw)?);
                }
                if self.requires_grad(*bias) {
                    let batch = plan.dense_shape()[0];
                    let nb = self.value(*bias).len();
                    res.push(shaped(*bias, conv::channel_sums(batch, nb, g))?);
                }
                res
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            } => {
                let [n, c, d, h, w] = self.value(*input).dims5()?;
                let spatial = d * h * w;
                let count = T::of((n * spatial) as f64);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * spatial;
                        for i in base..base + spatial {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                let mut res = Vec::new();
                if self.requires_grad(*input) {
                    let mut dx = vec![T::zero(); g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * spatial;
                            let scale = gam[ch] * inv_std[ch];
                            match mode {
                                BatchNormMode::Eval => {
                                    for i in base..base + spatial {
                                        dx[i] = g[i] * scale;
                                    }
                                }
                                BatchNormMode::Train => {
                                    // dgamma/dbeta are exactly the Σ dy·x̂ and Σ dy terms.
                                    for i in base..base + spatial {
                                        dx[i] = scale / count
                                            * (count * g[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                                    }
                                }
                            }
                        }
                    }
                    res.push(shaped(*input, dx)?);
                }
                if self.requires_grad(*gamma) {
                    res.push(shaped(*gamma, dgamma)?);
                }
                if self.requires_grad(*beta) {
                    res.push(shaped(*beta, dbeta)?);
                }
                res
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.value(*input).data();
                let dx = x
                    .iter()
                    .zip(g)
                    .map(|(&x, &gy)| if x > T::zero() { gy } else { *slope * gy })
                    .collect();
                vec![shaped(*input, dx)?]
            }
            Op::Add(a, b) => vec![shaped(*a, g.to_vec())?, shaped(*b, g.to_vec())?],
            Op::Sub(a, b) => vec![
                shaped(*a, g.to_vec())?,
                shaped(*b, g.iter().map(|&v| -v).collect())?,
            ],
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    shaped(*a, g.iter().zip(xb).map(|(&g, &y)| g * y).collect())?,
                    shaped(*b, g.iter().zip(xa).map(|(&g, &x)| g * x).collect())?,
                ]
            }
            Op::Scale(a, c) => vec![shaped(*a, g.iter().map(|&v| v * *c).collect())?],
            Op::Shift(a) => vec![shaped(*a, g.to_vec())?],
            Op::Concat { a, b } => {
                let [n, ca, d, h, w] = self.value(*a).dims5()?;
                let cb = self.value(*b).dims5()?[1];
                let s = d * h * w;
                let mut ga = Vec::with_capacity(n * ca * s);
                let mut gb = Vec::with_capacity(n * cb * s);
                for i in 0..n {
                    let base = i * (ca + cb) * s;
                    ga.extend_from_slice(&g[base..base + ca * s]);
                    gb.extend_from_slice(&g[base + ca * s..base + (ca + cb) * s]);
                }
                vec![shaped(*a, ga)?, shaped(*b, gb)?]
            }
            Op::Reshape(a) => vec![shaped(*a, g.to_vec())?],
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (n, f) = (self.value(*input).shape()[0], self.value(*input).shape()[1]);
                let gcount = self.value(*weight).shape()[0];
                let mut res = Vec::new();
                if self.requires_grad(*input) {
                    let mut dx = vec![T::zero(); n * f];
                    T::gemm(
                        n,
                        gcount,
                        f,
                        T::one(),
                        g,
                        gcount as isize,
                        1,
                        self.value(*weight).data(),
                        f as isize,
                        1,
                        T::zero(),
                        &mut dx,
                        f as isize,
                        1,
                    );
                    res.push(shaped(*input, dx)?);
                }
                if self.requires_grad(*weight) {
                    let mut dw = vec![T::zero(); gcount * f];
                    T::gemm(
                        gcount,
                        n,
                        f,
                        T::one(),
                        g,
                        1,
                        gcount as isize,
                        self.value(*input).data(),
                        f as isize,
                        1,
                        T::zero(),
                        &mut dw,
                        f as isize,
                        1,
                    );
                    res.push(shaped(*weight, dw)?);
                }
                if self.requires_grad(*bias) {
                    let mut db = vec![T::zero(); gcount];
                    for row in g.chunks_exact(gcount) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    res.push(shaped(*bias, db)?);
                }
                res
            }
            Op::Reduce { input, kind } => {
                let x = self.value(*input).data();
                let gy = g[0];
                let count = T::of(x.len() as f64);
                let dx: Vec<T> = match kind {
                    ReduceKind::Sum => vec![gy; x.len()],
                    ReduceKind::Mean => vec![gy / count; x.len()],
                    ReduceKind::MeanAbs => x
                        .iter()
                        .map(|&v| {
                            let s = if v > T::zero() {
                                T::one()
                            } else if v < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            };
                            gy * s / count
                        })
                        .collect(),
                    ReduceKind::MeanSq => {
                        let two = T::of(2.0);
                        x.iter().map(|&v| gy * two * v / count).collect()
                    }
                };
                vec![shaped(*input, dx)?]
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let k = self.value(*logits).shape()[1];
                let n = T::of(targets.len() as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * g[0] / n).collect();
                for (row, &t) in targets.iter().enumerate() {
                    dx[row * k + t] -= g[0] / n;
                }
                vec![shaped(*logits, dx)?]
            }
            Op::Custom { op, inputs } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let grads = op.backward(&values, &node.value, gy)?;
                if grads.len() != inputs.len() {
                    return Err(Error::Graph(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                inputs.iter().copied().zip(grads).collect()
            }
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn single_voxel_conv_is_multiply_add() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 1, 1, 1], &[3.0]));
        let w = g.constant(t(&[1, 1, 1, 1, 1], &[2.0]));
        let b = g.constant(t(&[1], &[0.5]));
        let y = g.conv3d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[6.5]);
    }

    #[test]
    fn centered_delta_kernel_is_identity() {
        let mut rng = crate::tensor::Rng::new(3);
        let input = Tensor::<f32>::uniform(vec![1, 1, 5, 4, 6], -1.0, 1.0, &mut rng);
        let mut kernel = Tensor::<f32>::zeros(vec![1, 1, 3, 3, 3]);
        kernel.data_mut()[13] = 1.0;
        let mut g = Graph::<f32>::new();
        let x = g.constant(input.clone());
        let w = g.constant(kernel);
        let b = g.constant(Tensor::zeros(vec![1]));
        let y = g.conv3d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.value(y), &input);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_zero_stride() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(vec![1, 2, 4, 4, 4]));
        let w = g.constant(Tensor::zeros(vec![1, 3, 3, 3, 3]));
        let b = g.constant(Tensor::zeros(vec![1]));
        assert!(matches!(g.conv3d(x, w, b, 1, 1), Err(Error::Shape(_))));
        let w2 = g.constant(Tensor::zeros(vec![1, 2, 3, 3, 3]));
        assert!(g.conv3d(x, w2, b, 0, 1).is_err());
    }

    #[test]
    fn transpose_of_zeros_is_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(vec![1, 2, 4, 4, 4]));
        let mut rng = crate::tensor::Rng::new(1);
        let w = g.constant(Tensor::uniform(vec![2, 3, 3, 3, 3], -1.0, 1.0, &mut rng));
        let b = g.constant(Tensor::zeros(vec![3]));
        let y = g.conv3d_transpose(x, w, b, 2, 1, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 3, 8, 8, 8]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pointwise_definitions() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[-2.0, -1.0, 3.0]));
        let lr = g.leaky_relu(x, 0.2).unwrap();
        assert!((g.value(lr).data()[0] + 0.4).abs() < 1e-15);
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 3.0]);
        let z = g.constant(Tensor::zeros(vec![3]));
        let s = g.add(x, z).unwrap();
        assert_eq!(g.value(s), g.value(x));
        let bad = g.constant(Tensor::zeros(vec![2]));
        assert!(g.add(x, bad).is_err());
    }

    #[test]
    fn subgradient_at_zero_is_negative_side_slope() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[0.0, 0.0]));
        let y = g.leaky_relu(x, 0.2).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.2, 0.2]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1], &[0.0]));
        let y = g.relu(x).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn linear_identity_and_bias_only() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let eye = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let zero = g.constant(Tensor::zeros(vec![3]));
        let y = g.linear(x, eye, zero).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let w0 = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(t(&[2], &[7.0, -1.0]));
        let y = g.linear(x, w0, b).unwrap();
        assert_eq!(g.value(y).data(), &[7.0, -1.0, 7.0, -1.0]);
        let wbad = g.constant(Tensor::zeros(vec![2, 4]));
        assert!(g.linear(x, wbad, b).is_err());
    }

    #[test]
    fn reductions() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[4], &[1.0, 2.0, 3.0, 6.0]));
        let m = g.mean(x).unwrap();
        assert_eq!(g.value(m).item().unwrap(), 3.0);
        let s = g.sum(x).unwrap();
        assert_eq!(g.value(s).item().unwrap(), 12.0);
        let z = g.constant(Tensor::zeros(vec![5]));
        let ma = g.mean_abs(z).unwrap();
        assert_eq!(g.value(ma).item().unwrap(), 0.0);
        let e = g.constant(Tensor::zeros(vec![0]));
        assert!(g.mean(e).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let mut g = Graph::<f64>::new();
        let u = g.constant(Tensor::zeros(vec![1, 5]));
        let l = g.softmax_cross_entropy(u, &[3]).unwrap();
        assert!((g.value(l).item().unwrap() - 5f64.ln()).abs() < 1e-12);

        let sat = g.constant(t(&[1, 3], &[40.0, 0.0, 0.0]));
        let l = g.softmax_cross_entropy(sat, &[0]).unwrap();
        assert!(g.value(l).item().unwrap() < 1e-10);

        assert!(g.softmax_cross_entropy(u, &[5]).is_err());
    }

    #[test]
    fn simple_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let l = g.sum(x).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let l = g.mean_sq(x).unwrap();
        g.backward(l).unwrap();
        let want: Vec<f64> = [1.0, -2.0, 0.5].iter().map(|v| 2.0 * v / 3.0).collect();
        assert_eq!(g.grad(x).unwrap().data(), &want[..]);
    }

    #[test]
    fn leaf_grads_accumulate_across_uses() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let y = g.add(x, x).unwrap();
        let z = g.mul(y, x).unwrap(); // 2x²
        let l = g.sum(z).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, 8.0]);
    }

    #[test]
    fn backward_rejects_second_call_and_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Graph(_))));
        let l = g.sum(x).unwrap();
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::Graph(_))));
        assert!(g.sum(x).is_err());
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(vec![2], f32::MAX));
        assert!(matches!(
            g.scale(x, 10.0),
            Err(Error::NonFinite { op: "scale" })
        ));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let y = g.mul(x, c).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn batch_norm_train_normalizes_and_updates_state() {
        let mut rng = crate::tensor::Rng::new(11);
        let input = Tensor::<f64>::uniform(vec![2, 3, 2, 2, 2], -3.0, 5.0, &mut rng);
        let mut state = BnState::new(3);
        let mut g = Graph::<f64>::new();
        let x = g.constant(input);
        let gamma = g.constant(Tensor::ones(vec![3]));
        let beta = g.constant(Tensor::zeros(vec![3]));
        let y = g
            .batch_norm3d(x, gamma, beta, &mut state, BatchNormMode::Train, 0.1, 1e-5)
            .unwrap();
        let out = g.value(y);
        for c in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| out.data()[(n * 3 + c) * 8..(n * 3 + c + 1) * 8].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 16.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert_ne!(state.running_mean.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn batch_norm_constant_input_gives_zeros() {
        let mut state = BnState::new(1);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(vec![2, 1, 2, 2, 2], 4.0));
        let gamma = g.constant(Tensor::ones(vec![1]));
        let beta = g.constant(Tensor::zeros(vec![1]));
        let y = g
            .batch_norm3d(x, gamma, beta, &mut state, BatchNormMode::Train, 0.1, 1e-5)
            .unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_train_needs_two_values() {
        let mut state = BnState::new(1);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones(vec![1, 1, 1, 1, 1]));
        let gamma = g.constant(Tensor::ones(vec![1]));
        let beta = g.constant(Tensor::zeros(vec![1]));
        assert!(g
            .batch_norm3d(x, gamma, beta, &mut state, BatchNormMode::Train, 0.1, 1e-5)
            .is_err());
        assert!(g
            .batch_norm3d(x, gamma, beta, &mut state, BatchNormMode::Eval, 0.1, 1e-5)
            .is_ok());
    }
}
