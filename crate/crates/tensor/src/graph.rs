//! Recording graph for reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Operations are
//! appended in execution order, so the node list is already a topological
//! order and [`Graph::backward`] is a single reverse sweep. Leaves are
//! either plain inputs or parameters keyed by an external id; a parameter
//! bound twice resolves to the same leaf, so shared weights accumulate one
//! gradient.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::kernels::{self as k, Activation};
use crate::{Element, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operator kinds, used for reporting and for fault injection in the
/// gradient self-check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    ConvTranspose2d,
    AdaptiveAvgPool,
    MaxPool,
    BatchNormTrain,
    BatchNormEval,
    Linear,
    Relu,
    Tanh,
    UnitRange,
    Add,
    Scale,
    Reshape,
    Concat,
    Tile2x2,
    Resize,
    Mse,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::ConvTranspose2d => "conv_transpose2d",
            OpKind::AdaptiveAvgPool => "adaptive_avg_pool",
            OpKind::MaxPool => "max_pool2d",
            OpKind::BatchNormTrain => "batch_norm_train",
            OpKind::BatchNormEval => "batch_norm_eval",
            OpKind::Linear => "linear",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::UnitRange => "unit_range",
            OpKind::Add => "add",
            OpKind::Scale => "scale",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat_channels",
            OpKind::Tile2x2 => "tile_2x2",
            OpKind::Resize => "resize_bilinear",
            OpKind::Mse => "mse",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ALL_KINDS.iter().copied().find(|k| k.name() == name)
    }
}

const ALL_KINDS: [OpKind; 18] = [
    OpKind::Leaf,
    OpKind::Conv2d,
    OpKind::ConvTranspose2d,
    OpKind::AdaptiveAvgPool,
    OpKind::MaxPool,
    OpKind::BatchNormTrain,
    OpKind::BatchNormEval,
    OpKind::Linear,
    OpKind::Relu,
    OpKind::Tanh,
    OpKind::UnitRange,
    OpKind::Add,
    OpKind::Scale,
    OpKind::Reshape,
    OpKind::Concat,
    OpKind::Tile2x2,
    OpKind::Resize,
    OpKind::Mse,
];

/// Statistics of a training-mode batch normalization, handed back so the
/// caller can update its running averages.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance (divides by the element count).
    pub var: Vec<T>,
    pub count: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: usize, w: usize, b: Option<usize>, stride: usize, pad: usize },
    ConvTranspose2d { x: usize, w: usize, b: Option<usize>, stride: usize, pad: usize },
    AdaptiveAvgPool { x: usize },
    MaxPool { x: usize, argmax: Vec<usize> },
    BatchNormTrain { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, inv_std: Vec<T> },
    BatchNormEval { x: usize, gamma: usize, beta: usize, mean: Vec<T>, inv_std: Vec<T> },
    Linear { x: usize, w: usize, b: Option<usize> },
    Activation { x: usize, kind: Activation },
    Add { a: usize, b: usize },
    Scale { x: usize, factor: T },
    Reshape { x: usize },
    Concat { parts: Vec<usize> },
    Tile2x2 { parts: [usize; 4] },
    Resize { x: usize },
    Mse { a: usize, b: usize },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            Op::AdaptiveAvgPool { .. } => OpKind::AdaptiveAvgPool,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::BatchNormTrain { .. } => OpKind::BatchNormTrain,
            Op::BatchNormEval { .. } => OpKind::BatchNormEval,
            Op::Linear { .. } => OpKind::Linear,
            Op::Activation { kind: Activation::Relu, .. } => OpKind::Relu,
            Op::Activation { kind: Activation::Tanh, .. } => OpKind::Tanh,
            Op::Activation { kind: Activation::UnitRange, .. } => OpKind::UnitRange,
            Op::Add { .. } => OpKind::Add,
            Op::Scale { .. } => OpKind::Scale,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::Tile2x2 { .. } => OpKind::Tile2x2,
            Op::Resize { .. } => OpKind::Resize,
            Op::Mse { .. } => OpKind::Mse,
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
    param: Option<usize>,
}

#[derive(Debug)]
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<usize, Var>,
    leaf_grads: HashMap<usize, Tensor<T>>,
    consumed: bool,
    sign_flip: Option<OpKind>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            leaf_grads: HashMap::new(),
            consumed: false,
            sign_flip: None,
        }
    }

    /// Negate every gradient produced by operators of `kind` during
    /// backward. Negative control for the gradient self-check only.
    #[doc(hidden)]
    pub fn inject_sign_flip(&mut self, kind: OpKind) {
        self.sign_flip = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Bind an externally owned parameter. Binding the same key again
    /// returns the existing leaf.
    pub fn param(&mut self, key: usize, value: &Tensor<T>, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.leaf(value.clone(), trainable);
        self.nodes[v.0].param = Some(key);
        self.params.insert(key, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads.get(&v.0)
    }

    /// Gradients of every bound parameter that received one, keyed by the
    /// id passed to [`Graph::param`].
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|(&key, v)| self.leaf_grads.get(&v.0).map(|g| (key, g)))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let y = k::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut ids = vec![x.0, w.0];
        ids.extend(b.map(|b| b.0));
        let rg = self.rg(&ids);
        Ok(self.push(Op::Conv2d { x: x.0, w: w.0, b: b.map(|b| b.0), stride, pad }, y, rg))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let y = k::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut ids = vec![x.0, w.0];
        ids.extend(b.map(|b| b.0));
        let rg = self.rg(&ids);
        Ok(self.push(Op::ConvTranspose2d { x: x.0, w: w.0, b: b.map(|b| b.0), stride, pad }, y, rg))
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = k::adaptive_avg_pool(self.value(x), out_h, out_w)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(Op::AdaptiveAvgPool { x: x.0 }, y, rg))
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (y, argmax) = k::max_pool2d(self.value(x), kernel, stride, pad)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(Op::MaxPool { x: x.0, argmax }, y, rg))
    }

    /// Batch normalization with batch statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let bn = k::batch_norm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let stats = BatchStats {
            mean: bn.mean,
            var: bn.var,
            count: bn.count,
        };
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        let v = self.push(
            Op::BatchNormTrain {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat: bn.xhat,
                inv_std: bn.inv_std,
            },
            bn.output,
            rg,
        );
        Ok((v, stats))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: T,
    ) -> Result<Var> {
        let (y, inv_std) =
            k::batch_norm_eval(self.value(x), self.value(gamma), self.value(beta), running_mean, running_var, eps)?;
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            Op::BatchNormEval {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean: running_mean.data().to_vec(),
                inv_std,
            },
            y,
            rg,
        ))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = k::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut ids = vec![x.0, w.0];
        ids.extend(b.map(|b| b.0));
        let rg = self.rg(&ids);
        Ok(self.push(Op::Linear { x: x.0, w: w.0, b: b.map(|b| b.0) }, y, rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let y = k::activation(self.value(x), kind);
        let rg = self.rg(&[x.0]);
        self.push(Op::Activation { x: x.0, kind }, y, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = k::add(self.value(a), self.value(b))?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, y, rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let y = k::scale(self.value(x), factor);
        let rg = self.rg(&[x.0]);
        self.push(Op::Scale { x: x.0, factor }, y, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(Op::Reshape { x: x.0 }, y, rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|p| self.value(*p)).collect();
        let y = k::concat_channels(&vals)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Op::Concat { parts: ids }, y, rg))
    }

    pub fn tile_2x2(&mut self, parts: [Var; 4]) -> Result<Var> {
        let y = k::tile_2x2(parts.map(|p| self.value(p)))?;
        let ids = parts.map(|p| p.0);
        let rg = self.rg(&ids);
        Ok(self.push(Op::Tile2x2 { parts: ids }, y, rg))
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = k::resize_bilinear(self.value(x), out_h, out_w)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(Op::Resize { x: x.0 }, y, rg))
    }

    /// Scalar mean of squared differences. A non-finite result is an error.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = k::mse(self.value(a), self.value(b))?;
        if !v.is_finite() {
            return Err(TensorError::NonFinite("mse".into()));
        }
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Op::Mse { a: a.0, b: b.0 }, Tensor::scalar(v), rg))
    }

    /// Propagate d`loss`/d(leaf) to every leaf that requires a gradient.
    ///
    /// Intermediate gradients are dropped as soon as they are consumed; the
    /// graph can be differentiated only once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::Usage(
                "backward already ran on this graph; run a new forward pass".into(),
            ));
        }
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(TensorError::Usage(
                "loss does not depend on any tensor that requires a gradient".into(),
            ));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(root.value.shape().to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                self.leaf_grads.insert(i, gy);
                continue;
            }
            let mut contributions = self.input_grads(i, &gy)?;
            if self.sign_flip == Some(node.op.kind()) {
                for (_, g) in &mut contributions {
                    *g = g.map(|v| -v);
                }
            }
            for (input, g) in contributions {
                accumulate(&mut grads[input], g)?;
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to those inputs that need one.
    fn input_grads(&self, i: usize, gy: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let need = |j: usize| self.nodes[j].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, stride, pad } => {
                if need(x) {
                    out.push((x, k::conv2d_input_grad(gy, val(w), val(x).shape(), stride, pad)?));
                }
                if need(w) {
                    out.push((w, k::conv2d_weight_grad(gy, val(x), val(w).shape(), stride, pad)?));
                }
                if let Some(b) = b.filter(|&b| need(b)) {
                    out.push((b, k::channel_sums(gy)?));
                }
            }
            &Op::ConvTranspose2d { x, w, b, stride, pad } => {
                if need(x) {
                    out.push((x, k::conv_transpose2d_input_grad(gy, val(w), stride, pad)?));
                }
                if need(w) {
                    out.push((w, k::conv_transpose2d_weight_grad(gy, val(x), val(w).shape(), stride, pad)?));
                }
                if let Some(b) = b.filter(|&b| need(b)) {
                    out.push((b, k::channel_sums(gy)?));
                }
            }
            &Op::AdaptiveAvgPool { x } => {
                out.push((x, k::adaptive_avg_pool_grad(gy, val(x).shape())?));
            }
            Op::MaxPool { x, argmax } => {
                out.push((*x, k::max_pool2d_grad(gy, argmax, val(*x).shape())?));
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                let (gx, gg, gb) = k::batch_norm_train_grad(gy, xhat, val(*gamma), inv_std)?;
                push_needed(&mut out, &need, [(*x, gx), (*gamma, gg), (*beta, gb)]);
            }
            Op::BatchNormEval { x, gamma, beta, mean, inv_std } => {
                let (gx, gg, gb) = k::batch_norm_eval_grad(gy, val(*x), val(*gamma), mean, inv_std)?;
                push_needed(&mut out, &need, [(*x, gx), (*gamma, gg), (*beta, gb)]);
            }
            &Op::Linear { x, w, b } => {
                let (gx, gw, gb) = k::linear_grad(gy, val(x), val(w))?;
                push_needed(&mut out, &need, [(x, gx), (w, gw)]);
                if let Some(b) = b.filter(|&b| need(b)) {
                    out.push((b, gb));
                }
            }
            &Op::Activation { x, kind } => {
                out.push((x, k::activation_grad(gy, val(x), &node.value, kind)));
            }
            &Op::Add { a, b } => {
                if need(a) {
                    out.push((a, gy.clone()));
                }
                if need(b) {
                    out.push((b, gy.clone()));
                }
            }
            &Op::Scale { x, factor } => out.push((x, k::scale(gy, factor))),
            &Op::Reshape { x } => out.push((x, gy.reshape(val(x).shape().to_vec())?)),
            Op::Concat { parts } => {
                let channels: Vec<usize> = parts.iter().map(|&p| val(p).shape()[1]).collect();
                for (&p, g) in parts.iter().zip(k::split_channels(gy, &channels)?) {
                    if need(p) {
                        out.push((p, g));
                    }
                }
            }
            Op::Tile2x2 { parts } => {
                for (&p, g) in parts.iter().zip(k::untile_2x2(gy)?) {
                    if need(p) {
                        out.push((p, g));
                    }
                }
            }
            &Op::Resize { x } => out.push((x, k::resize_bilinear_grad(gy, val(x).shape())?)),
            &Op::Mse { a, b } => {
                let upstream = gy.item()?;
                let ga = k::mse_grad(val(a), val(b), upstream);
                if need(b) {
                    out.push((b, ga.map(|v| -v)));
                }
                if need(a) {
                    out.push((a, ga));
                }
            }
        }
        Ok(out)
    }
}

fn push_needed<T, const N: usize>(
    out: &mut Vec<(usize, Tensor<T>)>,
    need: &impl Fn(usize) -> bool,
    items: [(usize, Tensor<T>); N],
) {
    out.extend(items.into_iter().filter(|(j, _)| need(*j)));
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(acc) => *acc = k::add(acc, &g)?,
        None => *slot = Some(g),
    }
    Ok(())
}
