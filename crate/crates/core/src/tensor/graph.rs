use std::collections::HashMap;

use super::conv::{self, Conv1dGeom, Conv3dGeom};
use super::ops::{self, BnCache};
use super::DiffTensor;
use crate::error::{invalid, Result};
use crate::params::{ParamId, ParamStore};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Train mode uses batch statistics in batch norm and applies dropout;
/// eval mode uses running statistics and skips dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics produced by a train-mode batch norm, to be folded into
/// the running buffers by the caller.
#[derive(Debug, Clone)]
pub struct RunningStatUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

pub(crate) enum Op {
    Leaf,
    Param,
    Conv1d { input: Var, weight: Var, bias: Var, geom: Conv1dGeom },
    Conv3d { input: Var, weight: Var, bias: Var, geom: Conv3dGeom },
    MaxPool3d { input: Var, argmax: Vec<usize> },
    Linear { input: Var, weight: Var, bias: Var },
    Relu { input: Var },
    Softmax { input: Var },
    BatchNorm { input: Var, gamma: Var, beta: Var, cache: BnCache },
    Dropout { input: Var, mask: Vec<f64> },
    Mul { lhs: Var, rhs: Var },
    Add { lhs: Var, rhs: Var },
    ChannelScale { input: Var, factor: Vec<f64>, channels: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Concat { parts: Vec<Var> },
    Reshape { input: Var },
    Transpose { input: Var },
    Sum { input: Var },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param => vec![],
            Op::Conv1d { input, weight, bias, .. }
            | Op::Conv3d { input, weight, bias, .. }
            | Op::Linear { input, weight, bias } => vec![*input, *weight, *bias],
            Op::BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::MaxPool3d { input, .. }
            | Op::Relu { input }
            | Op::Softmax { input }
            | Op::Dropout { input, .. }
            | Op::ChannelScale { input, .. }
            | Op::Reshape { input }
            | Op::Transpose { input }
            | Op::Sum { input } => vec![*input],
            Op::Mul { lhs, rhs } | Op::Add { lhs, rhs } => vec![*lhs, *rhs],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Concat { parts } => parts.clone(),
        }
    }
}

struct Node {
    tensor: DiffTensor,
    op: Op,
}

/// A recorded computation. Build it with the operator methods, call
/// [`Graph::backward`] on a scalar, then read gradients back.
pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    grad_enabled: bool,
    params: HashMap<ParamId, Var>,
    stat_updates: Vec<RunningStatUpdate>,
    kink_hash: u64,
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            grad_enabled: true,
            params: HashMap::new(),
            stat_updates: Vec::new(),
            kink_hash: 0xcbf2_9ce4_8422_2325,
        }
    }

    /// A graph that records no gradients; forward evaluation only.
    pub fn inference(mode: Mode) -> Self {
        let mut g = Self::new(mode);
        g.grad_enabled = false;
        g
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. It participates in differentiation if the tensor's
    /// `requires_grad` flag is set.
    pub fn input(&mut self, tensor: DiffTensor) -> Var {
        let rg = tensor.requires_grad() && self.grad_enabled;
        let tensor = tensor.with_requires_grad(rg);
        self.push_node(tensor, Op::Leaf)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: DiffTensor) -> Var {
        self.push_node(tensor.with_requires_grad(false), Op::Leaf)
    }

    /// Adds (once per graph) a leaf holding a copy of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let mut t = store.tensor(id).clone();
        t.zero_grad();
        let rg = self.grad_enabled && store.is_trainable(id);
        let v = self.push_node(t.with_requires_grad(rg), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &DiffTensor {
        &self.nodes[v.0].tensor
    }

    pub fn values(&self, v: Var) -> &[f64] {
        self.nodes[v.0].tensor.values()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        self.nodes[v.0].tensor.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad()
    }

    /// Hash of every activation pattern decision made so far (ReLU signs,
    /// max-pool winners). Two evaluations with equal signatures took the
    /// same piecewise-linear branch everywhere.
    pub fn kink_signature(&self) -> u64 {
        self.kink_hash
    }

    pub fn take_stat_updates(&mut self) -> Vec<RunningStatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Gradients of every parameter leaf, in parameter order.
    pub fn param_grads(&self) -> Vec<(ParamId, &[f64])> {
        let mut out: Vec<(ParamId, &[f64])> = self
            .params
            .iter()
            .filter(|(_, v)| self.requires_grad(**v))
            .map(|(id, v)| (*id, self.grad(*v)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Adds this graph's parameter gradients into the store.
    pub fn accumulate_grads(&self, store: &mut ParamStore) {
        for (id, g) in self.param_grads() {
            for (dst, src) in store.tensor_mut(id).grad_mut().iter_mut().zip(g) {
                *dst += src;
            }
        }
    }

    /// Reverse pass from a single-element tensor.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0].tensor;
        if root.len() != 1 {
            return Err(invalid(format!(
                "backward needs a scalar, got shape {:?}",
                root.shape()
            )));
        }
        if !root.requires_grad() {
            return Ok(());
        }
        self.nodes[loss.0].tensor.grad_mut()[0] += 1.0;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tensor.requires_grad() {
                continue;
            }
            let grad = std::mem::take(&mut self.nodes[i].tensor.grad);
            if grad.iter().all(|&g| g == 0.0) {
                self.nodes[i].tensor.grad = grad;
                continue;
            }
            let contributions = self.local_backward(i, &grad);
            self.nodes[i].tensor.grad = grad;
            for (v, g) in contributions {
                let dst = &mut self.nodes[v.0].tensor;
                if !dst.requires_grad() {
                    continue;
                }
                for (d, s) in dst.grad_mut().iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
        Ok(())
    }

    fn local_backward(&self, i: usize, grad: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = &node.tensor;
        let mut acc = Vec::new();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Conv1d { input, weight, bias, geom } => {
                let (gx, gw, gb) = conv::conv1d_backward(
                    geom,
                    self.values(*input),
                    self.values(*weight),
                    grad,
                    [self.requires_grad(*input), self.requires_grad(*weight), self.requires_grad(*bias)],
                );
                push_some(&mut acc, *input, gx);
                push_some(&mut acc, *weight, gw);
                push_some(&mut acc, *bias, gb);
            }
            Op::Conv3d { input, weight, bias, geom } => {
                let (gx, gw, gb) = conv::conv3d_backward(
                    geom,
                    self.values(*input),
                    self.values(*weight),
                    grad,
                    [self.requires_grad(*input), self.requires_grad(*weight), self.requires_grad(*bias)],
                );
                push_some(&mut acc, *input, gx);
                push_some(&mut acc, *weight, gw);
                push_some(&mut acc, *bias, gb);
            }
            Op::MaxPool3d { input, argmax } => {
                let mut gx = vec![0.0; self.value(*input).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += grad[o];
                }
                acc.push((*input, gx));
            }
            Op::Linear { input, weight, bias } => {
                let (gx, gw, gb) = ops::linear_backward(
                    self.value(*input),
                    self.value(*weight),
                    grad,
                    [self.requires_grad(*input), self.requires_grad(*weight), self.requires_grad(*bias)],
                );
                push_some(&mut acc, *input, gx);
                push_some(&mut acc, *weight, gw);
                push_some(&mut acc, *bias, gb);
            }
            Op::Relu { input } => {
                let gx = out
                    .values()
                    .iter()
                    .zip(grad)
                    .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
                    .collect();
                acc.push((*input, gx));
            }
            Op::Softmax { input } => {
                acc.push((*input, ops::softmax_backward(out, grad)));
            }
            Op::BatchNorm { input, gamma, beta, cache } => {
                let (gx, gg, gb) = ops::batchnorm_backward(
                    cache,
                    self.values(*gamma),
                    grad,
                    [self.requires_grad(*input), self.requires_grad(*gamma), self.requires_grad(*beta)],
                );
                push_some(&mut acc, *input, gx);
                push_some(&mut acc, *gamma, gg);
                push_some(&mut acc, *beta, gb);
            }
            Op::Dropout { input, mask } => {
                acc.push((*input, grad.iter().zip(mask).map(|(g, m)| g * m).collect()));
            }
            Op::Mul { lhs, rhs } => {
                if self.requires_grad(*lhs) {
                    let g = grad.iter().zip(self.values(*rhs)).map(|(g, r)| g * r).collect();
                    acc.push((*lhs, g));
                }
                if self.requires_grad(*rhs) {
                    let g = grad.iter().zip(self.values(*lhs)).map(|(g, l)| g * l).collect();
                    acc.push((*rhs, g));
                }
            }
            Op::Add { lhs, rhs } => {
                acc.push((*lhs, grad.to_vec()));
                acc.push((*rhs, grad.to_vec()));
            }
            Op::ChannelScale { input, factor, channels } => {
                acc.push((*input, ops::channel_scale(grad, factor, out.shape()[0], *channels)));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let rows = labels.len();
                let cols = probs.len() / rows;
                let scale = grad[0] / rows as f64;
                let mut gx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gx[r * cols + l] -= scale;
                }
                acc.push((*logits, gx));
            }
            Op::Concat { parts } => {
                let rows = out.shape()[0];
                let total = out.len() / rows;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).len() / rows;
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&grad[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    acc.push((p, gp));
                }
            }
            Op::Reshape { input } => acc.push((*input, grad.to_vec())),
            Op::Transpose { input } => {
                let s = out.shape();
                // out is [b, c, a]; route back to [b, a, c]
                acc.push((*input, ops::transpose_last2(grad, s[0], s[1], s[2])));
            }
            Op::Sum { input } => {
                acc.push((*input, vec![grad[0]; self.value(*input).len()]));
            }
        }
        acc
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op) -> Var {
        let rg = self.grad_enabled && op.inputs().iter().any(|&v| self.requires_grad(v));
        self.push_node(DiffTensor::from_parts(shape, values, rg), op)
    }

    fn push_node(&mut self, tensor: DiffTensor, op: Op) -> Var {
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn fold_kinks(&mut self, word: u64) {
        self.kink_hash = (self.kink_hash ^ word)
            .wrapping_mul(0x100_0000_01b3)
            .rotate_left(5);
    }

    pub(crate) fn record_stats(&mut self, update: RunningStatUpdate) {
        self.stat_updates.push(update);
    }
}

fn push_some(acc: &mut Vec<(Var, Vec<f64>)>, v: Var, g: Option<Vec<f64>>) {
    if let Some(g) = g {
        acc.push((v, g));
    }
}
