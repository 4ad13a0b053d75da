//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every forward op appends a node whose inputs are strictly earlier nodes, so
//! tape order is already a topological order and the backward sweep is a single
//! reverse pass. Backward rules can be overridden per op kind through
//! [`BackwardRules`]; that is how straight-through estimators are installed.
//!
//! ```
//! use auxq::autodiff::Graph;
//! use auxq::tensor::Tensor;
//!
//! let mut g = Graph::<f64>::new();
//! let w = g.param("w", Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap());
//! let x = g.constant(Tensor::from_f64(&[3], &[4.0, 5.0, 6.0]).unwrap());
//! let prod = g.mul(w, x).unwrap();
//! let loss = g.sum(prod).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.param("w").unwrap().data(), &[4.0, 5.0, 6.0]);
//! ```

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use indexmap::IndexMap;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::kernels::{self, ChannelLayout, ConvGeometry};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Op identity used for rule lookup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Conv2d,
    Add,
    Mul,
    Relu,
    BatchNorm,
    GlobalAvgPool,
    AdaptiveAvgPool,
    SoftmaxCrossEntropy,
    KlDivergence,
    Tanh,
    Clip,
    Scale,
    DivScalar,
    AddScalar,
    Round,
    Sign,
    Sum,
    Reshape,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// What a custom backward rule sees about the node it differentiates.
pub struct RuleContext<'a, T: Element> {
    pub op: OpKind,
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
}

/// Replacement backward rule: maps the upstream gradient to one gradient per
/// input (`None` for inputs that receive nothing).
pub trait BackwardRule<T: Element>: Send + Sync {
    fn backward(&self, ctx: &RuleContext<'_, T>, upstream: &Tensor<T>) -> Vec<Option<Tensor<T>>>;
}

impl<T, F> BackwardRule<T> for F
where
    T: Element,
    F: Fn(&RuleContext<'_, T>, &Tensor<T>) -> Vec<Option<Tensor<T>>> + Send + Sync,
{
    fn backward(&self, ctx: &RuleContext<'_, T>, upstream: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        self(ctx, upstream)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RuleHandle {
    op: OpKind,
    id: u64,
}

/// Registry of backward overrides, keyed by op kind.
pub struct BackwardRules<T: Element> {
    rules: HashMap<OpKind, (u64, Arc<dyn BackwardRule<T>>)>,
    next_id: u64,
}

impl<T: Element> Clone for BackwardRules<T> {
    fn clone(&self) -> Self {
        Self { rules: self.rules.clone(), next_id: self.next_id }
    }
}

impl<T: Element> Default for BackwardRules<T> {
    fn default() -> Self {
        Self { rules: HashMap::new(), next_id: 0 }
    }
}

impl<T: Element> BackwardRules<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Installs `rule` for every later backward through `op`, replacing the
    /// analytic rule entirely. Leaves cannot be overridden.
    pub fn register(&mut self, op: OpKind, rule: impl BackwardRule<T> + 'static) -> Result<RuleHandle> {
        if op == OpKind::Leaf {
            return Err(Error::usage("leaf nodes have no backward rule to replace"));
        }
        self.next_id += 1;
        self.rules.insert(op, (self.next_id, Arc::new(rule)));
        Ok(RuleHandle { op, id: self.next_id })
    }

    /// Removes the rule behind `handle` if it is still the active one.
    pub fn unregister(&mut self, handle: RuleHandle) -> bool {
        match self.rules.get(&handle.op) {
            Some((id, _)) if *id == handle.id => {
                self.rules.remove(&handle.op);
                true
            }
            _ => false,
        }
    }

    pub fn get(&self, op: OpKind) -> Option<&Arc<dyn BackwardRule<T>>> {
        self.rules.get(&op).map(|(_, r)| r)
    }

    pub fn is_overridden(&self, op: OpKind) -> bool {
        self.rules.contains_key(&op)
    }
}

/// Batch-norm mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics (and differentiate through them).
    Batch,
    /// Normalize with supplied running statistics.
    Running,
}

enum Op<T: Element> {
    Leaf,
    MatMul { m: usize, k: usize, n: usize },
    Conv2d(ConvGeometry),
    Add,
    Mul,
    Relu,
    BatchNorm { layout: ChannelLayout, xhat: Vec<T>, inv_std: Vec<T>, mode: NormMode },
    GlobalAvgPool,
    AdaptiveAvgPool { planes: usize, input: (usize, usize), output: (usize, usize) },
    SoftmaxCrossEntropy { probs: Vec<T>, labels: Vec<usize> },
    KlDivergence { teacher: Vec<T>, student: Vec<T>, temperature: T },
    Tanh,
    Clip { lo: T, hi: T },
    Scale(T),
    DivScalar(T),
    AddScalar(T),
    Round,
    Sign,
    Sum,
    Reshape,
}

impl<T: Element> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Conv2d(_) => OpKind::Conv2d,
            Op::Add => OpKind::Add,
            Op::Mul => OpKind::Mul,
            Op::Relu => OpKind::Relu,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::GlobalAvgPool => OpKind::GlobalAvgPool,
            Op::AdaptiveAvgPool { .. } => OpKind::AdaptiveAvgPool,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::KlDivergence { .. } => OpKind::KlDivergence,
            Op::Tanh => OpKind::Tanh,
            Op::Clip { .. } => OpKind::Clip,
            Op::Scale(_) => OpKind::Scale,
            Op::DivScalar(_) => OpKind::DivScalar,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::Round => OpKind::Round,
            Op::Sign => OpKind::Sign,
            Op::Sum => OpKind::Sum,
            Op::Reshape => OpKind::Reshape,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum LeafKind {
    Constant,
    Variable,
    Param(String),
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    inputs: Vec<Var>,
    requires_grad: bool,
    leaf: Option<LeafKind>,
}

/// Result of a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients<T: Element> {
    params: IndexMap<String, Tensor<T>>,
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a named parameter; `None` if no path from the loss reaches it.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    /// Gradient of any grad-requiring leaf.
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&var.0)
    }

    pub fn params(&self) -> &IndexMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> IndexMap<String, Tensor<T>> {
        self.params
    }
}

/// Tape of recorded operations. One graph per training step.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    rules: Arc<BackwardRules<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { op, detail: detail.into() }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), rules: Arc::new(BackwardRules::new()) }
    }

    pub fn with_rules(rules: Arc<BackwardRules<T>>) -> Self {
        Self { nodes: Vec::new(), rules }
    }

    pub fn rules(&self) -> &BackwardRules<T> {
        &self.rules
    }

    /// Overrides the backward rule of `op` for this graph.
    pub fn register_custom_backward(&mut self, op: OpKind, rule: impl BackwardRule<T> + 'static) -> Result<RuleHandle> {
        Arc::make_mut(&mut self.rules).register(op, rule)
    }

    pub fn unregister_custom_backward(&mut self, handle: RuleHandle) -> bool {
        Arc::make_mut(&mut self.rules).unregister(handle)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push_leaf(&mut self, value: Tensor<T>, leaf: LeafKind) -> Var {
        let requires_grad = leaf != LeafKind::Constant;
        self.nodes.push(Node { value, op: Op::Leaf, inputs: Vec::new(), requires_grad, leaf: Some(leaf) });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, LeafKind::Constant)
    }

    /// Unnamed leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, LeafKind::Variable)
    }

    /// Named trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        self.push_leaf(value, LeafKind::Param(name.into()))
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<Var>, value: Tensor<T>) -> Result<Var> {
        let kind = op.kind();
        if !value.all_finite() {
            return Err(Error::NumericFault {
                op: kind.to_string(),
                detail: format!("non-finite output of shape {:?}", value.shape()),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Without a grad-requiring input there is nothing to record.
        let (op, inputs) = if requires_grad { (op, inputs) } else { (Op::Leaf, Vec::new()) };
        let leaf = (!requires_grad).then_some(LeafKind::Constant);
        self.nodes.push(Node { value, op, inputs, requires_grad, leaf });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(op, vec![x], value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("add", format!("{sa:?} vs {sb:?}")));
        }
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add, vec![a, b], value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("mul", format!("{sa:?} vs {sb:?}")));
        }
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul, vec![a, b], value)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu, |v| if v > T::ZERO { v } else { T::ZERO })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh, |v| v.tanh())
    }

    pub fn clip(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        self.unary(x, Op::Clip { lo, hi }, |v| v.max(lo).min(hi))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        self.unary(x, Op::Scale(factor), |v| v * factor)
    }

    pub fn div_scalar(&mut self, x: Var, divisor: T) -> Result<Var> {
        self.unary(x, Op::DivScalar(divisor), |v| v / divisor)
    }

    pub fn add_scalar(&mut self, x: Var, offset: T) -> Result<Var> {
        self.unary(x, Op::AddScalar(offset), |v| v + offset)
    }

    /// Round half away from zero. Analytic gradient is zero everywhere.
    pub fn round(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Round, |v| v.round())
    }

    /// `sign(x)` with `sign(0) = +1`. Analytic gradient is zero everywhere.
    pub fn sign(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sign, |v| if v >= T::ZERO { T::ONE } else { -T::ONE })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum, vec![x], value)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(Op::Reshape, vec![x], value)
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(&[m, n], data)?;
        self.push(Op::MatMul { m, k, n }, vec![a, b], value)
    }

    /// NCHW convolution without bias; `weight` is `[O, C, KH, KW]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(weight));
        if sx.len() != 4 || sw.len() != 4 {
            return Err(shape_err("conv2d", format!("input {sx:?} and kernel {sw:?} must both be 4-d")));
        }
        if sx[1] != sw[1] {
            return Err(shape_err(
                "conv2d",
                format!("input has {} channels but kernel expects {} (input {sx:?}, kernel {sw:?})", sx[1], sw[1]),
            ));
        }
        if stride == 0 || sx[2] + 2 * padding < sw[2] || sx[3] + 2 * padding < sw[3] {
            return Err(shape_err(
                "conv2d",
                format!("kernel {sw:?} with stride {stride}, padding {padding} does not fit input {sx:?}"),
            ));
        }
        let geom = ConvGeometry {
            batch: sx[0],
            in_channels: sx[1],
            height: sx[2],
            width: sx[3],
            out_channels: sw[0],
            kernel_h: sw[2],
            kernel_w: sw[3],
            stride,
            padding,
        };
        let data = kernels::conv2d(&geom, self.value(x).data(), self.value(weight).data());
        let value = Tensor::new(&[geom.batch, geom.out_channels, geom.out_h(), geom.out_w()], data)?;
        self.push(Op::Conv2d(geom), vec![x, weight], value)
    }

    fn channel_layout(&self, op: &'static str, x: Var, channels: usize) -> Result<ChannelLayout> {
        let s = self.shape(x);
        if s.len() < 2 || s[1] != channels {
            return Err(shape_err(op, format!("input {s:?} does not have {channels} channels on axis 1")));
        }
        Ok(ChannelLayout { batch: s[0], channels: s[1], spatial: s[2..].iter().product() })
    }

    /// Per-channel batch normalization over `[N, C, ...]`.
    ///
    /// In [`NormMode::Batch`] returns the biased batch mean and variance
    /// alongside the output so the caller can update running statistics.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        running: (&[T], &[T]),
        eps: T,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let channels = self.value(gamma).numel();
        let layout = self.channel_layout("batchnorm", x, channels)?;
        if self.value(beta).numel() != channels || running.0.len() != channels || running.1.len() != channels {
            return Err(shape_err("batchnorm", format!("affine/statistics length mismatch for {channels} channels")));
        }
        let xs = self.value(x).data();
        let (mean, var, batch_stats) = match mode {
            NormMode::Batch => {
                let (m, v) = kernels::channel_moments(&layout, xs);
                (m.clone(), v.clone(), Some((m, v)))
            }
            NormMode::Running => (running.0.to_vec(), running.1.to_vec(), None),
        };
        let (y, xhat, inv_std) =
            kernels::batchnorm_apply(&layout, xs, &mean, &var, self.value(gamma).data(), self.value(beta).data(), eps);
        let value = Tensor::new(self.shape(x), y)?;
        let v = self.push(Op::BatchNorm { layout, xhat, inv_std, mode }, vec![x, gamma, beta], value)?;
        Ok((v, batch_stats))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("global_avg_pool", format!("expected NCHW, got {s:?}")));
        }
        let plane = s[2] * s[3];
        let div = T::from_usize(plane);
        let data: Vec<T> = self.value(x).data().chunks(plane).map(|p| p.iter().copied().sum::<T>() / div).collect();
        let value = Tensor::new(&[s[0], s[1]], data)?;
        self.push(Op::GlobalAvgPool, vec![x], value)
    }

    /// Averages over adaptive windows down to `[N, C, oh, ow]`.
    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || oh == 0 || ow == 0 || oh > s[2] || ow > s[3] {
            return Err(shape_err("adaptive_avg_pool", format!("cannot pool {s:?} to {oh}×{ow}")));
        }
        let planes = s[0] * s[1];
        let data = kernels::adaptive_avg_pool(self.value(x).data(), planes, (s[2], s[3]), (oh, ow));
        let value = Tensor::new(&[s[0], s[1], oh, ow], data)?;
        self.push(Op::AdaptiveAvgPool { planes, input: (s[2], s[3]), output: (oh, ow) }, vec![x], value)
    }

    /// Mean softmax cross-entropy of `[N, C]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(shape_err("softmax_cross_entropy", format!("logits {s:?} with {} labels", labels.len())));
        }
        let classes = s[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::usage(format!("label {bad} out of range for {classes} classes")));
        }
        let logp = kernels::log_softmax_rows(self.value(logits).data(), classes, T::ONE);
        let total: T = labels.iter().enumerate().map(|(i, &l)| -logp[i * classes + l]).sum();
        let probs = logp.iter().map(|&v| v.exp()).collect();
        let value = Tensor::scalar(total / T::from_usize(s[0]));
        self.push(Op::SoftmaxCrossEntropy { probs, labels: labels.to_vec() }, vec![logits], value)
    }

    /// Mean over rows of `KL(softmax(teacher/T) ‖ softmax(student/T))`.
    /// The teacher logits are a constant.
    pub fn kl_divergence(&mut self, student: Var, teacher_logits: &Tensor<T>, temperature: T) -> Result<Var> {
        let s = self.shape(student).to_vec();
        if s.len() != 2 || teacher_logits.shape() != s.as_slice() {
            return Err(shape_err("kl_divergence", format!("student {s:?} vs teacher {:?}", teacher_logits.shape())));
        }
        let classes = s[1];
        let teacher_logp = kernels::log_softmax_rows(teacher_logits.data(), classes, temperature);
        let student_logp = kernels::log_softmax_rows(self.value(student).data(), classes, temperature);
        let teacher: Vec<T> = teacher_logp.iter().map(|&v| v.exp()).collect();
        let mut total = T::ZERO;
        for i in 0..teacher.len() {
            if teacher[i] > T::ZERO {
                total += teacher[i] * (teacher_logp[i] - student_logp[i]);
            }
        }
        let value = Tensor::scalar(total / T::from_usize(s[0]));
        let student_probs = student_logp.iter().map(|&v| v.exp()).collect();
        self.push(Op::KlDivergence { teacher, student: student_probs, temperature }, vec![student], value)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.backward_seeded(&[(loss, T::ONE)])
    }

    /// Reverse sweep from several scalar roots, each seeded with its weight.
    /// The result is the gradient of `Σ weight_i · root_i`.
    pub fn backward_seeded(&self, roots: &[(Var, T)]) -> Result<Gradients<T>> {
        if roots.is_empty() {
            return Err(Error::usage("backward needs at least one root"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        let mut top = 0;
        for &(root, weight) in roots {
            let node = self.nodes.get(root.0).ok_or_else(|| Error::usage("root is not on this graph"))?;
            if node.value.numel() != 1 {
                return Err(Error::usage(format!("backward root must be scalar, got shape {:?}", node.value.shape())));
            }
            let seed = Tensor::full(node.value.shape(), weight);
            accumulate(&mut grads[root.0], seed);
            top = top.max(root.0);
        }

        let mut params = IndexMap::new();
        let mut leaves = HashMap::new();
        for idx in (0..=top).rev() {
            let Some(upstream) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Some(leaf) = &node.leaf {
                match leaf {
                    LeafKind::Param(name) => {
                        match params.get_mut(name) {
                            Some(existing) => Tensor::add_assign(existing, &upstream),
                            None => {
                                params.insert(name.clone(), upstream.clone());
                            }
                        }
                        leaves.insert(idx, upstream);
                    }
                    LeafKind::Variable => {
                        leaves.insert(idx, upstream);
                    }
                    LeafKind::Constant => {}
                }
                continue;
            }
            let input_grads = self.node_backward(node, &upstream)?;
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if input.0 >= idx {
                    return Err(Error::Internal(format!("tape order violated at node {idx}")));
                }
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut grads[input.0], g);
                }
            }
        }
        Ok(Gradients { params, leaves })
    }

    fn node_backward(&self, node: &Node<T>, dy: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let kind = node.op.kind();
        if let Some(rule) = self.rules.get(kind) {
            let ctx = RuleContext {
                op: kind,
                inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                output: &node.value,
            };
            let out = rule.backward(&ctx, dy);
            if out.len() != node.inputs.len() {
                return Err(Error::NumericFault {
                    op: kind.to_string(),
                    detail: format!("custom rule returned {} gradients for {} inputs", out.len(), node.inputs.len()),
                });
            }
            for (g, input) in out.iter().zip(&ctx.inputs) {
                if let Some(g) = g {
                    if g.shape() != input.shape() {
                        return Err(Error::NumericFault {
                            op: kind.to_string(),
                            detail: format!(
                                "custom rule produced gradient {:?} for input {:?}",
                                g.shape(),
                                input.shape()
                            ),
                        });
                    }
                }
            }
            return Ok(out);
        }
        self.analytic_backward(node, dy)
    }

    fn input(&self, node: &Node<T>, i: usize) -> &Tensor<T> {
        &self.nodes[node.inputs[i].0].value
    }

    fn wants(&self, node: &Node<T>, i: usize) -> bool {
        self.nodes[node.inputs[i].0].requires_grad
    }

    fn analytic_backward(&self, node: &Node<T>, dy: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let x0 = || self.input(node, 0);
        let grads = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add => vec![Some(dy.clone()), Some(dy.clone())],
            Op::Mul => {
                let (a, b) = (x0(), self.input(node, 1));
                vec![Some(dy.zip_map(b, |g, v| g * v)), Some(dy.zip_map(a, |g, v| g * v))]
            }
            Op::Relu => vec![Some(dy.zip_map(x0(), |g, v| if v > T::ZERO { g } else { T::ZERO }))],
            Op::Tanh => vec![Some(dy.zip_map(&node.value, |g, y| g * (T::ONE - y * y)))],
            Op::Clip { lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                vec![Some(dy.zip_map(x0(), |g, v| if v >= lo && v <= hi { g } else { T::ZERO }))]
            }
            Op::Scale(f) => vec![Some(dy.scale(*f))],
            Op::DivScalar(d) => {
                let d = *d;
                vec![Some(dy.map(|g| g / d))]
            }
            Op::AddScalar(_) | Op::Reshape => {
                vec![Some(Tensor::new(x0().shape(), dy.data().to_vec())?)]
            }
            Op::Round | Op::Sign => vec![Some(Tensor::zeros(x0().shape()))],
            Op::Sum => vec![Some(Tensor::full(x0().shape(), dy.item()))],
            Op::MatMul { m, k, n } => {
                let (da, db) = kernels::matmul_backward(x0().data(), self.input(node, 1).data(), dy.data(), *m, *k, *n);
                vec![Some(Tensor::new(&[*m, *k], da)?), Some(Tensor::new(&[*k, *n], db)?)]
            }
            Op::Conv2d(geom) => {
                let (dx, dw) = kernels::conv2d_backward(
                    geom,
                    x0().data(),
                    self.input(node, 1).data(),
                    dy.data(),
                    self.wants(node, 0),
                    self.wants(node, 1),
                );
                vec![
                    dx.map(|d| Tensor::new(x0().shape(), d)).transpose()?,
                    dw.map(|d| Tensor::new(self.input(node, 1).shape(), d)).transpose()?,
                ]
            }
            Op::BatchNorm { layout, xhat, inv_std, mode } => {
                let gamma = self.input(node, 1);
                let (dx, dg, db) = kernels::batchnorm_backward(
                    layout,
                    dy.data(),
                    xhat,
                    inv_std,
                    gamma.data(),
                    *mode == NormMode::Batch,
                );
                vec![
                    Some(Tensor::new(x0().shape(), dx)?),
                    Some(Tensor::new(gamma.shape(), dg)?),
                    Some(Tensor::new(self.input(node, 2).shape(), db)?),
                ]
            }
            Op::GlobalAvgPool => {
                let s = x0().shape();
                let plane = s[2] * s[3];
                let div = T::from_usize(plane);
                let mut dx = Vec::with_capacity(x0().numel());
                for &g in dy.data() {
                    dx.extend(std::iter::repeat_n(g / div, plane));
                }
                vec![Some(Tensor::new(s, dx)?)]
            }
            Op::AdaptiveAvgPool { planes, input, output } => {
                let dx = kernels::adaptive_avg_pool_backward(dy.data(), *planes, *input, *output);
                vec![Some(Tensor::new(x0().shape(), dx)?)]
            }
            Op::SoftmaxCrossEntropy { probs, labels } => {
                let s = x0().shape();
                let classes = s[1];
                let scale = dy.item() / T::from_usize(s[0]);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dx[i * classes + l] -= scale;
                }
                vec![Some(Tensor::new(s, dx)?)]
            }
            Op::KlDivergence { teacher, student, temperature } => {
                let s = x0().shape();
                let scale = dy.item() / (T::from_usize(s[0]) * *temperature);
                let dx = student.iter().zip(teacher).map(|(&q, &p)| (q - p) * scale).collect();
                vec![Some(Tensor::new(s, dx)?)]
            }
        };
        Ok(grads)
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn conv_all_ones_gives_fours() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert!(g.value(y).data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn add_zero_is_bit_exact() {
        let mut g = Graph::<f32>::new();
        let vals = Tensor::new(&[4], vec![1.5f32, 0.0, 3.25e-7, -8.0]).unwrap();
        let x = g.constant(vals.clone());
        let z = g.constant(Tensor::zeros(&[4]));
        let y = g.add(x, z).unwrap();
        assert!(g.value(y).bit_eq(&vals));
    }

    #[test]
    fn linear_form_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.param("w", t(&[3], &[0.3, -0.1, 2.0]));
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let p = g.mul(w, x).unwrap();
        let l = g.sum(p).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.param("w").unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn relu_flat_region_has_zero_grad() {
        let mut g = Graph::<f64>::new();
        let w = g.param("w", t(&[], &[-1.0]));
        let y = g.relu(w).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.param("w").unwrap().data(), &[0.0]);
    }

    #[test]
    fn unreached_params_are_absent() {
        let mut g = Graph::<f64>::new();
        let w = g.param("w", t(&[1], &[1.0]));
        let _dead = g.param("dead", t(&[1], &[1.0]));
        let l = g.sum(w).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.param("w").is_some());
        assert!(grads.param("dead").is_none());
    }

    #[test]
    fn non_scalar_root_is_usage_error() {
        let mut g = Graph::<f64>::new();
        let w = g.param("w", t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(w), Err(Error::Usage(_))));
    }

    #[test]
    fn shape_mismatch_names_op_and_dims() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = g.constant(Tensor::zeros(&[2, 2, 3, 3]));
        let msg = g.conv2d(x, w, 1, 1).unwrap_err().to_string();
        assert!(msg.contains("conv2d") && msg.contains("3 channels"), "{msg}");
    }

    #[test]
    fn non_finite_output_is_numeric_fault() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1], &[1.0]));
        let err = g.div_scalar(x, 0.0).unwrap_err();
        assert!(matches!(err, Error::NumericFault { .. }));
    }

    #[test]
    fn round_without_rule_has_zero_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[4], &[0.2, 0.7, 1.5, -2.3]));
        let y = g.round(x).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.wrt(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_rule_passes_gradient_through_round() {
        let mut g = Graph::<f64>::new();
        g.register_custom_backward(OpKind::Round, |_: &RuleContext<'_, f64>, up: &Tensor<f64>| vec![Some(up.clone())])
            .unwrap();
        let x = g.variable(t(&[3], &[0.2, 0.7, 1.5]));
        let y = g.round(x).unwrap();
        let s = g.scale(y, 3.0).unwrap();
        let l = g.sum(s).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn unregistered_rule_restores_analytic() {
        let mut g = Graph::<f64>::new();
        let h = g
            .register_custom_backward(OpKind::Round, |_: &RuleContext<'_, f64>, up: &Tensor<f64>| {
                vec![Some(up.clone())]
            })
            .unwrap();
        assert!(g.unregister_custom_backward(h));
        assert!(!g.unregister_custom_backward(h));
        let x = g.variable(t(&[1], &[0.2]));
        let y = g.round(x).unwrap();
        let l = g.sum(y).unwrap();
        assert_eq!(g.backward(l).unwrap().wrt(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn misbehaving_rule_is_numeric_fault_naming_op() {
        let mut g = Graph::<f64>::new();
        g.register_custom_backward(OpKind::Tanh, |_: &RuleContext<'_, f64>, _: &Tensor<f64>| {
            vec![Some(Tensor::zeros(&[7]))]
        })
        .unwrap();
        let x = g.variable(t(&[2], &[0.1, 0.2]));
        let y = g.tanh(x).unwrap();
        let l = g.sum(y).unwrap();
        match g.backward(l) {
            Err(Error::NumericFault { op, .. }) => assert_eq!(op, "Tanh"),
            other => panic!("expected numeric fault, got {other:?}"),
        }
    }

    #[test]
    fn seeded_backward_is_linear() {
        let build = |g: &mut Graph<f64>| {
            let w = g.param("w", t(&[2], &[0.4, -1.3]));
            let a = g.tanh(w).unwrap();
            let l1 = g.sum(a).unwrap();
            let sq = g.mul(w, w).unwrap();
            let l2 = g.sum(sq).unwrap();
            (l1, l2)
        };
        let mut g = Graph::new();
        let (l1, l2) = build(&mut g);
        let both = g.backward_seeded(&[(l1, 2.0), (l2, -0.5)]).unwrap();
        let g1 = g.backward(l1).unwrap();
        let g2 = g.backward(l2).unwrap();
        for i in 0..2 {
            let want = 2.0 * g1.param("w").unwrap().data()[i] - 0.5 * g2.param("w").unwrap().data()[i];
            assert!((both.param("w").unwrap().data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_do_not_record_ops() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[1.0, 2.0]));
        let y = g.tanh(x).unwrap();
        assert_eq!(g.op_kind(y), OpKind::Leaf);
        assert!(!g.requires_grad(y));
    }
}
