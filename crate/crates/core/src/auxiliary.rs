//! Full-precision auxiliary module `H` and the joint objective.
//!
//! `H` reads the backbone's tapped block outputs `O_1..O_P`. Each tap passes
//! through an adaptor (conv + BN) and is folded into a running aggregate:
//!
//! ```text
//! g_p = ReLU(φ_p(O_p) + g_{p-1}),   g_0 = 0
//! y_H = dense(avgpool(g_P))
//! ```
//!
//! Training minimizes `L(y_F) + L_aux(y_H)`. Backbone parameters receive the
//! average `½(∂L/∂θ + ∂L_aux/∂θ)`; auxiliary parameters receive `∂L_aux/∂θ`.
//! The module is never consulted at inference.
//!
//! The two comparison objectives live here too: per-tap classifier heads
//! (`L + Σ α_i ℓ_i`) and distillation from a frozen full-precision teacher.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::layers::{add_bn, apply_bn_updates, Binder, Buffers, Mode};
use crate::net::{Network, NetworkSpec};
use crate::param::{he_normal, ParamStore};
use crate::quant::{self, QuantScheme};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub const DEFAULT_AGGREGATOR_WIDTH: usize = 64;
pub const DEFAULT_KD_TEMPERATURE: f64 = 4.0;
pub const DEFAULT_KD_WEIGHT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptorSpec {
    /// Square kernel size: 1 or 3.
    pub kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxiliarySpec {
    /// One adaptor per backbone tap, in tap order.
    pub adaptors: Vec<AdaptorSpec>,
    /// Channel width of every adaptor output and aggregate.
    #[serde(default = "default_width")]
    pub width: usize,
}

fn default_width() -> usize {
    DEFAULT_AGGREGATOR_WIDTH
}

impl AuxiliarySpec {
    /// One `kernel`×`kernel` adaptor per tap of `net`.
    pub fn for_backbone(net: &NetworkSpec, kernel: usize, width: usize) -> Self {
        Self { adaptors: vec![AdaptorSpec { kernel }; net.taps().len()], width }
    }

    pub fn violations(&self, net: &NetworkSpec) -> Vec<String> {
        let mut v = Vec::new();
        let taps = net.tap_signature();
        if self.adaptors.len() != taps.len() {
            v.push(format!(
                "auxiliary module has {} adaptors but the backbone exposes {} taps",
                self.adaptors.len(),
                taps.len()
            ));
        }
        if self.width == 0 {
            v.push("auxiliary width must be positive".into());
        }
        for (p, a) in self.adaptors.iter().enumerate() {
            if a.kernel != 1 && a.kernel != 3 {
                v.push(format!("adaptors[{p}].kernel must be 1 or 3, got {}", a.kernel));
            }
        }
        for (p, w) in taps.windows(2).enumerate() {
            if w[1].1 > w[0].1 || w[1].2 > w[0].2 {
                v.push(format!(
                    "tap {} is larger ({}×{}) than tap {} ({}×{}); aggregates can only shrink",
                    p + 1,
                    w[1].1,
                    w[1].2,
                    p,
                    w[0].1,
                    w[0].2
                ));
            }
        }
        v
    }

    pub fn validate(&self, net: &NetworkSpec) -> Result<()> {
        let v = self.violations(net);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }

    pub fn parameter_count(&self, net: &NetworkSpec) -> usize {
        let conv: usize = self
            .adaptors
            .iter()
            .zip(net.tap_signature())
            .map(|(a, (c, _, _))| a.kernel * a.kernel * c * self.width + 2 * self.width)
            .sum();
        conv + self.width * net.num_classes
    }
}

/// `g_p = ReLU(adapted + prev)`, with `prev = None` standing for `g_0 = 0`.
pub fn aggregate<T: Element>(g: &mut Graph<T>, adapted: Var, prev: Option<Var>, tap: usize) -> Result<Var> {
    match prev {
        None => g.relu(adapted),
        Some(prev) => {
            if g.shape(adapted) != g.shape(prev) {
                return Err(Error::Shape {
                    op: "aggregate",
                    detail: format!(
                        "tap {tap}: adapted feature {:?} vs previous aggregate {:?}",
                        g.shape(adapted),
                        g.shape(prev)
                    ),
                });
            }
            let sum = g.add(adapted, prev)?;
            g.relu(sum)
        }
    }
}

/// Built auxiliary module. Every parameter is full precision.
#[derive(Debug, Clone)]
pub struct AuxiliaryModule<T: Element> {
    spec: AuxiliarySpec,
    tap_signature: Vec<(usize, usize, usize)>,
    num_classes: usize,
    params: ParamStore<T>,
    buffers: Buffers<T>,
}

impl<T: Element> AuxiliaryModule<T> {
    /// He-initialized module matched to `net`'s tap signature.
    pub fn build(spec: &AuxiliarySpec, net: &NetworkSpec, seed: u64) -> Result<Self> {
        net.validate()?;
        spec.validate(net)?;
        let mut rng = rng::stream(seed, Stream::AuxInit);
        let mut params = ParamStore::new();
        let mut buffers = Buffers::new();
        let sig = net.tap_signature();
        for (p, (a, &(c, _, _))) in spec.adaptors.iter().zip(&sig).enumerate() {
            let k = a.kernel;
            params.insert(
                format!("aux.adaptors.{p}.conv.weight"),
                he_normal(&[spec.width, c, k, k], c * k * k, &mut rng),
            );
            add_bn(&mut params, &mut buffers, &format!("aux.adaptors.{p}.bn"), spec.width);
        }
        params.insert("aux.classifier.weight", he_normal(&[spec.width, net.num_classes], spec.width, &mut rng));
        Ok(Self { spec: spec.clone(), tap_signature: sig, num_classes: net.num_classes, params, buffers })
    }

    pub fn spec(&self) -> &AuxiliarySpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn buffers(&self) -> &Buffers<T> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut Buffers<T> {
        &mut self.buffers
    }

    /// Scheme of every parameter; always [`QuantScheme::Full`].
    pub fn precision_report(&self) -> Vec<(String, QuantScheme)> {
        self.params.names().map(|n| (n.to_string(), QuantScheme::Full)).collect()
    }

    /// Zeroes the classifier weights.
    pub fn zero_classifier(&mut self) {
        if let Some(p) = self.params.get_mut("aux.classifier.weight") {
            p.master.data_mut().fill(T::ZERO);
        }
    }

    pub fn check_compatible(&self, net: &NetworkSpec) -> Result<()> {
        let sig = net.tap_signature();
        if sig != self.tap_signature || net.num_classes != self.num_classes {
            return Err(Error::Validation(vec![format!(
                "auxiliary module was built for taps {:?} with {} classes, backbone exposes {:?} with {}",
                self.tap_signature, self.num_classes, sig, net.num_classes
            )]));
        }
        Ok(())
    }

    /// Records `H` on `g` given the tapped block outputs; returns `y_H`.
    pub fn forward(&mut self, g: &mut Graph<T>, taps: &[Var], mode: Mode) -> Result<Var> {
        let mut binder = Binder::new(&self.params, &self.buffers, mode, false);
        let y = aux_forward(&self.spec, &mut binder, g, taps)?;
        let updates = binder.into_updates();
        apply_bn_updates(&mut self.buffers, updates);
        Ok(y)
    }
}

fn aux_forward<T: Element>(
    spec: &AuxiliarySpec,
    binder: &mut Binder<'_, T>,
    g: &mut Graph<T>,
    taps: &[Var],
) -> Result<Var> {
    if taps.len() != spec.adaptors.len() {
        return Err(Error::Validation(vec![format!(
            "auxiliary module expects {} taps, got {}",
            spec.adaptors.len(),
            taps.len()
        )]));
    }
    let mut agg: Option<Var> = None;
    for (p, (&tap, a)) in taps.iter().zip(&spec.adaptors).enumerate() {
        let w = binder.param(g, &format!("aux.adaptors.{p}.conv.weight"));
        let h = g.conv2d(tap, w, 1, a.kernel / 2)?;
        let adapted = binder.batchnorm(g, h, &format!("aux.adaptors.{p}.bn"))?;
        let prev = match agg {
            Some(prev) => {
                let (ps, ts) = (g.shape(prev).to_vec(), g.shape(adapted).to_vec());
                if ps[2] > ts[2] || ps[3] > ts[3] {
                    Some(g.adaptive_avg_pool(prev, ts[2], ts[3])?)
                } else {
                    Some(prev)
                }
            }
            None => None,
        };
        agg = Some(aggregate(g, adapted, prev, p)?);
    }
    let last = agg.ok_or_else(|| Error::Validation(vec!["auxiliary module needs at least one tap".into()]))?;
    let pooled = g.global_avg_pool(last)?;
    let w = binder.param(g, "aux.classifier.weight");
    g.matmul(pooled, w)
}

/// Handles for one mixed forward pass.
#[derive(Debug, Clone)]
pub struct MixedOutput {
    pub y_f: Var,
    pub y_h: Var,
    pub taps: Vec<Var>,
}

/// Runs `F` and `F∘H` on one graph. `H` only reads the taps.
pub fn forward_mixed<T: Element>(
    g: &mut Graph<T>,
    net: &mut Network<T>,
    aux: &mut AuxiliaryModule<T>,
    x: Var,
    mode: Mode,
) -> Result<MixedOutput> {
    aux.check_compatible(net.spec())?;
    let out = net.forward(g, x, mode)?;
    let y_h = aux.forward(g, &out.taps, mode)?;
    Ok(MixedOutput { y_f: out.logits, y_h, taps: out.taps })
}

/// `(L, L_aux)`: cross-entropy of both heads.
pub fn joint_loss<T: Element>(g: &mut Graph<T>, y_f: Var, y_h: Var, labels: &[usize]) -> Result<(Var, Var)> {
    if g.shape(y_f)[0] != g.shape(y_h)[0] {
        return Err(Error::usage(format!("batch sizes disagree: y_F {:?} vs y_H {:?}", g.shape(y_f), g.shape(y_h))));
    }
    let l = g.softmax_cross_entropy(y_f, labels)?;
    let l_aux = g.softmax_cross_entropy(y_h, labels)?;
    Ok((l, l_aux))
}

/// Per-parameter gradients of the joint step.
#[derive(Debug, Clone)]
pub struct JointGradients<T: Element> {
    /// `∂L/∂θ`; absent for parameters `L` does not reach.
    pub main: Option<Tensor<T>>,
    /// `∂L_aux/∂θ`.
    pub aux: Option<Tensor<T>>,
    /// What the optimizer receives.
    pub applied: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct JointGradientReport<T: Element> {
    pub backbone: IndexMap<String, JointGradients<T>>,
    pub auxiliary: IndexMap<String, JointGradients<T>>,
}

impl<T: Element> JointGradientReport<T> {
    pub fn get(&self, name: &str) -> Option<&JointGradients<T>> {
        self.backbone.get(name).or_else(|| self.auxiliary.get(name))
    }
}

/// Gradients handed to the optimizer for one joint step, from a single
/// reverse sweep seeded with `½` on both losses. Auxiliary parameters, which
/// only `L_aux` reaches, are rescaled by 2 to undo the seed.
pub fn joint_applied_gradients<T: Element>(
    g: &Graph<T>,
    loss: Var,
    aux_loss: Var,
    aux_params: &ParamStore<T>,
) -> Result<IndexMap<String, Tensor<T>>> {
    let half = T::from_f64(0.5);
    let grads = g.backward_seeded(&[(loss, half), (aux_loss, half)])?;
    let two = T::from_f64(2.0);
    Ok(grads
        .into_params()
        .into_iter()
        .map(|(name, t)| {
            let t = if aux_params.contains(&name) { t.scale(two) } else { t };
            (name, t)
        })
        .collect())
}

/// Full report: separate sweeps for `∂L` and `∂L_aux` plus the applied
/// (averaged) gradient from [`joint_applied_gradients`].
pub fn joint_backward<T: Element>(
    g: &Graph<T>,
    loss: Var,
    aux_loss: Var,
    net: &Network<T>,
    aux: &AuxiliaryModule<T>,
) -> Result<JointGradientReport<T>> {
    let main = g.backward(loss)?;
    let side = g.backward(aux_loss)?;
    let mut applied = joint_applied_gradients(g, loss, aux_loss, aux.params())?;
    let mut collect = |names: Vec<&str>| -> IndexMap<String, JointGradients<T>> {
        names
            .into_iter()
            .filter_map(|name| {
                let applied = applied.swap_remove(name)?;
                Some((
                    name.to_string(),
                    JointGradients { main: main.param(name).cloned(), aux: side.param(name).cloned(), applied },
                ))
            })
            .collect()
    };
    let backbone = collect(net.params().names().collect());
    let auxiliary = collect(aux.params().names().collect());
    Ok(JointGradientReport { backbone, auxiliary })
}

/// Lightweight per-tap classifiers (global pool + dense) for the
/// additional-loss baseline. Full precision.
#[derive(Debug, Clone)]
pub struct TapHeads<T: Element> {
    params: ParamStore<T>,
    channels: Vec<usize>,
}

impl<T: Element> TapHeads<T> {
    pub fn build(net: &NetworkSpec, seed: u64) -> Result<Self> {
        net.validate()?;
        let mut rng = rng::salted_stream(seed, Stream::AuxInit, "tap-heads");
        let mut params = ParamStore::new();
        let channels: Vec<usize> = net.tap_signature().iter().map(|s| s.0).collect();
        for (i, &c) in channels.iter().enumerate() {
            params.insert(format!("heads.{i}.weight"), he_normal(&[c, net.num_classes], c, &mut rng));
        }
        Ok(Self { params, channels })
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Logits of every head.
    pub fn forward(&self, g: &mut Graph<T>, taps: &[Var]) -> Result<Vec<Var>> {
        if taps.len() != self.channels.len() {
            return Err(Error::usage(format!("{} heads but {} taps", self.channels.len(), taps.len())));
        }
        let empty = Buffers::new();
        let mut binder = Binder::new(&self.params, &empty, Mode::Train, false);
        taps.iter()
            .enumerate()
            .map(|(i, &t)| {
                let pooled = g.global_avg_pool(t)?;
                let w = binder.param(g, &format!("heads.{i}.weight"));
                g.matmul(pooled, w)
            })
            .collect()
    }
}

/// `L + Σ_i α_i ℓ_i` where `ℓ_i` is the cross-entropy of head `i`.
/// Returns `(total, L)`.
pub fn additional_loss_baseline<T: Element>(
    g: &mut Graph<T>,
    logits: Var,
    head_logits: &[Var],
    labels: &[usize],
    alphas: &[f64],
) -> Result<(Var, Var)> {
    if alphas.len() != head_logits.len() {
        return Err(Error::usage(format!("{} weights for {} heads", alphas.len(), head_logits.len())));
    }
    if let Some(a) = alphas.iter().find(|a| !(**a >= 0.0) || !a.is_finite()) {
        return Err(Error::usage(format!("head weights must be finite and non-negative, got {a}")));
    }
    let main = g.softmax_cross_entropy(logits, labels)?;
    let mut total = main;
    for (&h, &alpha) in head_logits.iter().zip(alphas) {
        if alpha == 0.0 {
            continue;
        }
        let l = g.softmax_cross_entropy(h, labels)?;
        let weighted = g.scale(l, T::from_f64(alpha))?;
        total = g.add(total, weighted)?;
    }
    Ok((total, main))
}

/// Logits of a frozen full-precision teacher.
pub fn teacher_logits<T: Element>(teacher: &Network<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if !teacher.is_frozen() {
        return Err(Error::usage("distillation teacher must be frozen"));
    }
    if !teacher.spec().policy.is_full() {
        return Err(Error::usage("distillation teacher must be full precision"));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = teacher.forward_eval(&mut g, xv)?;
    Ok(g.value(out.logits).clone())
}

/// `CE(student) + β·T²·KL(soften(teacher, T) ‖ soften(student, T))`.
/// Returns `(total, CE, KL)`.
pub fn kd_baseline<T: Element>(
    g: &mut Graph<T>,
    student_logits: Var,
    teacher_logits: &Tensor<T>,
    labels: &[usize],
    beta: f64,
    temperature: f64,
) -> Result<(Var, Var, Var)> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::usage(format!("temperature must be positive, got {temperature}")));
    }
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::usage(format!("distillation weight must be non-negative, got {beta}")));
    }
    let s = g.shape(student_logits);
    if s.len() != 2 || teacher_logits.shape().get(1) != s.get(1) {
        return Err(Error::usage(format!(
            "class counts differ: student {:?} vs teacher {:?}",
            s,
            teacher_logits.shape()
        )));
    }
    let ce = g.softmax_cross_entropy(student_logits, labels)?;
    let kl = g.kl_divergence(student_logits, teacher_logits, T::from_f64(temperature))?;
    if beta == 0.0 {
        return Ok((ce, ce, kl));
    }
    let weighted = g.scale(kl, T::from_f64(beta * temperature * temperature))?;
    let total = g.add(ce, weighted)?;
    Ok((total, ce, kl))
}

/// Installs STE rules on a fresh graph; used by every training path.
pub fn training_graph<T: Element>() -> Graph<T> {
    quant::ste_graph()
}
