//! The low-precision backbone: a stem convolution, a chain of residual or
//! plain blocks, and a pooled dense classifier. Selected block outputs are
//! exposed as taps for the auxiliary module.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::layers::{add_bn, apply_bn_updates, Binder, Buffers, Mode};
use crate::param::{he_normal, ParamStore};
use crate::quant::{self, PrecisionPolicy, QuantScheme};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Residual,
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub out_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_kernel() -> usize {
    3
}

fn default_stride() -> usize {
    1
}

/// Two 3×3 conv + BN pairs. Residual blocks add a skip path (identity, or a
/// 1×1 projection + BN when the shape changes) before the final activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub kind: BlockKind,
}

impl BlockSpec {
    pub fn has_projection(&self) -> bool {
        self.kind == BlockKind::Residual && (self.stride != 1 || self.in_channels != self.out_channels)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: InputShape,
    pub stem: StemSpec,
    pub blocks: Vec<BlockSpec>,
    pub num_classes: usize,
    pub policy: PrecisionPolicy,
    /// Block positions whose outputs feed the auxiliary module; every block when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tap_indices: Option<Vec<usize>>,
}

/// Widths of the four-block presets.
pub const PRESET_WIDTHS: [usize; 4] = [16, 32, 64, 64];
pub const PRESET_STRIDES: [usize; 4] = [1, 2, 2, 2];

impl NetworkSpec {
    /// `plain4` or `res4`: stem to 16 channels, then blocks of widths
    /// 16-32-64-64 with strides 1-2-2-2.
    pub fn preset(name: &str, input: InputShape, num_classes: usize, policy: PrecisionPolicy) -> Result<Self> {
        let kind = match name {
            "plain4" => BlockKind::Plain,
            "res4" => BlockKind::Residual,
            other => return Err(Error::usage(format!("unknown network preset {other:?} (expected plain4 or res4)"))),
        };
        let mut blocks = Vec::new();
        let mut prev = PRESET_WIDTHS[0];
        for (&w, &s) in PRESET_WIDTHS.iter().zip(&PRESET_STRIDES) {
            blocks.push(BlockSpec { in_channels: prev, out_channels: w, stride: s, kind });
            prev = w;
        }
        Ok(Self {
            input,
            stem: StemSpec { out_channels: PRESET_WIDTHS[0], kernel: 3, stride: 1 },
            blocks,
            num_classes,
            policy,
            tap_indices: None,
        })
    }

    pub fn taps(&self) -> Vec<usize> {
        self.tap_indices.clone().unwrap_or_else(|| (0..self.blocks.len()).collect())
    }

    pub fn feature_channels(&self) -> usize {
        self.blocks.last().map_or(self.stem.out_channels, |b| b.out_channels)
    }

    /// `(channels, height, width)` of every block output, in order.
    pub fn block_output_shapes(&self) -> Vec<(usize, usize, usize)> {
        let conv_out = |size: usize, k: usize, s: usize| (size + 2 * (k / 2)).saturating_sub(k) / s.max(1) + 1;
        let mut h = conv_out(self.input.height, self.stem.kernel, self.stem.stride);
        let mut w = conv_out(self.input.width, self.stem.kernel, self.stem.stride);
        self.blocks
            .iter()
            .map(|b| {
                h = conv_out(h, 3, b.stride);
                w = conv_out(w, 3, b.stride);
                (b.out_channels, h, w)
            })
            .collect()
    }

    /// `(channels, height, width)` of each tapped block output, in tap order.
    pub fn tap_signature(&self) -> Vec<(usize, usize, usize)> {
        let shapes = self.block_output_shapes();
        self.taps().iter().filter_map(|&i| shapes.get(i).copied()).collect()
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let i = &self.input;
        if i.channels == 0 || i.height == 0 || i.width == 0 {
            v.push(format!("input shape must be positive, got {}×{}×{}", i.channels, i.height, i.width));
        }
        if self.stem.out_channels == 0 {
            v.push("stem.out_channels must be positive".into());
        }
        if self.stem.kernel == 0 || self.stem.kernel.is_multiple_of(2) {
            v.push(format!("stem.kernel must be odd, got {}", self.stem.kernel));
        }
        if self.stem.stride == 0 {
            v.push("stem.stride must be positive".into());
        }
        if self.num_classes < 2 {
            v.push(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.blocks.is_empty() {
            v.push("at least one block is required".into());
        }
        let mut prev = self.stem.out_channels;
        for (idx, b) in self.blocks.iter().enumerate() {
            if b.in_channels != prev {
                v.push(format!("blocks[{idx}].in_channels is {} but the previous layer emits {prev}", b.in_channels));
            }
            if b.out_channels == 0 {
                v.push(format!("blocks[{idx}].out_channels must be positive"));
            }
            if b.stride == 0 {
                v.push(format!("blocks[{idx}].stride must be positive"));
            }
            prev = b.out_channels;
        }
        if let Some(taps) = &self.tap_indices {
            if taps.is_empty() {
                v.push("tap_indices must not be empty".into());
            }
            if taps.windows(2).any(|w| w[0] >= w[1]) {
                v.push(format!("tap_indices must be strictly increasing, got {taps:?}"));
            }
            if let Some(bad) = taps.iter().find(|&&t| t >= self.blocks.len()) {
                v.push(format!("tap index {bad} out of range for {} blocks", self.blocks.len()));
            }
        }
        v.extend(self.policy.violations());
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let k = self.stem.kernel;
        let mut n = k * k * self.input.channels * self.stem.out_channels + 2 * self.stem.out_channels;
        for b in &self.blocks {
            n += 9 * b.in_channels * b.out_channels + 9 * b.out_channels * b.out_channels + 4 * b.out_channels;
            if b.has_projection() {
                n += b.in_channels * b.out_channels + 2 * b.out_channels;
            }
        }
        n + self.feature_channels() * self.num_classes
    }

    /// Scheme applied to each weighted layer, derived from the policy.
    pub fn precision_report(&self) -> Vec<LayerPrecision> {
        let p = &self.policy;
        let mut out = vec![LayerPrecision { layer: "stem.conv".into(), weights: p.first_layer, inputs: None }];
        for (i, b) in self.blocks.iter().enumerate() {
            for conv in ["conv1", "conv2"] {
                out.push(LayerPrecision {
                    layer: format!("blocks.{i}.{conv}"),
                    weights: p.interior,
                    inputs: Some(p.activation),
                });
            }
            if b.has_projection() {
                out.push(LayerPrecision {
                    layer: format!("blocks.{i}.proj"),
                    weights: p.interior,
                    inputs: Some(p.activation),
                });
            }
        }
        out.push(LayerPrecision {
            layer: "classifier".into(),
            weights: p.last_layer,
            inputs: classifier_input_scheme(p.last_layer),
        });
        out
    }
}

/// The classifier's pooled input is quantized only under a uniform last-layer scheme.
fn classifier_input_scheme(last: QuantScheme) -> Option<QuantScheme> {
    matches!(last, QuantScheme::UniformK { .. }).then_some(last)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPrecision {
    pub layer: String,
    pub weights: QuantScheme,
    /// Scheme of the quantizer producing this layer's input, `None` if unquantized.
    pub inputs: Option<QuantScheme>,
}

impl fmt::Display for LayerPrecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<18} weights={}", self.layer, self.weights)?;
        match self.inputs {
            Some(s) => write!(f, " inputs={s}"),
            None => write!(f, " inputs=raw"),
        }
    }
}

/// What one weighted layer actually consumed during a forward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub layer: String,
    pub weight_scheme: QuantScheme,
    pub input_scheme: Option<QuantScheme>,
    pub input: Var,
    /// The (possibly quantized) weight fed to the layer.
    pub weight: Var,
}

#[derive(Debug, Clone)]
pub struct BackboneOutput {
    pub logits: Var,
    /// Block outputs `O_p` in tap order.
    pub taps: Vec<Var>,
    pub trace: Vec<LayerTrace>,
}

/// A built backbone: spec, master parameters and batch-norm buffers.
#[derive(Debug, Clone)]
pub struct Network<T: Element> {
    spec: NetworkSpec,
    params: ParamStore<T>,
    buffers: Buffers<T>,
    frozen: bool,
}

impl<T: Element> Network<T> {
    /// Allocates and initializes parameters: He-normal convs and classifier,
    /// BN scale 1 and shift 0.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::stream(seed, Stream::Init);
        let mut params = ParamStore::new();
        let mut buffers = Buffers::new();
        let (cin, k, c0) = (spec.input.channels, spec.stem.kernel, spec.stem.out_channels);
        params.insert("stem.conv.weight", he_normal(&[c0, cin, k, k], cin * k * k, &mut rng));
        add_bn(&mut params, &mut buffers, "stem.bn", c0);
        for (i, b) in spec.blocks.iter().enumerate() {
            let (ci, co) = (b.in_channels, b.out_channels);
            params.insert(format!("blocks.{i}.conv1.weight"), he_normal(&[co, ci, 3, 3], ci * 9, &mut rng));
            add_bn(&mut params, &mut buffers, &format!("blocks.{i}.bn1"), co);
            params.insert(format!("blocks.{i}.conv2.weight"), he_normal(&[co, co, 3, 3], co * 9, &mut rng));
            add_bn(&mut params, &mut buffers, &format!("blocks.{i}.bn2"), co);
            if b.has_projection() {
                params.insert(format!("blocks.{i}.proj.weight"), he_normal(&[co, ci, 1, 1], ci, &mut rng));
                add_bn(&mut params, &mut buffers, &format!("blocks.{i}.proj_bn"), co);
            }
        }
        let f = spec.feature_channels();
        params.insert("classifier.weight", he_normal(&[f, spec.num_classes], f, &mut rng));
        Ok(Self { spec: spec.clone(), params, buffers, frozen: false })
    }

    pub fn spec(&self) -> &NetworkSpec {
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

    /// Replaces the precision policy, keeping all weights.
    pub fn set_policy(&mut self, policy: PrecisionPolicy) -> Result<()> {
        let mut spec = self.spec.clone();
        spec.policy = policy;
        spec.validate()?;
        self.spec = spec;
        Ok(())
    }

    /// A frozen network binds its parameters as constants, so no gradient reaches them.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Records the backbone on `g`. In [`Mode::Train`] the batch-norm running
    /// statistics are updated.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<BackboneOutput> {
        let mut binder = Binder::new(&self.params, &self.buffers, mode, self.frozen);
        let out = forward_impl(&self.spec, &mut binder, g, x)?;
        let updates = binder.into_updates();
        apply_bn_updates(&mut self.buffers, updates);
        Ok(out)
    }

    /// Eval-mode forward that leaves the network untouched.
    pub fn forward_eval(&self, g: &mut Graph<T>, x: Var) -> Result<BackboneOutput> {
        let mut binder = Binder::new(&self.params, &self.buffers, Mode::Eval, self.frozen);
        forward_impl(&self.spec, &mut binder, g, x)
    }
}

fn check_input(spec: &NetworkSpec, shape: &[usize]) -> Result<()> {
    let i = &spec.input;
    if shape.len() != 4 || shape[1..] != [i.channels, i.height, i.width] {
        return Err(Error::Shape {
            op: "forward_backbone",
            detail: format!("expected [N, {}, {}, {}], got {shape:?}", i.channels, i.height, i.width),
        });
    }
    Ok(())
}

fn forward_impl<T: Element>(
    spec: &NetworkSpec,
    binder: &mut Binder<'_, T>,
    g: &mut Graph<T>,
    x: Var,
) -> Result<BackboneOutput> {
    check_input(spec, g.shape(x))?;
    let policy = spec.policy;
    let taps_wanted = spec.taps();
    let mut trace = Vec::new();
    let conv = |g: &mut Graph<T>,
                binder: &mut Binder<'_, T>,
                trace: &mut Vec<LayerTrace>,
                layer: String,
                input: Var,
                input_scheme: Option<QuantScheme>,
                scheme: QuantScheme,
                stride: usize,
                padding: usize|
     -> Result<Var> {
        let w = binder.param(g, &format!("{layer}.weight"));
        let wq = quant::apply_weight_scheme(g, w, scheme)?;
        trace.push(LayerTrace { layer, weight_scheme: scheme, input_scheme, input, weight: wq });
        g.conv2d(input, wq, stride, padding)
    };

    let h = conv(
        g,
        binder,
        &mut trace,
        "stem.conv".into(),
        x,
        None,
        policy.first_layer,
        spec.stem.stride,
        spec.stem.kernel / 2,
    )?;
    let h = binder.batchnorm(g, h, "stem.bn")?;
    let mut a = quant::apply_activation_scheme(g, h, policy.activation)?;

    let mut taps = Vec::with_capacity(taps_wanted.len());
    for (i, b) in spec.blocks.iter().enumerate() {
        let act = Some(policy.activation);
        let h = conv(g, binder, &mut trace, format!("blocks.{i}.conv1"), a, act, policy.interior, b.stride, 1)?;
        let h = binder.batchnorm(g, h, &format!("blocks.{i}.bn1"))?;
        let h = quant::apply_activation_scheme(g, h, policy.activation)?;
        let h = conv(g, binder, &mut trace, format!("blocks.{i}.conv2"), h, act, policy.interior, 1, 1)?;
        let mut h = binder.batchnorm(g, h, &format!("blocks.{i}.bn2"))?;
        if b.kind == BlockKind::Residual {
            let skip = if b.has_projection() {
                let p = conv(g, binder, &mut trace, format!("blocks.{i}.proj"), a, act, policy.interior, b.stride, 0)?;
                binder.batchnorm(g, p, &format!("blocks.{i}.proj_bn"))?
            } else {
                a
            };
            h = g.add(h, skip)?;
        }
        a = quant::apply_activation_scheme(g, h, policy.activation)?;
        if taps_wanted.contains(&i) {
            taps.push(a);
        }
    }

    let pooled = g.global_avg_pool(a)?;
    let classifier_in = match classifier_input_scheme(policy.last_layer) {
        Some(QuantScheme::UniformK { bits }) => quant::quantize_activation(g, pooled, bits)?,
        _ => pooled,
    };
    let w = binder.param(g, "classifier.weight");
    let wq = quant::apply_weight_scheme(g, w, policy.last_layer)?;
    trace.push(LayerTrace {
        layer: "classifier".into(),
        weight_scheme: policy.last_layer,
        input_scheme: classifier_input_scheme(policy.last_layer),
        input: classifier_in,
        weight: wq,
    });
    let logits = g.matmul(classifier_in, wq)?;
    Ok(BackboneOutput { logits, taps, trace })
}

/// Runs the backbone on `x` on a fresh graph and returns `(logits, taps)`.
pub fn forward_backbone<T: Element>(
    net: &mut Network<T>,
    x: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let mut g = quant::ste_graph();
    let xv = g.constant(x.clone());
    let out = match mode {
        Mode::Train => net.forward(&mut g, xv, mode)?,
        Mode::Eval => net.forward_eval(&mut g, xv)?,
    };
    let taps = out.taps.iter().map(|&t| g.value(t).clone()).collect();
    Ok((g.value(out.logits).clone(), taps))
}
