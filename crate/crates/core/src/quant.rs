//! Weight and activation quantizers with straight-through gradients.
//!
//! Uniform quantization follows the DoReFa convention: activations are clipped
//! to `[0, 1]` and snapped to `2^k` evenly spaced levels; weights are squashed
//! with `tanh`, normalized by the layer's largest magnitude into `[0, 1]`,
//! quantized, then mapped back to `[-1, 1]`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BackwardRules, Graph, OpKind, RuleContext, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layers whose `max|tanh(w)|` falls below this are treated as all-zero.
pub const DEGENERATE_EPS: f64 = 1e-12;

/// Largest supported uniform bitwidth.
pub const MAX_BITS: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QuantScheme {
    /// Identity; no quantization.
    Full,
    /// `sign(x)` with `sign(0) = +1`.
    Binary,
    /// `2^bits` uniform levels.
    UniformK { bits: u32 },
}

impl QuantScheme {
    pub fn uniform(bits: u32) -> Self {
        QuantScheme::UniformK { bits }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            QuantScheme::UniformK { bits } if bits == 0 || bits > MAX_BITS => {
                Err(Error::usage(format!("uniform bitwidth must be in 1..={MAX_BITS}, got {bits}")))
            }
            _ => Ok(()),
        }
    }

    pub fn is_full(&self) -> bool {
        matches!(self, QuantScheme::Full)
    }

    /// Number of distinct output levels, `None` for [`QuantScheme::Full`].
    pub fn levels(&self) -> Option<u64> {
        match *self {
            QuantScheme::Full => None,
            QuantScheme::Binary => Some(2),
            QuantScheme::UniformK { bits } => Some(1u64 << bits),
        }
    }
}

impl fmt::Display for QuantScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuantScheme::Full => write!(f, "Full"),
            QuantScheme::Binary => write!(f, "Binary"),
            QuantScheme::UniformK { bits } => write!(f, "UniformK({bits})"),
        }
    }
}

/// Per-layer assignment of quantization schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecisionPolicy {
    /// Weights of the stem convolution.
    pub first_layer: QuantScheme,
    /// Weights and input activations of the final dense classifier.
    pub last_layer: QuantScheme,
    /// Weights of every convolution inside the blocks.
    pub interior: QuantScheme,
    /// Activations feeding interior convolutions (and block outputs).
    pub activation: QuantScheme,
}

impl PrecisionPolicy {
    /// Everything full precision.
    pub fn full() -> Self {
        Self {
            first_layer: QuantScheme::Full,
            last_layer: QuantScheme::Full,
            interior: QuantScheme::Full,
            activation: QuantScheme::Full,
        }
    }

    /// `bits`-bit weights and activations, 8-bit first and last layers.
    pub fn uniform(bits: u32) -> Self {
        Self {
            first_layer: QuantScheme::uniform(8),
            last_layer: QuantScheme::uniform(8),
            interior: QuantScheme::uniform(bits),
            activation: QuantScheme::uniform(bits),
        }
    }

    /// Binary interior weights and activations, 8-bit first and last layers.
    pub fn binary() -> Self {
        Self {
            first_layer: QuantScheme::uniform(8),
            last_layer: QuantScheme::uniform(8),
            interior: QuantScheme::Binary,
            activation: QuantScheme::Binary,
        }
    }

    pub fn is_full(&self) -> bool {
        [self.first_layer, self.last_layer, self.interior, self.activation].iter().all(QuantScheme::is_full)
    }

    pub fn violations(&self) -> Vec<String> {
        [
            ("first_layer", self.first_layer),
            ("last_layer", self.last_layer),
            ("interior", self.interior),
            ("activation", self.activation),
        ]
        .into_iter()
        .filter_map(|(slot, s)| s.validate().err().map(|e| format!("policy.{slot}: {e}")))
        .collect()
    }
}

impl Default for PrecisionPolicy {
    fn default() -> Self {
        Self::uniform(2)
    }
}

/// Backward rules that turn `round` into an identity STE and `sign` into a
/// clipped STE (`grad · 1{|x| ≤ 1}`).
pub fn ste_rules<T: Element>() -> Arc<BackwardRules<T>> {
    let mut rules = BackwardRules::new();
    rules
        .register(OpKind::Round, |_: &RuleContext<'_, T>, up: &Tensor<T>| vec![Some(up.clone())])
        .expect("round is overridable");
    rules
        .register(OpKind::Sign, |ctx: &RuleContext<'_, T>, up: &Tensor<T>| {
            vec![Some(up.zip_map(ctx.inputs[0], |g, x| if x.abs() <= T::ONE { g } else { T::ZERO }))]
        })
        .expect("sign is overridable");
    Arc::new(rules)
}

/// A graph with the straight-through rules installed.
pub fn ste_graph<T: Element>() -> Graph<T> {
    Graph::with_rules(ste_rules())
}

fn grid_steps<T: Element>(bits: u32) -> T {
    T::from_f64(((1u64 << bits) - 1) as f64)
}

/// `round((2^k − 1)·x) / (2^k − 1)` for `x ∈ [0, 1]`.
///
/// Debug builds reject inputs outside `[0, 1]`; clipping is the caller's job.
pub fn quantize_unit<T: Element>(g: &mut Graph<T>, x: Var, bits: u32) -> Result<Var> {
    QuantScheme::uniform(bits).validate()?;
    if cfg!(debug_assertions) {
        if let Some(v) = g.value(x).data().iter().find(|&&v| !(v >= T::ZERO && v <= T::ONE)) {
            return Err(Error::usage(format!("quantize_unit input {v} outside [0, 1]")));
        }
    }
    let n = grid_steps::<T>(bits);
    let scaled = g.scale(x, n)?;
    let rounded = g.round(scaled)?;
    g.div_scalar(rounded, n)
}

/// DoReFa weight quantizer, normalized per layer.
///
/// The normalizing maximum is a constant in backward. A layer whose
/// `max|tanh(w)|` is below [`DEGENERATE_EPS`] maps to zeros with zero gradient.
pub fn quantize_weight<T: Element>(g: &mut Graph<T>, w: Var, bits: u32) -> Result<Var> {
    QuantScheme::uniform(bits).validate()?;
    let t = g.tanh(w)?;
    let max = g.value(t).max_abs();
    if max.to_f64() < DEGENERATE_EPS {
        log::warn!("quantize_weight: degenerate layer (max |tanh(w)| = {max}); emitting zeros");
        return g.scale(w, T::ZERO);
    }
    let two = T::from_f64(2.0);
    let normalized = g.div_scalar(t, two * max)?;
    let unit = g.add_scalar(normalized, T::from_f64(0.5))?;
    let q = quantize_unit(g, unit, bits)?;
    let doubled = g.scale(q, two)?;
    g.add_scalar(doubled, -T::ONE)
}

/// `quantize_unit(clip(a, 0, 1), k)`; gradient passes where `0 ≤ a ≤ 1`.
pub fn quantize_activation<T: Element>(g: &mut Graph<T>, a: Var, bits: u32) -> Result<Var> {
    let clipped = g.clip(a, T::ZERO, T::ONE)?;
    quantize_unit(g, clipped, bits)
}

/// `sign(x)` with `sign(0) = +1`. Needs [`ste_rules`] on the graph for a
/// nonzero gradient.
pub fn binarize<T: Element>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    g.sign(x)
}

/// Quantizes a weight tensor under `scheme`.
pub fn apply_weight_scheme<T: Element>(g: &mut Graph<T>, w: Var, scheme: QuantScheme) -> Result<Var> {
    match scheme {
        QuantScheme::Full => Ok(w),
        QuantScheme::Binary => binarize(g, w),
        QuantScheme::UniformK { bits } => quantize_weight(g, w, bits),
    }
}

/// Nonlinearity plus activation quantizer applied to a normalized
/// pre-activation. `Full` is a plain ReLU; `UniformK` clips to `[0, 1]`
/// (subsuming the ReLU); `Binary` takes the sign.
pub fn apply_activation_scheme<T: Element>(g: &mut Graph<T>, a: Var, scheme: QuantScheme) -> Result<Var> {
    match scheme {
        QuantScheme::Full => g.relu(a),
        QuantScheme::Binary => binarize(g, a),
        QuantScheme::UniformK { bits } => quantize_activation(g, a, bits),
    }
}

/// Tensor-level helpers that run a throwaway graph.
pub mod eval {
    use super::*;

    fn run<T: Element>(x: &Tensor<T>, f: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let out = f(&mut g, v)?;
        Ok(g.value(out).clone())
    }

    pub fn quantize_unit<T: Element>(x: &Tensor<T>, bits: u32) -> Result<Tensor<T>> {
        run(x, |g, v| super::quantize_unit(g, v, bits))
    }

    pub fn quantize_weight<T: Element>(w: &Tensor<T>, bits: u32) -> Result<Tensor<T>> {
        run(w, |g, v| super::quantize_weight(g, v, bits))
    }

    pub fn quantize_activation<T: Element>(a: &Tensor<T>, bits: u32) -> Result<Tensor<T>> {
        run(a, |g, v| super::quantize_activation(g, v, bits))
    }

    pub fn binarize<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
        run(x, |g, v| super::binarize(g, v))
    }

    pub fn weight_scheme<T: Element>(w: &Tensor<T>, scheme: QuantScheme) -> Result<Tensor<T>> {
        run(w, |g, v| super::apply_weight_scheme(g, v, scheme))
    }

    /// Gradient of `sum(f(x))` w.r.t. `x` under the STE rules.
    pub fn unit_upstream_grad<T: Element>(
        x: &Tensor<T>,
        f: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>,
    ) -> Result<Tensor<T>> {
        let mut g = ste_graph();
        let v = g.variable(x.clone());
        let out = f(&mut g, v)?;
        let loss = g.sum(out)?;
        let grads = g.backward(loss)?;
        Ok(grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[v.len()], v).unwrap()
    }

    #[test]
    fn unit_endpoints_are_fixed() {
        for k in 1..=8 {
            let q = eval::quantize_unit(&t(&[0.0, 1.0]), k).unwrap();
            assert_eq!(q.data(), &[0.0, 1.0], "k={k}");
        }
    }

    #[test]
    fn half_rounds_away_from_zero_at_two_bits() {
        let q = eval::quantize_unit(&t(&[0.5]), 2).unwrap();
        assert_eq!(q.data(), &[2.0 / 3.0]);
    }

    #[test]
    fn out_of_range_unit_input_is_rejected_in_debug() {
        if cfg!(debug_assertions) {
            assert!(matches!(eval::quantize_unit(&t(&[1.5]), 2), Err(Error::Usage(_))));
        }
    }

    #[test]
    fn zero_bits_rejected() {
        assert!(eval::quantize_unit(&t(&[0.5]), 0).is_err());
        assert!(QuantScheme::uniform(0).validate().is_err());
    }

    #[test]
    fn zero_layer_takes_degenerate_branch() {
        let w = Tensor::<f64>::zeros(&[2, 3]);
        let q = eval::quantize_weight(&w, 2).unwrap();
        assert!(q.data().iter().all(|&v| v == 0.0));
        let g = eval::unit_upstream_grad(&w, |g, v| quantize_weight(g, v, 2)).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn symmetric_pair_at_one_bit_maps_to_plus_minus_one() {
        for tval in [1e-3, 0.4, 3.0] {
            let q = eval::quantize_weight(&t(&[-tval, tval]), 1).unwrap();
            assert_eq!(q.data(), &[-1.0, 1.0]);
        }
    }

    #[test]
    fn activation_saturates_and_kills_gradient() {
        let a = t(&[2.5]);
        for k in 1..=8 {
            assert_eq!(eval::quantize_activation(&a, k).unwrap().data(), &[1.0]);
        }
        let g = eval::unit_upstream_grad(&a, |g, v| quantize_activation(g, v, 2)).unwrap();
        assert_eq!(g.data(), &[0.0]);
    }

    #[test]
    fn one_bit_activation_rounds_down_below_half() {
        assert_eq!(eval::quantize_activation(&t(&[0.4]), 1).unwrap().data(), &[0.0]);
    }

    #[test]
    fn binarize_maps_zero_to_plus_one() {
        assert_eq!(eval::binarize(&t(&[-0.3, 0.0, 5.0])).unwrap().data(), &[-1.0, 1.0, 1.0]);
    }

    #[test]
    fn binarize_gradient_is_clipped() {
        let g = eval::unit_upstream_grad(&t(&[2.0, 0.5, -1.0, -1.01]), binarize).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn full_scheme_is_identity() {
        let w = t(&[0.3, -7.0, 1e-30]);
        let mut g = ste_graph::<f64>();
        let v = g.variable(w.clone());
        let out = apply_weight_scheme(&mut g, v, QuantScheme::Full).unwrap();
        assert_eq!(out, v);
        assert!(g.value(out).bit_eq(&w));
    }

    #[test]
    fn scheme_json_shape() {
        let s = serde_json::to_string(&QuantScheme::uniform(2)).unwrap();
        assert_eq!(s, r#"{"kind":"uniform_k","bits":2}"#);
        let p: PrecisionPolicy =
            serde_json::from_str(&serde_json::to_string(&PrecisionPolicy::uniform(4)).unwrap()).unwrap();
        assert_eq!(p, PrecisionPolicy::uniform(4));
        assert_eq!(QuantScheme::uniform(2).to_string(), "UniformK(2)");
    }

    #[test]
    fn default_policy_pins_first_and_last_to_eight_bits() {
        let p = PrecisionPolicy::uniform(3);
        assert_eq!(p.first_layer, QuantScheme::uniform(8));
        assert_eq!(p.last_layer, QuantScheme::uniform(8));
        assert_eq!(p.interior, QuantScheme::uniform(3));
    }
}
