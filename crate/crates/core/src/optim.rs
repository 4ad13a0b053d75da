//! SGD with momentum, Adam, and step-decay learning-rate schedules.
//!
//! Optimizers update master weights in place. State is kept per parameter
//! name, so the backbone and the auxiliary module can share one optimizer
//! without sharing moment estimates.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd {
        #[serde(default = "default_momentum")]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(momentum: f64) -> Self {
        OptimizerConfig::Sgd { momentum, weight_decay: 0.0 }
    }

    pub fn adam() -> Self {
        OptimizerConfig::Adam { beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        match *self {
            OptimizerConfig::Sgd { momentum, weight_decay } => {
                if !(0.0..1.0).contains(&momentum) {
                    v.push(format!("sgd momentum must be in [0, 1), got {momentum}"));
                }
                if !(weight_decay >= 0.0) {
                    v.push(format!("weight decay must be non-negative, got {weight_decay}"));
                }
            }
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
                    if !(0.0..1.0).contains(&b) {
                        v.push(format!("adam {name} must be in [0, 1), got {b}"));
                    }
                }
                if !(eps > 0.0) {
                    v.push(format!("adam eps must be positive, got {eps}"));
                }
            }
        }
        v
    }
}

/// Initial rate decayed by 10× at each milestone epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(default)]
    pub milestones: Vec<usize>,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self { initial: lr, milestones: Vec::new() }
    }

    /// Rate used during zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.initial * 0.1f64.powi(passed as i32)
    }

    pub fn violations(&self, epochs: usize) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.initial >= 0.0) || !self.initial.is_finite() {
            v.push(format!("learning rate must be finite and non-negative, got {}", self.initial));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            v.push(format!("lr milestones must be strictly increasing, got {:?}", self.milestones));
        }
        if let Some(&m) = self.milestones.iter().find(|&&m| m >= epochs) {
            v.push(format!("lr milestone {m} is not below the epoch count {epochs}"));
        }
        v
    }
}

/// Per-parameter optimizer state: step count and moment buffers
/// (`[momentum]` for SGD, `[m, v]` for Adam).
#[derive(Debug, Clone, PartialEq)]
pub struct Slot<T: Element> {
    pub step: u64,
    pub buffers: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct Optimizer<T: Element> {
    config: OptimizerConfig,
    slots: IndexMap<String, Slot<T>>,
}

impl<T: Element> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        let v = config.violations();
        if !v.is_empty() {
            return Err(Error::Validation(v));
        }
        Ok(Self { config, slots: IndexMap::new() })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn slots(&self) -> &IndexMap<String, Slot<T>> {
        &self.slots
    }

    pub fn set_slots(&mut self, slots: IndexMap<String, Slot<T>>) {
        self.slots = slots;
    }

    /// Applies `grads` to the matching parameters of `params`. Names without
    /// a gradient are left untouched; gradients for unknown names are ignored
    /// so one gradient map can be routed to several stores.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &IndexMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        for p in params.iter_mut() {
            let Some(g) = grads.get(&p.name) else { continue };
            if g.shape() != p.master.shape() {
                return Err(Error::Shape {
                    op: "optimizer step",
                    detail: format!("{}: gradient {:?} vs parameter {:?}", p.name, g.shape(), p.master.shape()),
                });
            }
            let slot = self.slots.entry(p.name.clone()).or_insert_with(|| Slot { step: 0, buffers: Vec::new() });
            slot.step += 1;
            match self.config {
                OptimizerConfig::Sgd { momentum, weight_decay } => sgd_update(
                    &mut p.master,
                    g,
                    slot,
                    T::from_f64(lr),
                    T::from_f64(momentum),
                    T::from_f64(weight_decay),
                ),
                OptimizerConfig::Adam { beta1, beta2, eps } => {
                    adam_update(&mut p.master, g, slot, lr, beta1, beta2, eps)
                }
            }
        }
        Ok(())
    }
}

fn sgd_update<T: Element>(w: &mut Tensor<T>, g: &Tensor<T>, slot: &mut Slot<T>, lr: T, momentum: T, wd: T) {
    if slot.buffers.is_empty() {
        slot.buffers.push(Tensor::zeros(w.shape()));
    }
    let buf = slot.buffers[0].data_mut();
    for ((w, &g), b) in w.data_mut().iter_mut().zip(g.data()).zip(buf.iter_mut()) {
        let d = g + wd * *w;
        *b = momentum * *b + d;
        *w -= lr * *b;
    }
}

fn adam_update<T: Element>(w: &mut Tensor<T>, g: &Tensor<T>, slot: &mut Slot<T>, lr: f64, b1: f64, b2: f64, eps: f64) {
    if slot.buffers.is_empty() {
        slot.buffers.push(Tensor::zeros(w.shape()));
        slot.buffers.push(Tensor::zeros(w.shape()));
    }
    let t = slot.step as i32;
    let c1 = T::from_f64(1.0 - b1.powi(t));
    let c2 = T::from_f64(1.0 - b2.powi(t));
    let (b1, b2, lr, eps) = (T::from_f64(b1), T::from_f64(b2), T::from_f64(lr), T::from_f64(eps));
    let (m, v) = slot.buffers.split_at_mut(1);
    for (((w, &g), m), v) in w.data_mut().iter_mut().zip(g.data()).zip(m[0].data_mut()).zip(v[0].data_mut()) {
        *m = b1 * *m + (T::ONE - b1) * g;
        *v = b2 * *v + (T::ONE - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *w -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}
