//! Pretraining, quantized fine-tuning, evaluation and method comparison.
//!
//! A fine-tuning step for the auxiliary method runs, in order: quantize the
//! master weights, the mixed forward through `F` and `F∘H`, both losses, one
//! reverse sweep, the averaged shared gradient, and the optimizer update on
//! the masters. The other methods reuse the same step with their own losses.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::auxiliary::{self, AuxiliaryModule, AuxiliarySpec, TapHeads};
use crate::checkpoint;
use crate::config::{ExperimentConfig, KdConfig, Method, StageConfig};
use crate::data::{Dataset, Pipeline, Splits};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::kernels;
use crate::layers::{Buffers, Mode};
use crate::metrics::{self, MetricsLog, MetricsRow, Split};
use crate::net::{Network, NetworkSpec};
use crate::optim::{Optimizer, Slot};
use crate::param::ParamStore;
use crate::quant;
use crate::rng::{self, RngState, Stream};
use crate::tensor::Tensor;

pub const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Cross-entropy of the main network's logits.
    pub loss: f64,
    /// The objective that was differentiated.
    pub objective: f64,
    pub correct: usize,
    pub count: usize,
}

/// Loss and accuracy of a network on one split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOutcome {
    pub loss: f64,
    pub top1: f64,
    pub top5: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainerMeta {
    stage: Stage,
    method: Method,
    network: NetworkSpec,
    auxiliary: Option<AuxiliarySpec>,
    teacher: Option<NetworkSpec>,
    heads: bool,
    schedule: StageConfig,
    head_weights: Vec<f64>,
    kd: KdConfig,
    seed: u64,
    epoch: usize,
    global_step: u64,
    optimizer_steps: IndexMap<String, u64>,
    shuffle: RngState,
    augment: RngState,
    pipeline: PipelineMeta,
    config: Option<ExperimentConfig>,
    rows: Vec<MetricsRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PipelineMeta {
    normalization: Option<crate::data::Normalization>,
    augment: crate::data::Augment,
}

/// All mutable state of one training run.
#[derive(Debug, Clone)]
pub struct Trainer<T: Element> {
    net: Network<T>,
    aux: Option<AuxiliaryModule<T>>,
    heads: Option<TapHeads<T>>,
    teacher: Option<Network<T>>,
    optimizer: Optimizer<T>,
    stage: Stage,
    method: Method,
    schedule: StageConfig,
    head_weights: Vec<f64>,
    kd: KdConfig,
    pipeline: Pipeline,
    seed: u64,
    epoch: usize,
    global_step: u64,
    shuffle: ChaCha8Rng,
    augment: ChaCha8Rng,
    config: Option<ExperimentConfig>,
    rows: Vec<MetricsRow>,
}

impl<T: Element> Trainer<T> {
    /// Full-precision pretraining of a freshly initialized backbone.
    pub fn pretrain(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let schedule =
            cfg.pretrain.clone().ok_or_else(|| Error::Validation(vec!["config has no pretrain section".into()]))?;
        let mut spec = cfg.network.clone();
        spec.policy = quant::PrecisionPolicy::full();
        let net = Network::build(&spec, cfg.train.seed)?;
        Self::assemble(net, Stage::Pretrain, Method::Baseline, schedule, cfg, None)
    }

    /// Quantized fine-tuning of `init` with `cfg.train.method`. `aux` is
    /// required exactly when the method is [`Method::Auxi`].
    pub fn finetune(init: Network<T>, cfg: &ExperimentConfig, aux: Option<&AuxiliarySpec>) -> Result<Self> {
        cfg.validate()?;
        let mut want = cfg.network.clone();
        want.policy = init.spec().policy;
        if &want != init.spec() {
            return Err(Error::Validation(vec![format!(
                "initial network does not match the configured backbone: {} vs {}",
                serde_json::to_string(init.spec())?,
                serde_json::to_string(&want)?
            )]));
        }
        Self::assemble(init, Stage::Finetune, cfg.train.method, cfg.train.stage.clone(), cfg, aux)
    }

    fn assemble(
        mut net: Network<T>,
        stage: Stage,
        method: Method,
        schedule: StageConfig,
        cfg: &ExperimentConfig,
        aux_spec: Option<&AuxiliarySpec>,
    ) -> Result<Self> {
        let seed = cfg.train.seed;
        let salt = format!("{}/{}", stage.as_str(), method.id());
        let teacher = if method == Method::Kd {
            if !net.spec().policy.is_full() {
                return Err(Error::Validation(vec!["distillation needs a full-precision initial network".into()]));
            }
            let mut t = net.clone();
            t.freeze();
            Some(t)
        } else {
            None
        };
        match (method, aux_spec) {
            (Method::Auxi, None) => {
                return Err(Error::Validation(vec!["method auxi requires an auxiliary module spec".into()]))
            }
            (m, Some(_)) if m != Method::Auxi => {
                return Err(Error::Validation(vec![format!("an auxiliary module spec was given for method {m}")]))
            }
            _ => {}
        }
        if stage == Stage::Finetune {
            net.set_policy(cfg.train.policy())?;
        }
        let aux = aux_spec
            .map(|s| AuxiliaryModule::build(s, net.spec(), rng::derive_seed(seed, Stream::AuxInit, &salt)))
            .transpose()?;
        let heads = if method == Method::AdditionalLoss { Some(TapHeads::build(net.spec(), seed)?) } else { None };
        let n_taps = net.spec().taps().len();
        let head_weights = cfg.train.head_weights.clone().unwrap_or_else(|| vec![1.0; n_taps]);
        if method == Method::AdditionalLoss && head_weights.len() != n_taps {
            return Err(Error::Validation(vec![format!("{} head weights for {n_taps} taps", head_weights.len())]));
        }
        Ok(Self {
            net,
            aux,
            heads,
            teacher,
            optimizer: Optimizer::new(schedule.optimizer)?,
            stage,
            method,
            schedule,
            head_weights,
            kd: cfg.train.kd,
            pipeline: Pipeline::from_spec(&cfg.dataset),
            seed,
            epoch: 0,
            global_step: 0,
            // Stage-only salt: methods compared under one seed see the same batches.
            shuffle: rng::salted_stream(seed, Stream::Shuffle, stage.as_str()),
            augment: rng::salted_stream(seed, Stream::Augment, stage.as_str()),
            config: Some(cfg.clone()),
            rows: Vec::new(),
        })
    }

    pub fn network(&self) -> &Network<T> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network<T> {
        &mut self.net
    }

    pub fn into_network(self) -> Network<T> {
        self.net
    }

    pub fn auxiliary(&self) -> Option<&AuxiliaryModule<T>> {
        self.aux.as_ref()
    }

    pub fn heads(&self) -> Option<&TapHeads<T>> {
        self.heads.as_ref()
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn schedule(&self) -> &StageConfig {
        &self.schedule
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    /// Learning rate of the epoch about to run.
    pub fn current_lr(&self) -> f64 {
        self.schedule.lr.lr_at(self.epoch)
    }

    /// One optimizer step on a batch. On failure the parameters and
    /// batch-norm statistics are left as they were before the call.
    pub fn step(&mut self, x: &Tensor<T>, labels: &[usize], lr: f64) -> Result<StepStats> {
        let saved_net = self.net.buffers().clone();
        let saved_aux: Option<Buffers<T>> = self.aux.as_ref().map(|a| a.buffers().clone());
        match self.step_inner(x, labels, lr) {
            Ok(s) => {
                self.global_step += 1;
                Ok(s)
            }
            Err(e) => {
                *self.net.buffers_mut() = saved_net;
                if let (Some(a), Some(b)) = (self.aux.as_mut(), saved_aux) {
                    *a.buffers_mut() = b;
                }
                Err(match e {
                    Error::NumericFault { op, detail } => Error::Diverged {
                        epoch: self.epoch + 1,
                        step: self.global_step as usize + 1,
                        detail: format!("{op}: {detail}"),
                    },
                    other => other,
                })
            }
        }
    }

    fn step_inner(&mut self, x: &Tensor<T>, labels: &[usize], lr: f64) -> Result<StepStats> {
        let mut g: Graph<T> = quant::ste_graph();
        let xv = g.constant(x.clone());
        let (loss, objective, logits, grads) = match self.method {
            Method::Baseline => {
                let out = self.net.forward(&mut g, xv, Mode::Train)?;
                let l = g.softmax_cross_entropy(out.logits, labels)?;
                (l, l, out.logits, g.backward(l)?.into_params())
            }
            Method::Auxi => {
                let aux = self.aux.as_mut().ok_or_else(|| Error::Internal("auxi trainer without module".into()))?;
                let m = auxiliary::forward_mixed(&mut g, &mut self.net, aux, xv, Mode::Train)?;
                let (l, la) = auxiliary::joint_loss(&mut g, m.y_f, m.y_h, labels)?;
                let grads = auxiliary::joint_applied_gradients(&g, l, la, aux.params())?;
                let both = g.add(l, la)?;
                (l, both, m.y_f, grads)
            }
            Method::AdditionalLoss => {
                let heads = self.heads.as_ref().ok_or_else(|| Error::Internal("heads missing".into()))?;
                let out = self.net.forward(&mut g, xv, Mode::Train)?;
                let hl = heads.forward(&mut g, &out.taps)?;
                let (total, main) =
                    auxiliary::additional_loss_baseline(&mut g, out.logits, &hl, labels, &self.head_weights)?;
                (main, total, out.logits, g.backward(total)?.into_params())
            }
            Method::Kd => {
                let teacher = self.teacher.as_ref().ok_or_else(|| Error::Internal("teacher missing".into()))?;
                let t = auxiliary::teacher_logits(teacher, x)?;
                let out = self.net.forward(&mut g, xv, Mode::Train)?;
                let (total, ce, _) =
                    auxiliary::kd_baseline(&mut g, out.logits, &t, labels, self.kd.beta, self.kd.temperature)?;
                (ce, total, out.logits, g.backward(total)?.into_params())
            }
        };
        if let Some((name, _)) = grads.iter().find(|(_, t)| !t.all_finite()) {
            return Err(Error::NumericFault {
                op: "backward".into(),
                detail: format!("non-finite gradient for {name}"),
            });
        }
        self.optimizer.step(self.net.params_mut(), &grads, lr)?;
        if let Some(aux) = self.aux.as_mut() {
            self.optimizer.step(aux.params_mut(), &grads, lr)?;
        }
        if let Some(heads) = self.heads.as_mut() {
            self.optimizer.step(heads.params_mut(), &grads, lr)?;
        }
        let correct = topk_correct(g.value(logits), labels, 1);
        Ok(StepStats {
            loss: g.value(loss).item().to_f64(),
            objective: g.value(objective).item().to_f64(),
            correct,
            count: labels.len(),
        })
    }

    /// One pass over `train`; returns the epoch's training row.
    pub fn train_epoch(&mut self, train: &Dataset) -> Result<MetricsRow> {
        if train.is_empty() {
            return Err(Error::usage("training split is empty"));
        }
        let start = Instant::now();
        let lr = self.current_lr();
        let order = Pipeline::epoch_order(train.len(), &mut self.shuffle);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for idx in order.chunks(self.schedule.batch_size) {
            let (x, y) = self.pipeline.train_batch::<T>(train, idx, &mut self.augment);
            let s = self.step(&x, &y, lr)?;
            loss_sum += s.loss * s.count as f64;
            correct += s.correct;
            seen += s.count;
        }
        self.epoch += 1;
        Ok(MetricsRow {
            epoch: self.epoch,
            split: Split::Train,
            loss: loss_sum / seen as f64,
            top1: correct as f64 / seen as f64,
            top5: None,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Runs the remaining epochs, emitting a train and a test row per epoch.
    pub fn fit(&mut self, splits: &Splits, mut on_row: impl FnMut(&MetricsRow)) -> Result<()> {
        while self.epoch < self.schedule.epochs {
            let lr = self.current_lr();
            let train_row = self.train_epoch(&splits.train)?;
            on_row(&train_row);
            self.rows.push(train_row);
            let start = Instant::now();
            let e = evaluate(&self.net, &splits.test, &self.pipeline, EVAL_BATCH)?;
            let row = MetricsRow {
                epoch: self.epoch,
                split: Split::Test,
                loss: e.loss,
                top1: e.top1,
                top5: e.top5,
                lr,
                seconds: start.elapsed().as_secs_f64(),
            };
            on_row(&row);
            self.rows.push(row);
        }
        Ok(())
    }

    pub fn metrics_log(&self) -> MetricsLog {
        MetricsLog {
            stage: self.stage.as_str().into(),
            method: self.method.id().into(),
            seed: self.seed,
            train_augment: self.pipeline.augment,
            eval_augmented: false,
            config: self
                .config
                .as_ref()
                .map(|c| serde_json::to_value(c).expect("config serializes"))
                .unwrap_or_default(),
            rows: self.rows.clone(),
        }
    }

    fn meta(&self) -> TrainerMeta {
        TrainerMeta {
            stage: self.stage,
            method: self.method,
            network: self.net.spec().clone(),
            auxiliary: self.aux.as_ref().map(|a| a.spec().clone()),
            teacher: self.teacher.as_ref().map(|t| t.spec().clone()),
            heads: self.heads.is_some(),
            schedule: self.schedule.clone(),
            head_weights: self.head_weights.clone(),
            kd: self.kd,
            seed: self.seed,
            epoch: self.epoch,
            global_step: self.global_step,
            optimizer_steps: self.optimizer.slots().iter().map(|(k, s)| (k.clone(), s.step)).collect(),
            shuffle: RngState::capture(&self.shuffle),
            augment: RngState::capture(&self.augment),
            pipeline: PipelineMeta {
                normalization: self.pipeline.normalization.clone(),
                augment: self.pipeline.augment,
            },
            config: self.config.clone(),
            rows: self.rows.clone(),
        }
    }

    /// Writes the complete training state.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = IndexMap::new();
        put_module(&mut tensors, "net", self.net.params(), Some(self.net.buffers()));
        if let Some(a) = &self.aux {
            put_module(&mut tensors, "aux", a.params(), Some(a.buffers()));
        }
        if let Some(h) = &self.heads {
            put_module(&mut tensors, "heads", h.params(), None);
        }
        if let Some(t) = &self.teacher {
            put_module(&mut tensors, "teacher", t.params(), Some(t.buffers()));
        }
        for (name, slot) in self.optimizer.slots() {
            for (i, b) in slot.buffers.iter().enumerate() {
                tensors.insert(format!("optim/{name}/{i}"), b.clone());
            }
        }
        checkpoint::save(path, &self.meta(), &tensors)
    }

    /// Restores a state written by [`Trainer::save`]. Values are converted
    /// to `T` if the file was written at another precision.
    pub fn load(path: &Path) -> Result<Self> {
        let (meta, _, mut tensors) = checkpoint::load::<T, TrainerMeta>(path)?;
        let bad = |d: String| Error::format(path, d);
        let mut net = Network::build(&meta.network, 0)?;
        take_network(&mut tensors, "net", &mut net).map_err(bad)?;
        let aux = match &meta.auxiliary {
            Some(spec) => {
                let mut a = AuxiliaryModule::build(spec, &meta.network, 0)?;
                take_store(&mut tensors, "aux", a.params_mut()).map_err(bad)?;
                take_buffers(&mut tensors, "aux", a.buffers_mut()).map_err(bad)?;
                Some(a)
            }
            None => None,
        };
        let heads = if meta.heads {
            let mut h = TapHeads::build(&meta.network, 0)?;
            take_store(&mut tensors, "heads", h.params_mut()).map_err(bad)?;
            Some(h)
        } else {
            None
        };
        let teacher = match &meta.teacher {
            Some(spec) => {
                let mut t = Network::build(spec, 0)?;
                take_network(&mut tensors, "teacher", &mut t).map_err(bad)?;
                t.freeze();
                Some(t)
            }
            None => None,
        };
        let mut optimizer = Optimizer::new(meta.schedule.optimizer)?;
        let mut slots = IndexMap::new();
        for (name, &step) in &meta.optimizer_steps {
            let mut buffers = Vec::new();
            while let Some(t) = tensors.shift_remove(&format!("optim/{name}/{}", buffers.len())) {
                buffers.push(t);
            }
            slots.insert(name.clone(), Slot { step, buffers });
        }
        optimizer.set_slots(slots);
        if let Some(extra) = tensors.keys().next() {
            return Err(bad(format!("unexpected tensor {extra}")));
        }
        let restore = |s: &RngState| s.restore().ok_or_else(|| bad("invalid rng state".into()));
        Ok(Self {
            net,
            aux,
            heads,
            teacher,
            optimizer,
            stage: meta.stage,
            method: meta.method,
            schedule: meta.schedule,
            head_weights: meta.head_weights,
            kd: meta.kd,
            pipeline: Pipeline { normalization: meta.pipeline.normalization, augment: meta.pipeline.augment },
            seed: meta.seed,
            epoch: meta.epoch,
            global_step: meta.global_step,
            shuffle: restore(&meta.shuffle)?,
            augment: restore(&meta.augment)?,
            config: meta.config,
            rows: meta.rows,
        })
    }
}

fn put_module<T: Element>(
    out: &mut IndexMap<String, Tensor<T>>,
    prefix: &str,
    params: &ParamStore<T>,
    buffers: Option<&Buffers<T>>,
) {
    for p in params.iter() {
        out.insert(format!("{prefix}/{}", p.name), p.master.clone());
    }
    for (k, v) in buffers.into_iter().flatten() {
        out.insert(format!("{prefix}/{k}"), v.clone());
    }
}

fn take_store<T: Element>(
    tensors: &mut IndexMap<String, Tensor<T>>,
    prefix: &str,
    store: &mut ParamStore<T>,
) -> std::result::Result<(), String> {
    for p in store.iter_mut() {
        let key = format!("{prefix}/{}", p.name);
        let t = tensors.shift_remove(&key).ok_or_else(|| format!("missing tensor {key}"))?;
        if t.shape() != p.master.shape() {
            return Err(format!("{key}: stored shape {:?}, expected {:?}", t.shape(), p.master.shape()));
        }
        p.master = t;
    }
    Ok(())
}

fn take_buffers<T: Element>(
    tensors: &mut IndexMap<String, Tensor<T>>,
    prefix: &str,
    buffers: &mut Buffers<T>,
) -> std::result::Result<(), String> {
    for (k, v) in buffers.iter_mut() {
        let key = format!("{prefix}/{k}");
        let t = tensors.shift_remove(&key).ok_or_else(|| format!("missing tensor {key}"))?;
        if t.shape() != v.shape() {
            return Err(format!("{key}: stored shape {:?}, expected {:?}", t.shape(), v.shape()));
        }
        *v = t;
    }
    Ok(())
}

fn take_network<T: Element>(
    tensors: &mut IndexMap<String, Tensor<T>>,
    prefix: &str,
    net: &mut Network<T>,
) -> std::result::Result<(), String> {
    take_store(tensors, prefix, net.params_mut())?;
    take_buffers(tensors, prefix, net.buffers_mut())
}

/// Loads only the backbone `F` from a training checkpoint, ignoring any
/// auxiliary module, heads, teacher or optimizer state.
pub fn load_network<T: Element>(path: &Path) -> Result<Network<T>> {
    let (meta, _, mut tensors) = checkpoint::load::<T, TrainerMeta>(path)?;
    let mut net = Network::build(&meta.network, 0)?;
    take_network(&mut tensors, "net", &mut net).map_err(|d| Error::format(path, d))?;
    Ok(net)
}

/// Description of a checkpoint without its tensors.
#[derive(Debug, Clone, Serialize)]
pub struct CheckpointSummary {
    pub stage: String,
    pub method: String,
    pub epoch: usize,
    pub network: NetworkSpec,
    pub auxiliary: Option<AuxiliarySpec>,
    pub dtype: crate::element::DType,
}

pub fn inspect_checkpoint(path: &Path) -> Result<CheckpointSummary> {
    let (meta, dtype, _) = checkpoint::load::<f64, TrainerMeta>(path)?;
    Ok(CheckpointSummary {
        stage: meta.stage.as_str().into(),
        method: meta.method.id().into(),
        epoch: meta.epoch,
        network: meta.network,
        auxiliary: meta.auxiliary,
        dtype,
    })
}

/// Number of rows whose label is among the `k` largest logits.
pub fn topk_correct<T: Element>(logits: &Tensor<T>, labels: &[usize], k: usize) -> usize {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, &y)| {
            let target = row[y];
            // Ties rank ahead of the label, so a constant row only counts when k ≥ c.
            let ahead = row.iter().enumerate().filter(|&(j, &v)| j != y && v >= target).count();
            ahead < k
        })
        .count()
}

/// Mean cross-entropy and top-1/top-5 accuracy of `net` in eval mode.
pub fn evaluate<T: Element>(net: &Network<T>, ds: &Dataset, pipeline: &Pipeline, batch: usize) -> Result<EvalOutcome> {
    if ds.is_empty() {
        return Err(Error::usage("evaluation split is empty"));
    }
    let classes = net.spec().num_classes;
    let (mut loss, mut c1, mut c5) = (0.0f64, 0usize, 0usize);
    let all: Vec<usize> = (0..ds.len()).collect();
    for idx in all.chunks(batch.max(1)) {
        let (x, y) = pipeline.eval_batch::<T>(ds, idx);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = net.forward_eval(&mut g, xv)?;
        let logits = g.value(out.logits);
        let logp = kernels::log_softmax_rows(logits.data(), classes, T::ONE);
        for (row, &label) in logp.chunks_exact(classes).zip(&y) {
            if label >= classes {
                return Err(Error::usage(format!("label {label} outside [0, {classes})")));
            }
            loss -= row[label].to_f64();
        }
        c1 += topk_correct(logits, &y, 1);
        c5 += topk_correct(logits, &y, 5);
    }
    let n = ds.len() as f64;
    Ok(EvalOutcome { loss: loss / n, top1: c1 as f64 / n, top5: (classes >= 5).then(|| c5 as f64 / n) })
}

/// Pretrains per `cfg` and returns the finished trainer.
pub fn pretrain<T: Element>(cfg: &ExperimentConfig, splits: &Splits) -> Result<Trainer<T>> {
    let mut t = Trainer::pretrain(cfg)?;
    t.fit(splits, |_| {})?;
    Ok(t)
}

/// Fine-tunes `init` per `cfg` and returns the finished trainer.
pub fn finetune<T: Element>(
    init: Network<T>,
    cfg: &ExperimentConfig,
    aux: Option<&AuxiliarySpec>,
    splits: &Splits,
) -> Result<Trainer<T>> {
    let mut t = Trainer::finetune(init, cfg, aux)?;
    t.fit(splits, |_| {})?;
    Ok(t)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub method: Method,
    pub seed: u64,
    pub ok: bool,
    pub error: Option<String>,
    pub rows: Vec<MetricsRow>,
}

impl CellResult {
    pub fn test_row(&self, epoch: usize) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.split == Split::Test && r.epoch == epoch)
    }

    pub fn final_test(&self) -> Option<&MetricsRow> {
        self.rows.iter().rev().find(|r| r.split == Split::Test)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub runs: usize,
    pub failed: usize,
    pub mean_top1: Option<f64>,
    pub min_top1: Option<f64>,
    pub max_top1: Option<f64>,
    pub mean_top5: Option<f64>,
    pub mean_loss: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub cells: Vec<CellResult>,
    pub summary: Vec<MethodSummary>,
}

impl Comparison {
    pub fn cell(&self, method: Method, seed: u64) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.method == method && c.seed == seed)
    }

    pub fn summary_for(&self, method: Method) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == method)
    }

    /// One row per (method, seed) cell.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "method,seed,status,epochs,final_test_loss,final_test_top1,final_test_top5,epoch1_test_top1,error\n",
        );
        for c in &self.cells {
            let f = c.final_test();
            let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                c.method,
                c.seed,
                if c.ok { "ok" } else { "failed" },
                f.map(|r| r.epoch).unwrap_or(0),
                opt(f.map(|r| r.loss)),
                opt(f.map(|r| r.top1)),
                opt(f.and_then(|r| r.top5)),
                opt(c.test_row(1).map(|r| r.top1)),
                c.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
            ));
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("method,runs,failed,mean_top1,min_top1,max_top1,mean_top5,mean_loss\n");
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for m in &self.summary {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                m.method,
                m.runs,
                m.failed,
                opt(m.mean_top1),
                opt(m.min_top1),
                opt(m.max_top1),
                opt(m.mean_top5),
                opt(m.mean_loss)
            ));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        metrics::write_text(&dir.join("comparison.csv"), &self.to_csv())?;
        metrics::write_text(&dir.join("comparison_summary.csv"), &self.summary_csv())?;
        metrics::write_text(&dir.join("comparison.json"), &serde_json::to_string_pretty(self)?)
    }
}

fn summarize(method: Method, cells: &[CellResult]) -> MethodSummary {
    let mine: Vec<&CellResult> = cells.iter().filter(|c| c.method == method).collect();
    let finals: Vec<&MetricsRow> = mine.iter().filter(|c| c.ok).filter_map(|c| c.final_test()).collect();
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let top1: Vec<f64> = finals.iter().map(|r| r.top1).collect();
    MethodSummary {
        method,
        runs: mine.len(),
        failed: mine.iter().filter(|c| !c.ok).count(),
        mean_top1: mean(top1.clone()),
        min_top1: top1.iter().copied().reduce(f64::min),
        max_top1: top1.iter().copied().reduce(f64::max),
        mean_top5: mean(finals.iter().filter_map(|r| r.top5).collect()),
        mean_loss: mean(finals.iter().map(|r| r.loss).collect()),
    }
}

/// Runs `f` over `items` on up to `jobs` threads, keeping result order.
fn parallel_map<I: Sync, O: Send>(items: &[I], jobs: usize, f: impl Fn(&I) -> O + Sync) -> Vec<O> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<O>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let out = f(&items[i]);
                results.lock().expect("no poisoned workers")[i] = Some(out);
            });
        }
    });
    results.into_inner().expect("no poisoned workers").into_iter().map(|o| o.expect("every item ran")).collect()
}

/// Method × seed grid. Each seed is pretrained once (if configured) and the
/// result fine-tuned with every method. A failing cell is recorded and the
/// rest of the grid continues.
pub fn run_comparison<T: Element>(
    cfg: &ExperimentConfig,
    splits: &Splits,
    methods: &[Method],
    seeds: &[u64],
    jobs: usize,
) -> Result<Comparison> {
    if seeds.is_empty() {
        return Err(Error::usage("at least one seed is required"));
    }
    if methods.is_empty() {
        return Err(Error::usage("at least one method is required"));
    }
    if methods.contains(&Method::Auxi) && cfg.auxiliary.is_none() {
        return Err(Error::Validation(vec!["method auxi requires an auxiliary section in the config".into()]));
    }
    cfg.validate()?;
    let with_seed = |seed: u64| {
        let mut c = cfg.clone();
        c.train.seed = seed;
        c
    };
    let inits: Vec<std::result::Result<Network<T>, String>> = parallel_map(seeds, jobs, |&seed| {
        let c = with_seed(seed);
        match &c.pretrain {
            Some(_) => pretrain::<T>(&c, splits).map(Trainer::into_network).map_err(|e| e.to_string()),
            None => {
                let mut spec = c.network.clone();
                spec.policy = quant::PrecisionPolicy::full();
                Network::build(&spec, seed).map_err(|e| e.to_string())
            }
        }
    });
    let grid: Vec<(usize, Method)> = (0..seeds.len()).flat_map(|i| methods.iter().map(move |&m| (i, m))).collect();
    let cells = parallel_map(&grid, jobs, |&(i, method)| {
        let seed = seeds[i];
        let run = || -> std::result::Result<Vec<MetricsRow>, String> {
            let init = inits[i].as_ref().map_err(|e| format!("pretrain failed: {e}"))?.clone();
            let mut c = with_seed(seed);
            c.train.method = method;
            let aux = if method == Method::Auxi { c.auxiliary.clone() } else { None };
            let mut t = Trainer::finetune(init, &c, aux.as_ref()).map_err(|e| e.to_string())?;
            t.fit(splits, |_| {}).map_err(|e| e.to_string())?;
            Ok(t.rows().to_vec())
        };
        match run() {
            Ok(rows) => CellResult { method, seed, ok: true, error: None, rows },
            Err(e) => {
                log::warn!("cell {method}/seed {seed} failed: {e}");
                CellResult { method, seed, ok: false, error: Some(e), rows: Vec::new() }
            }
        }
    });
    let summary = methods.iter().map(|&m| summarize(m, &cells)).collect();
    Ok(Comparison { cells, summary })
}
