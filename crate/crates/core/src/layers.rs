//! Parameter binding and batch-norm bookkeeping shared by the backbone, the
//! auxiliary module and the baseline heads.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NormMode, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Frozen running statistics.
    Eval,
}

/// Running mean/variance buffers keyed `<prefix>.running_mean` / `.running_var`.
pub type Buffers<T> = IndexMap<String, Tensor<T>>;

pub fn add_bn<T: Element>(params: &mut ParamStore<T>, buffers: &mut Buffers<T>, prefix: &str, channels: usize) {
    params.insert(format!("{prefix}.gamma"), Tensor::full(&[channels], T::ONE));
    params.insert(format!("{prefix}.beta"), Tensor::zeros(&[channels]));
    buffers.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]));
    buffers.insert(format!("{prefix}.running_var"), Tensor::full(&[channels], T::ONE));
}

#[derive(Debug, Clone)]
pub struct BnUpdate<T: Element> {
    prefix: String,
    mean: Vec<T>,
    var: Vec<T>,
    count: usize,
}

/// Binds stored parameters onto a graph for one forward pass and collects
/// batch-norm statistic updates to apply afterwards.
pub struct Binder<'a, T: Element> {
    params: &'a ParamStore<T>,
    buffers: &'a Buffers<T>,
    mode: Mode,
    frozen: bool,
    bound: IndexMap<String, Var>,
    updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Element> Binder<'a, T> {
    pub fn new(params: &'a ParamStore<T>, buffers: &'a Buffers<T>, mode: Mode, frozen: bool) -> Self {
        Self { params, buffers, mode, frozen, bound: IndexMap::new(), updates: Vec::new() }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Graph handle for a parameter's master value; frozen modules bind constants.
    pub fn param(&mut self, g: &mut Graph<T>, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let master = self.params.master(name).clone();
        let v = if self.frozen { g.constant(master) } else { g.param(name, master) };
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn batchnorm(&mut self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(g, &format!("{prefix}.gamma"));
        let beta = self.param(g, &format!("{prefix}.beta"));
        let mean_key = format!("{prefix}.running_mean");
        let var_key = format!("{prefix}.running_var");
        let (rm, rv) = match (self.buffers.get(&mean_key), self.buffers.get(&var_key)) {
            (Some(m), Some(v)) => (m, v),
            _ => return Err(Error::Internal(format!("missing running statistics for {prefix}"))),
        };
        let norm_mode = match self.mode {
            Mode::Train => NormMode::Batch,
            Mode::Eval => NormMode::Running,
        };
        let (y, stats) = g.batchnorm(x, gamma, beta, norm_mode, (rm.data(), rv.data()), T::from_f64(BN_EPS))?;
        if let Some((mean, var)) = stats {
            let s = g.shape(x);
            let count = s[0] * s[2..].iter().product::<usize>();
            self.updates.push(BnUpdate { prefix: prefix.to_string(), mean, var, count });
        }
        Ok(y)
    }

    pub fn into_updates(self) -> Vec<BnUpdate<T>> {
        self.updates
    }
}

/// Exponential moving average of batch statistics (unbiased variance).
pub fn apply_bn_updates<T: Element>(buffers: &mut Buffers<T>, updates: Vec<BnUpdate<T>>) {
    let momentum = T::from_f64(BN_MOMENTUM);
    let keep = T::ONE - momentum;
    for u in updates {
        let correction = if u.count > 1 { T::from_usize(u.count) / T::from_usize(u.count - 1) } else { T::ONE };
        if let Some(rm) = buffers.get_mut(&format!("{}.running_mean", u.prefix)) {
            for (r, &m) in rm.data_mut().iter_mut().zip(&u.mean) {
                *r = keep * *r + momentum * m;
            }
        }
        if let Some(rv) = buffers.get_mut(&format!("{}.running_var", u.prefix)) {
            for (r, &v) in rv.data_mut().iter_mut().zip(&u.var) {
                *r = keep * *r + momentum * v * correction;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_stats_move_towards_batch_stats() {
        let mut params = ParamStore::<f64>::new();
        let mut buffers = Buffers::new();
        add_bn(&mut params, &mut buffers, "bn", 1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_f64(&[4, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let mut binder = Binder::new(&params, &buffers, Mode::Train, false);
        binder.batchnorm(&mut g, x, "bn").unwrap();
        let updates = binder.into_updates();
        apply_bn_updates(&mut buffers, updates);
        assert!((buffers["bn.running_mean"].data()[0] - 0.25).abs() < 1e-12);
        // unbiased variance of 1..4 is 5/3
        let want = 0.9 + 0.1 * 5.0 / 3.0;
        assert!((buffers["bn.running_var"].data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_records_no_updates() {
        let mut params = ParamStore::<f64>::new();
        let mut buffers = Buffers::new();
        add_bn(&mut params, &mut buffers, "bn", 2);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
        let mut binder = Binder::new(&params, &buffers, Mode::Eval, false);
        let y = binder.batchnorm(&mut g, x, "bn").unwrap();
        assert!(binder.into_updates().is_empty());
        let eps_scale = 1.0 / (1.0f64 + BN_EPS).sqrt();
        assert!((g.value(y).data()[1] - 2.0 * eps_scale).abs() < 1e-12);
    }
}
