//! Named parameters and their binding onto a graph.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Graph, Grads, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Learned parameters plus non-learned buffers (running statistics), both
/// keyed by dotted names and iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor) {
        self.buffers.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn params(&self) -> impl ExactSizeIterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl ExactSizeIterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Unit scale, zero shift, and running statistics at their identity.
    pub fn init_norm(&mut self, prefix: &str, channels: usize) {
        self.insert(format!("{prefix}.gamma"), Tensor::ones(&[channels]));
        self.insert(format!("{prefix}.beta"), Tensor::zeros(&[channels]));
        self.insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]));
        self.insert_buffer(format!("{prefix}.running_var"), Tensor::ones(&[channels]));
    }

    /// Blends observed batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[NormStats], momentum: f64) -> Result<()> {
        for s in stats {
            for (suffix, observed) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let buf = self.buffer_mut(&format!("{}.{suffix}", s.prefix))?;
                for (r, o) in buf.data_mut().iter_mut().zip(observed.data()) {
                    *r = (1.0 - momentum) * *r + momentum * o;
                }
            }
        }
        Ok(())
    }

    /// He-normal kernel `[k, k, fan_in_per_group, out]`.
    pub fn init_conv<R: Rng + ?Sized>(&mut self, name: &str, k: usize, cin_per_group: usize, cout: usize, rng: &mut R) {
        let fan_in = (k * k * cin_per_group) as f64;
        self.insert(name, Tensor::randn(&[k, k, cin_per_group, cout], (2.0 / fan_in).sqrt(), rng));
    }
}

/// Normalization statistics source.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running estimates are collected for later update.
    Train,
    /// Stored running statistics.
    Eval,
}

pub const NORM_EPS: f64 = 1e-5;

/// Batch statistics observed by one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub prefix: String,
    pub mean: Tensor,
    pub var: Tensor,
}

/// Maps parameter names to graph nodes for one forward pass.
pub struct Binder<'a> {
    store: &'a ParamStore,
    bound: BTreeMap<String, Var>,
    trainable: bool,
    mode: Mode,
    stats: Vec<NormStats>,
}

impl<'a> Binder<'a> {
    /// With `trainable`, parameters become differentiable leaves.
    pub fn new(store: &'a ParamStore, trainable: bool, mode: Mode) -> Self {
        Binder {
            store,
            bound: BTreeMap::new(),
            trainable,
            mode,
            stats: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn take_stats(&mut self) -> Vec<NormStats> {
        std::mem::take(&mut self.stats)
    }

    /// Per-channel normalization of `[.., C]` with learned affine
    /// `{prefix}.gamma`, `{prefix}.beta`.
    pub fn batch_norm(&mut self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::invalid("batch_norm", "scalar input"))?;
        let rows = shape.iter().product::<usize>() / c.max(1);
        let gamma = self.param(g, &format!("{prefix}.gamma"))?;
        let beta = self.param(g, &format!("{prefix}.beta"))?;
        let flat = g.reshape(x, &[rows, c])?;
        let normed = match self.mode {
            Mode::Train => {
                let mean = g.mean_axis(flat, 0)?;
                let centred = g.sub(flat, mean)?;
                let sq = g.square(centred);
                let var = g.mean_axis(sq, 0)?;
                self.stats.push(NormStats {
                    prefix: prefix.to_string(),
                    mean: g.value(mean).clone(),
                    var: g.value(var).clone(),
                });
                let var = g.add_scalar(var, NORM_EPS);
                let inv = g.powf(var, -0.5);
                g.mul(centred, inv)?
            }
            Mode::Eval => {
                let mean = self.store.buffer(&format!("{prefix}.running_mean"))?.clone();
                let var = self.store.buffer(&format!("{prefix}.running_var"))?;
                let inv = var.map(|v| 1.0 / (v + NORM_EPS).sqrt());
                let mean = g.constant(mean);
                let inv = g.constant(inv);
                let centred = g.sub(flat, mean)?;
                g.mul(centred, inv)?
            }
        };
        let scaled = g.mul(normed, gamma)?;
        let out = g.add(scaled, beta)?;
        g.reshape(out, &shape)
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Uses `v` for `name` in this pass instead of the stored tensor.
    pub fn bind(&mut self, name: impl Into<String>, v: Var) {
        self.bound.insert(name.into(), v);
    }

    pub fn param(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let t = self.store.get(name)?.clone();
        let v = if self.trainable { g.leaf(t) } else { g.constant(t) };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.store.buffer(name)
    }

    /// Gradients of every bound parameter, zero-filled where none flowed.
    pub fn gradients(&self, g: &Graph, grads: &Grads) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .map(|(name, &v)| (name.clone(), grads.get_or_zeros(v, g.shape(v))))
            .collect()
    }
}
