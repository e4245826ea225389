//! Named parameter/buffer storage with deterministic ordering, plus weight
//! initialization helpers.

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered map of trainable tensors and non-trainable buffers (batch-norm
/// running stats), keyed by hierarchical dotted names. Iteration order is
/// insertion order, which makes checkpoints and optimizer state stable.
pub struct ParamStore<T: Scalar> {
    params: IndexMap<String, Tensor<T>>,
    buffers: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
        }
    }

    pub fn add_param(&mut self, name: &str, data: Vec<T>, shape: &[usize]) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate parameter name `{name}`")));
        }
        let t = Tensor::leaf(data, shape, true)?;
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    pub fn add_buffer(&mut self, name: &str, data: Vec<T>, shape: &[usize]) -> Result<()> {
        if self.buffers.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate buffer name `{name}`")));
        }
        let t = Tensor::leaf(data, shape, false)?;
        self.buffers.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Tensor<T>> {
        self.params
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))
    }

    pub fn get_buffer(&self, name: &str) -> Result<Tensor<T>> {
        self.buffers
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Invalid(format!("unknown buffer `{name}`")))
    }

    /// Replace a parameter's value (shape must not change). The replacement
    /// is a fresh leaf; old gradients do not carry over.
    pub fn set_param(&mut self, name: &str, data: Vec<T>) -> Result<()> {
        let old = self.get(name)?;
        if data.len() != old.numel() {
            return Err(Error::Shape(format!(
                "set_param `{name}`: {} elements, expected {}",
                data.len(),
                old.numel()
            )));
        }
        let t = Tensor::leaf(data, old.shape(), true)?;
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    pub fn set_buffer(&mut self, name: &str, data: Vec<T>) -> Result<()> {
        let old = self.get_buffer(name)?;
        if data.len() != old.numel() {
            return Err(Error::Shape(format!(
                "set_buffer `{name}`: {} elements, expected {}",
                data.len(),
                old.numel()
            )));
        }
        let t = Tensor::leaf(data, old.shape(), false)?;
        self.buffers.insert(name.to_string(), t);
        Ok(())
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.buffers.iter()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Inference copy: parameters detached from the graph, so forward passes
    /// through it record no backward state (much cheaper in memory).
    pub fn frozen(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(n, t)| (n.clone(), t.detach()))
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
    }
}

/// Kaiming-uniform fan-in initialization: U(-b, b) with b = sqrt(6/fan_in).
/// Sampling happens in f64 so f32 and f64 stores see the same stream.
pub fn kaiming_uniform<T: Scalar, R: Rng>(rng: &mut R, n: usize, fan_in: usize) -> Vec<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    (0..n)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect()
}

/// Registers conv / linear / norm parameter groups under dotted prefixes.
pub struct ParamBuilder<'a, T: Scalar, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
}

impl<'a, T: Scalar, R: Rng> ParamBuilder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        ParamBuilder { store, rng }
    }

    /// weight [cout, cin/groups, k, k] and optional zero bias [cout].
    pub fn conv2d(
        &mut self,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        groups: usize,
        bias: bool,
    ) -> Result<()> {
        let cpg = cin / groups;
        let fan_in = cpg * k * k;
        let w = kaiming_uniform(self.rng, cout * cpg * k * k, fan_in);
        self.store
            .add_param(&format!("{prefix}.weight"), w, &[cout, cpg, k, k])?;
        if bias {
            self.store
                .add_param(&format!("{prefix}.bias"), vec![T::zero(); cout], &[cout])?;
        }
        Ok(())
    }

    /// Transposed-conv weight [cin, cout, k, k] and optional zero bias.
    pub fn conv_transpose2d(
        &mut self,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
    ) -> Result<()> {
        let fan_in = cin * k * k;
        let w = kaiming_uniform(self.rng, cin * cout * k * k, fan_in);
        self.store
            .add_param(&format!("{prefix}.weight"), w, &[cin, cout, k, k])?;
        if bias {
            self.store
                .add_param(&format!("{prefix}.bias"), vec![T::zero(); cout], &[cout])?;
        }
        Ok(())
    }

    pub fn linear(&mut self, prefix: &str, cin: usize, cout: usize, bias: bool) -> Result<()> {
        let w = kaiming_uniform(self.rng, cout * cin, cin);
        self.store
            .add_param(&format!("{prefix}.weight"), w, &[cout, cin])?;
        if bias {
            self.store
                .add_param(&format!("{prefix}.bias"), vec![T::zero(); cout], &[cout])?;
        }
        Ok(())
    }

    /// gamma=1 / beta=0 plus running mean/var buffers.
    pub fn batch_norm(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.store
            .add_param(&format!("{prefix}.gamma"), vec![T::one(); c], &[c])?;
        self.store
            .add_param(&format!("{prefix}.beta"), vec![T::zero(); c], &[c])?;
        self.store
            .add_buffer(&format!("{prefix}.running_mean"), vec![T::zero(); c], &[c])?;
        self.store
            .add_buffer(&format!("{prefix}.running_var"), vec![T::one(); c], &[c])?;
        Ok(())
    }

    pub fn layer_norm(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.store
            .add_param(&format!("{prefix}.gamma"), vec![T::one(); c], &[c])?;
        self.store
            .add_param(&format!("{prefix}.beta"), vec![T::zero(); c], &[c])?;
        Ok(())
    }

    /// Per-channel residual-branch scale, initialized small.
    pub fn layer_scale(&mut self, prefix: &str, c: usize, init: f64) -> Result<()> {
        self.store.add_param(
            &format!("{prefix}.layer_scale"),
            vec![T::from_f64(init); c],
            &[c],
        )
    }
}
