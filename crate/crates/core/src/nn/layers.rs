//! Layer descriptors. A descriptor names its parameters, initializes them,
//! and applies itself on a [`Graph`].

use rand::Rng;

use super::ParamStore;
use crate::adapters::{self, AdapterSet};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// A 2-D convolution with square kernel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize) -> Self {
        ConvSpec {
            name: name.into(),
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride: 1,
            padding: kernel / 2,
            bias: true,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + if self.bias { self.out_channels } else { 0 }
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        let bound = 1.0 / ((self.in_channels * self.kernel * self.kernel) as f64).sqrt();
        store.insert(
            self.weight_name(),
            Tensor::rand_uniform(self.weight_shape(), -bound, bound, rng),
            true,
        )?;
        if self.bias {
            store.insert(
                self.bias_name(),
                Tensor::rand_uniform([self.out_channels], -bound, bound, rng),
                true,
            )?;
        }
        Ok(())
    }

    /// Applies the convolution, including any adapter attached to it.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        adapters: &AdapterSet,
        x: Var,
    ) -> Result<Var> {
        adapters::conv_with_adapter(g, store, adapters, self, x)
    }
}

/// `y = x W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinearSpec {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
}

impl LinearSpec {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        LinearSpec {
            name: name.into(),
            in_features: din,
            out_features: dout,
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_features * self.out_features + self.out_features
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        let bound = 1.0 / (self.in_features as f64).sqrt();
        store.insert(
            format!("{}.weight", self.name),
            Tensor::rand_uniform([self.in_features, self.out_features], -bound, bound, rng),
            true,
        )?;
        store.insert(
            format!("{}.bias", self.name),
            Tensor::rand_uniform([self.out_features], -bound, bound, rng),
            true,
        )
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = store.bind(g, &format!("{}.weight", self.name))?;
        let b = store.bind(g, &format!("{}.bias", self.name))?;
        let y = g.matmul(x, w)?;
        g.broadcast_add(y, b)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupNormSpec {
    pub name: String,
    pub channels: usize,
    pub groups: usize,
}

impl GroupNormSpec {
    pub fn new(name: impl Into<String>, channels: usize, groups: usize) -> Self {
        GroupNormSpec {
            name: name.into(),
            channels,
            groups,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.insert(
            format!("{}.gamma", self.name),
            Tensor::full([self.channels], T::one()),
            true,
        )?;
        store.insert(format!("{}.beta", self.name), Tensor::zeros([self.channels]), true)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = store.bind(g, &format!("{}.gamma", self.name))?;
        let beta = store.bind(g, &format!("{}.beta", self.name))?;
        g.group_norm(x, gamma, beta, self.groups)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbeddingSpec {
    pub name: String,
    pub rows: usize,
    pub dim: usize,
}

impl EmbeddingSpec {
    pub fn param_count(&self) -> usize {
        self.rows * self.dim
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        store.insert(
            format!("{}.weight", self.name),
            Tensor::randn([self.rows, self.dim], rng),
            true,
        )
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, idx: &[usize]) -> Result<Var> {
        let table = store.bind(g, &format!("{}.weight", self.name))?;
        g.embedding(table, idx)
    }
}
