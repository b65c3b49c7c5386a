//! Named parameter storage and the two layer types the network is built from.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NormParams, Var};
use crate::kernels::ConvGeom;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Persistent state such as running statistics; saved but not optimized.
    Buffer,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    kinds: Vec<ParamKind>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.kinds.push(kind);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.ids()
            .filter(|&id| self.kind(id) == ParamKind::Trainable)
            .map(|id| self.get(id).len())
            .sum()
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::ShapeMismatch {
                name: self.names[id.0].clone(),
                expected: self.values[id.0].shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Tensor)>) {
        for (id, t) in updates {
            self.values[id.0] = t;
        }
    }
}

/// 2-D convolution with square kernel.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    /// Uniform fan-in initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((in_channels * kernel * kernel) as f64).sqrt();
        let w = Tensor::uniform(&[out_channels, in_channels, kernel, kernel], -bound, bound, rng);
        let weight = store.add(format!("{name}.weight"), w, ParamKind::Trainable);
        let bias = bias.then(|| {
            let b = Tensor::uniform(&[out_channels], -bound, bound, rng);
            store.add(format!("{name}.bias"), b, ParamKind::Trainable)
        });
        Conv2d {
            weight,
            bias,
            geom: ConvGeom {
                kernel,
                stride,
                pad: kernel / 2,
            },
            in_channels,
            out_channels,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    params: NormParams,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.weight"), Tensor::full(&[channels], 1.0), ParamKind::Trainable);
        let beta = store.add(format!("{name}.bias"), Tensor::zeros(&[channels]), ParamKind::Trainable);
        let running_mean = store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), ParamKind::Buffer);
        let running_var = store.add(format!("{name}.running_var"), Tensor::full(&[channels], 1.0), ParamKind::Buffer);
        BatchNorm2d {
            params: NormParams {
                gamma,
                beta,
                running_mean,
                running_var,
                momentum: 0.1,
                eps: 1e-5,
            },
        }
    }

    pub fn params(&self) -> NormParams {
        self.params
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        g.batch_norm(x, &self.params)
    }
}

/// Convolution optionally followed by batch norm, then optionally ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: Option<BatchNorm2d>,
    pub relu: bool,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        norm: bool,
        relu: bool,
        rng: &mut R,
    ) -> Self {
        let conv = Conv2d::new(store, name, in_channels, out_channels, kernel, stride, !norm, rng);
        let norm = norm.then(|| BatchNorm2d::new(store, &format!("{name}.bn"), out_channels));
        ConvBlock { conv, norm, relu }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let mut y = self.conv.forward(g, x);
        if let Some(n) = &self.norm {
            y = n.forward(g, y);
        }
        if self.relu {
            y = g.relu(y);
        }
        y
    }
}
