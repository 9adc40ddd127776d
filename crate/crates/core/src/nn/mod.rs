//! Minimal layer toolkit on top of candle: a seeded parameter store, linear /
//! layer-norm / MLP layers, masked softmax and multi-head attention.
//!
//! Every tensor is `f64` on the CPU so gradient checks are meaningful.

mod attention;
mod ops;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use attention::{AttentionOutput, MultiHeadAttention};
pub use ops::{bool_mask, key_masked_softmax, masked_softmax, zero_masked};

use crate::error::Result;

pub const DTYPE: DType = DType::F64;

pub fn device() -> Device {
    Device::Cpu
}

/// Named, seeded parameters. Names are dot-separated paths and iterate in
/// lexical order, which fixes the checkpoint layout.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { vars: BTreeMap::new(), rng: ChaCha8Rng::seed_from_u64(seed), device: device() }
    }

    pub fn root(&mut self) -> Params<'_> {
        Params { store: self, prefix: String::new() }
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    fn insert(&mut self, name: String, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape, &self.device)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        assert!(self.vars.insert(name.clone(), var).is_none(), "parameter `{name}` registered twice");
        Ok(out)
    }
}

/// A prefix into a [`ParamStore`].
pub struct Params<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Params<'_> {
    pub fn sub(&mut self, name: impl AsRef<str>) -> Params<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Params { store: self.store, prefix }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.store.rng.gen_range(-bound..=bound)).collect();
        self.store.insert(self.full(name), data, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        self.store.insert(self.full(name), vec![value; n], shape)
    }

    /// Truncated-free normal init via Box–Muller.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = self.store.rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = self.store.rng.gen();
            let r = (-2.0 * u1.ln()).sqrt();
            data.push(std * r * (std::f64::consts::TAU * u2).cos());
            if data.len() < n {
                data.push(std * r * (std::f64::consts::TAU * u2).sin());
            }
        }
        self.store.insert(self.full(name), data, shape)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    /// PyTorch-style init: `U(-1/sqrt(in), 1/sqrt(in))` for weight and bias.
    pub fn new(p: &mut Params<'_>, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = p.uniform("weight", &[out_dim, in_dim], bound)?;
        let bias = Some(p.uniform("bias", &[out_dim], bound)?);
        Ok(Self { weight, bias })
    }

    /// Zero weights and bias; the layer outputs exactly zero at init.
    pub fn zeros(p: &mut Params<'_>, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = p.constant("weight", &[out_dim, in_dim], 0.0)?;
        let bias = Some(p.constant("bias", &[out_dim], 0.0)?);
        Ok(Self { weight, bias })
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dim(1).unwrap_or(0)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dim(0).unwrap_or(0)
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let dims = x.dims();
        let y = if dims.len() > 2 {
            let lead: usize = dims[..dims.len() - 1].iter().product();
            let mut out = dims.to_vec();
            *out.last_mut().expect("rank > 2") = self.out_dim();
            x.reshape((lead, dims[dims.len() - 1]))?.matmul(&self.weight.t()?)?.reshape(out)?
        } else {
            x.broadcast_matmul(&self.weight.t()?)?
        };
        match &self.bias {
            Some(b) => y.broadcast_add(b),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(p: &mut Params<'_>, dim: usize) -> Result<Self> {
        Ok(Self { gamma: p.constant("gamma", &[dim], 1.0)?, beta: p.constant("beta", &[dim], 0.0)?, eps: 1e-5 })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)
    }
}

/// Stack of linear layers with exact GELU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new(p: &mut Params<'_>, dims: &[usize]) -> Result<Self> {
        Self::build(p, dims, false)
    }

    /// Same as [`Mlp::new`] but the output layer starts at zero.
    pub fn zero_output(p: &mut Params<'_>, dims: &[usize]) -> Result<Self> {
        Self::build(p, dims, true)
    }

    fn build(p: &mut Params<'_>, dims: &[usize], zero_last: bool) -> Result<Self> {
        assert!(dims.len() >= 2);
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let mut lp = p.sub(format!("{i}"));
                if zero_last && i + 1 == n {
                    Linear::zeros(&mut lp, dims[i], dims[i + 1])
                } else {
                    Linear::new(&mut lp, dims[i], dims[i + 1])
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Linear>) -> Self {
        assert!(!layers.is_empty());
        Self { layers }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }
}

impl Module for Mlp {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.gelu_erf()?;
            }
        }
        Ok(h)
    }
}
