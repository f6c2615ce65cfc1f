//! Parameterized layers built on [`Graph`] ops.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand::Rng;

use super::{Graph, ParamId, ParameterSet, Tensor, Var};
use crate::Result;

/// `y = x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / libm::sqrt(d_in as f64);
        Self::with_values(params, name, Tensor::randn(d_in, d_out, std, rng), Tensor::zeros(1, d_out))
    }

    pub fn with_values(params: &mut ParameterSet, name: &str, w: Tensor, b: Tensor) -> Result<Self> {
        let weight = params.add(&format!("{name}.weight"), w)?;
        let bias = params.add(&format!("{name}.bias"), b)?;
        Ok(Self { name: name.into(), weight, bias })
    }

    /// Attaches to parameters already present in `params` (e.g. after loading).
    pub fn bind(params: &ParameterSet, name: &str) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            weight: params.id(&format!("{name}.weight"))?,
            bias: params.id(&format!("{name}.bias"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let h = g.matmul(x, w).map_err(|e| e.in_layer(&self.name))?;
        g.add_row(h, b).map_err(|e| e.in_layer(&self.name))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut ParameterSet, name: &str, d: usize) -> Result<Self> {
        let gamma = params.add(&format!("{name}.gamma"), Tensor::filled(1, d, 1.0))?;
        let beta = params.add(&format!("{name}.beta"), Tensor::zeros(1, d))?;
        Ok(Self { name: name.into(), gamma, beta })
    }

    pub fn bind(params: &ParameterSet, name: &str) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            gamma: params.id(&format!("{name}.gamma"))?,
            beta: params.id(&format!("{name}.beta"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gm = g.param(self.gamma);
        let bt = g.param(self.beta);
        g.layer_norm(x, gm, bt).map_err(|e| e.in_layer(&self.name))
    }
}

/// Stack of affine layers with GELU between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [d_in, hidden..., d_out]`.
    pub fn new<R: Rng + ?Sized>(params: &mut ParameterSet, name: &str, dims: &[usize], rng: &mut R) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(params, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn bind(params: &ParameterSet, name: &str, depth: usize) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| Linear::bind(params, &format!("{name}.{i}")))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x)?;
            if i + 1 < self.layers.len() {
                x = g.gelu(x);
            }
        }
        Ok(x)
    }
}
