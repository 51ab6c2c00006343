//! Parameterized building blocks bound into a graph by name.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Graph, NodeId, ParamStore, Real, Tensor};

pub const NORM_EPS: f64 = 1e-5;

pub fn uniform(rng: &mut impl Rng, shape: Vec<usize>, bound: f32) -> Result<Tensor> {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
}

/// Zero-mean normal samples with standard deviation `std`, redrawn outside ±2σ.
pub fn trunc_normal(rng: &mut impl Rng, shape: Vec<usize>, std: f32) -> Result<Tensor> {
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    Tensor::from_fn(shape, |_| loop {
        let z = normal.sample(rng);
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
}

/// Affine map `x·W + b` on row-major `[m×d_in]` inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f32).sqrt();
        let lin = Self::named(name, d_in, d_out);
        store.insert(&lin.weight, uniform(rng, vec![d_in, d_out], bound)?)?;
        store.insert(&lin.bias, Tensor::zeros(vec![d_out])?)?;
        Ok(lin)
    }

    /// Registers fixed weights; used to build degenerate configurations.
    pub fn with_values(store: &mut ParamStore, name: &str, weight: Tensor, bias: Tensor) -> Result<Self> {
        let (d_in, d_out) = weight.dims2()?;
        let lin = Self::named(name, d_in, d_out);
        store.insert(&lin.weight, weight)?;
        store.insert(&lin.bias, bias)?;
        Ok(lin)
    }

    fn named(name: &str, d_in: usize, d_out: usize) -> Self {
        Self { weight: format!("{name}.weight"), bias: format!("{name}.bias"), d_in, d_out }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.bind(store, &self.weight)?;
        let b = g.bind(store, &self.bias)?;
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

/// Layer normalization over the feature axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gain: String,
    pub bias: String,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let n = Self { gain: format!("{name}.gain"), bias: format!("{name}.bias") };
        store.insert(&n.gain, Tensor::full(vec![dim], 1.0)?)?;
        store.insert(&n.bias, Tensor::zeros(vec![dim])?)?;
        Ok(n)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let gain = g.bind(store, &self.gain)?;
        let bias = g.bind(store, &self.bias)?;
        g.layer_norm(x, gain, bias, T::of(NORM_EPS))
    }
}

/// Pre-norm residual feed-forward: `x + fc2(gelu(fc1(norm(x))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub norm: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            norm: Norm::new(store, &format!("{name}.norm"), dim)?,
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, dim)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let h = self.norm.forward(g, store, x)?;
        let h = self.fc1.forward(g, store, h)?;
        let h = g.gelu(h)?;
        let h = self.fc2.forward(g, store, h)?;
        g.add(x, h)
    }
}

/// Square-kernel convolution on `[c×h×w]` maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: String,
    pub bias: String,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let conv = Self { weight: format!("{name}.weight"), bias: format!("{name}.bias"), stride, pad: kernel / 2 };
        let bound = 1.0 / ((c_in * kernel * kernel) as f32).sqrt();
        store.insert(&conv.weight, uniform(rng, vec![c_out, c_in, kernel, kernel], bound)?)?;
        store.insert(&conv.bias, Tensor::zeros(vec![c_out])?)?;
        Ok(conv)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.bind(store, &self.weight)?;
        let b = g.bind(store, &self.bias)?;
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// `[c×h×w]` map to `[h·w × c]` pixel tokens.
pub fn to_tokens<T: Real>(g: &mut Graph<T>, map: NodeId) -> Result<NodeId> {
    let (c, h, w) = g.value(map).dims3()?;
    let flat = g.reshape(map, vec![c, h * w])?;
    g.transpose(flat)
}

/// `[h·w × c]` pixel tokens back to a `[c×h×w]` map.
pub fn to_map<T: Real>(g: &mut Graph<T>, tokens: NodeId, h: usize, w: usize) -> Result<NodeId> {
    let (_, c) = g.value(tokens).dims2()?;
    let t = g.transpose(tokens)?;
    g.reshape(t, vec![c, h, w])
}

/// Layer normalization across channels of a `[c×h×w]` map, per pixel.
pub fn channel_norm<T: Real>(g: &mut Graph<T>, store: &ParamStore, norm: &Norm, map: NodeId) -> Result<NodeId> {
    let (_, h, w) = g.value(map).dims3()?;
    let tokens = to_tokens(g, map)?;
    let normed = norm.forward(g, store, tokens)?;
    to_map(g, normed, h, w)
}
