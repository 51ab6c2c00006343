//! Internal scene discretization: IDRs are written back onto the pixel grid
//! by stacked cross-attention layers,
//!
//! ```text
//! D_{i+1} = softmax(Q_i K_iᵀ) V_i + D_i,   Q_i = f_Qi(P), K_i = f_Ki(H), V_i = f_Vi(H)
//! ```
//!
//! with the softmax taken over the `N` IDRs for every pixel. The explicit
//! depth-discretization head `D = softmax(P Rᵀ / T) v` is the special case of
//! one layer with identity queries, a key selector that keeps the first
//! `C−1` channels and a value selector that keeps the last one.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{FeedForward, Linear, Norm};
use crate::tensor::{Graph, NodeId, ParamStore, Real, Tensor};

pub const DEFAULT_LAYERS: usize = 2;
/// Additive floor of the depth positive map.
pub const DEPTH_FLOOR: f64 = 1e-3;
const NORMAL_EPS: f64 = 1e-12;

/// Projections of one cross-attention layer; never shared between layers.
#[derive(Clone, Debug, PartialEq)]
pub struct IsdLayerParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

impl IsdLayerParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            query: Linear::new(store, rng, &format!("{name}.q"), c, c)?,
            key: Linear::new(store, rng, &format!("{name}.k"), c, c)?,
            value: Linear::new(store, rng, &format!("{name}.v"), c, c)?,
        })
    }
}

/// Fixed projections under which [`isd_layer`] on IDRs `[R | v]` reproduces
/// the explicit head: column 0 of the output equals `softmax(P[:, :C−1] Rᵀ / T) v`.
pub fn edd_selector_params(store: &mut ParamStore, name: &str, c: usize, temperature: f64) -> Result<IsdLayerParams> {
    if c < 2 || !(temperature > 0.0) {
        return Err(Error::Config(format!("selector needs C ≥ 2 and T > 0, got C={c}, T={temperature}")));
    }
    let diag = |s: f32| Tensor::from_fn(vec![c, c], |k| if k / c == k % c && k % c < c - 1 { s } else { 0.0 });
    let last_to_first = Tensor::from_fn(vec![c, c], |k| if k == (c - 1) * c { 1.0 } else { 0.0 })?;
    Ok(IsdLayerParams {
        query: Linear::with_values(store, &format!("{name}.q"), diag((1.0 / temperature) as f32)?, Tensor::zeros(vec![c])?)?,
        key: Linear::with_values(store, &format!("{name}.k"), diag(1.0)?, Tensor::zeros(vec![c])?)?,
        value: Linear::with_values(store, &format!("{name}.v"), last_to_first, Tensor::zeros(vec![c])?)?,
    })
}

/// One cross-attention layer: pixels `[HW×C]`, IDRs `[N×C]`, accumulator `[HW×C]`.
pub fn isd_layer<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore,
    params: &IsdLayerParams,
    pixels: NodeId,
    idrs: NodeId,
    acc: NodeId,
) -> Result<NodeId> {
    if g.shape(idrs)[0] == 0 {
        return Err(Error::Empty("cross-attention needs at least one IDR".into()));
    }
    let q = params.query.forward(g, store, pixels)?;
    let k = params.key.forward(g, store, idrs)?;
    let v = params.value.forward(g, store, idrs)?;
    let logits = g.matmul_t(q, false, k, true)?;
    let attn = g.softmax(logits, 1)?;
    let read = g.matmul(attn, v)?;
    g.add(read, acc)
}

/// Attention weights `[HW×N]` of a layer, for inspection.
pub fn isd_attention<T: Real>(g: &mut Graph<T>, store: &ParamStore, params: &IsdLayerParams, pixels: NodeId, idrs: NodeId) -> Result<NodeId> {
    let q = params.query.forward(g, store, pixels)?;
    let k = params.key.forward(g, store, idrs)?;
    let logits = g.matmul_t(q, false, k, true)?;
    g.softmax(logits, 1)
}

/// Stack of cross-attention layers with residual feed-forwards at one resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct IsdStage {
    pub pixel_norm: Norm,
    pub idr_norm: Norm,
    pub layers: Vec<(IsdLayerParams, FeedForward)>,
    pub channels: usize,
}

impl IsdStage {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, c: usize, n_layers: usize) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::Config("ISD needs at least one layer".into()));
        }
        let layers = (0..n_layers)
            .map(|i| {
                Ok((
                    IsdLayerParams::new(store, rng, &format!("{name}.layer{i}"), c)?,
                    FeedForward::new(store, rng, &format!("{name}.layer{i}.ffn"), c, 2 * c)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            pixel_norm: Norm::new(store, &format!("{name}.pixel_norm"), c)?,
            idr_norm: Norm::new(store, &format!("{name}.idr_norm"), c)?,
            layers,
            channels: c,
        })
    }

    /// Final `[HW×C]` map; the accumulator starts at zero.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, pixels: NodeId, idrs: NodeId) -> Result<NodeId> {
        let (hw, c) = g.value(pixels).dims2()?;
        let p = self.pixel_norm.forward(g, store, pixels)?;
        let h = self.idr_norm.forward(g, store, idrs)?;
        let mut d = g.input(Tensor::zeros(vec![hw, c])?);
        for (layer, ffn) in &self.layers {
            let z = isd_layer(g, store, layer, p, h, d)?;
            d = ffn.forward(g, store, z)?;
        }
        Ok(d)
    }
}

/// Explicit depth discretization: hidden representations `[N×(C−1)]`,
/// scalar depths `[N×1]`, softmax temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct EddHead {
    pub repr: Tensor,
    pub values: Tensor,
    pub temperature: f64,
}

impl EddHead {
    pub fn new(repr: Tensor, values: Tensor, temperature: f64) -> Result<Self> {
        let (n, _) = repr.dims2()?;
        if values.shape() != [n, 1] {
            return Err(Error::shapes("edd head", repr.shape(), values.shape()));
        }
        if !(temperature > 0.0) {
            return Err(Error::Contract(format!("temperature must be positive, got {temperature}")));
        }
        Ok(Self { repr, values, temperature })
    }
}

/// `softmax(P[:, :C−1] Rᵀ / T) v` on graph nodes; `pixels` is `[HW×C]`.
pub fn edd_readout<T: Real>(g: &mut Graph<T>, pixels: NodeId, repr: NodeId, values: NodeId, temperature: f64) -> Result<NodeId> {
    if !(temperature > 0.0) {
        return Err(Error::Contract(format!("temperature must be positive, got {temperature}")));
    }
    let (_, c) = g.value(pixels).dims2()?;
    let (_, rc) = g.value(repr).dims2()?;
    let p = if rc + 1 == c { g.slice_cols(pixels, 0, rc)? } else if rc == c { pixels } else {
        return Err(Error::shapes("edd head", g.shape(pixels), g.shape(repr)));
    };
    let logits = g.matmul_t(p, false, repr, true)?;
    let logits = if temperature == 1.0 { logits } else { g.scale(logits, T::of(1.0 / temperature))? };
    let attn = g.softmax(logits, 1)?;
    g.matmul(attn, values)
}

/// Tensor-level explicit discretization head, returning `[HW×1]`.
pub fn edd_head<T: Real>(pixels: &Tensor<T>, head: &EddHead) -> Result<Tensor<T>> {
    let mut g = Graph::<T>::new();
    let p = g.input(pixels.clone());
    let r = g.input(head.repr.cast());
    let v = g.input(head.values.cast());
    let out = edd_readout(&mut g, p, r, v, head.temperature)?;
    Ok(g.value(out).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputMode {
    Depth,
    Normals,
}

impl OutputMode {
    pub fn channels(self) -> usize {
        match self {
            OutputMode::Depth => 1,
            OutputMode::Normals => 3,
        }
    }
}

/// Per-resolution predictions and their fusion.
#[derive(Clone, Copy, Debug)]
pub struct FusedNodes {
    /// `[k×h_l×w_l]` intermediate maps, coarse to fine.
    pub levels: [NodeId; 3],
    /// `[k×H×W]` fused prediction.
    pub fused: NodeId,
}

/// Maps `[HW×k]` projected tokens onto the output space, returning `[k×h×w]`.
fn output_map<T: Real>(g: &mut Graph<T>, proj: NodeId, mode: OutputMode, depth_scale: Option<NodeId>, h: usize, w: usize) -> Result<NodeId> {
    let k = mode.channels();
    match mode {
        OutputMode::Depth => {
            let sp = g.softplus(proj)?;
            let floor = Tensor::full(vec![h * w, 1], T::of(DEPTH_FLOOR))?;
            let pos = g.add_const(sp, &floor)?;
            let d = match depth_scale {
                Some(s) => g.mul_scalar(pos, s)?,
                None => pos,
            };
            g.reshape(d, vec![1, h, w])
        }
        OutputMode::Normals => {
            let n = g.l2_normalize_rows(proj, T::of(NORMAL_EPS))?;
            let t = g.transpose(n)?;
            g.reshape(t, vec![k, h, w])
        }
    }
}

/// Projects the three final ISD maps `[h_l·w_l × C]` onto the output space
/// and fuses them by the mean of their bilinear upsamplings to `out_h×out_w`.
/// Normals are re-normalized after fusion.
#[allow(clippy::too_many_arguments)]
pub fn project_and_fuse<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore,
    finals: &[(NodeId, usize, usize)],
    projections: &[Linear],
    mode: OutputMode,
    depth_scale: Option<NodeId>,
    out_h: usize,
    out_w: usize,
) -> Result<FusedNodes> {
    if finals.len() != 3 || projections.len() != 3 {
        return Err(Error::Config(format!("fusion needs exactly 3 resolutions, got {}", finals.len())));
    }
    let mut levels = Vec::with_capacity(3);
    let mut ups = Vec::with_capacity(3);
    for (&(d, h, w), proj) in finals.iter().zip(projections) {
        if proj.d_out != mode.channels() {
            return Err(Error::Config(format!("output projection has {} channels, mode needs {}", proj.d_out, mode.channels())));
        }
        let p = proj.forward(g, store, d)?;
        let m = output_map(g, p, mode, depth_scale, h, w)?;
        levels.push(m);
        ups.push(g.resize(m, out_h, out_w)?);
    }
    let s = g.add(ups[0], ups[1])?;
    let s = g.add(s, ups[2])?;
    let mut fused = g.scale(s, T::of(1.0 / 3.0))?;
    if mode == OutputMode::Normals {
        let tokens = crate::layers::to_tokens(g, fused)?;
        let n = g.l2_normalize_rows(tokens, T::of(NORMAL_EPS))?;
        fused = crate::layers::to_map(g, n, out_h, out_w)?;
    }
    Ok(FusedNodes { levels: [levels[0], levels[1], levels[2]], fused })
}

/// Intermediate and fused predictions as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct IntermediateDepth {
    pub levels: Vec<Tensor>,
    pub fused: Tensor,
}

impl IntermediateDepth {
    pub fn from_graph<T: Real>(g: &Graph<T>, nodes: &FusedNodes) -> Self {
        Self { levels: nodes.levels.iter().map(|&n| g.value(n).cast()).collect(), fused: g.value(nodes.fused).cast() }
    }
}
