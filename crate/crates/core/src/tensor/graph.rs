//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its cached output.
//! Nodes are appended in execution order, so the node list is always a valid
//! topological order and [`Graph::backward`] is a single reverse sweep.

use std::collections::HashMap;

use super::dense::{axis_layout, bilinear_resize, gemm, gemm_acc, resize_taps, transpose, Real, Tensor};
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Log,
    Sqrt,
    Square,
    Gelu,
    Softplus,
}

#[derive(Clone, Debug)]
enum Op<T: Real> {
    Leaf,
    MatMul { ta: bool, tb: bool },
    Add,
    Sub,
    Mul,
    AddBias,
    Scale(T),
    AddConst,
    AddScalar,
    MulScalar,
    Unary(Unary),
    Softmax { axis: usize },
    NormalizeAxis { axis: usize, eps: T },
    L2NormalizeRows { eps: T },
    LayerNorm { xhat: Vec<T>, rstd: Vec<T> },
    Transpose,
    Reshape,
    SliceCols { start: usize },
    Gather { indices: Vec<usize> },
    Conv2d { stride: usize, pad: usize, k: usize, cols: Vec<T> },
    Resize,
    SumAll,
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddBias => "add_bias",
            Op::Scale(_) => "scale",
            Op::AddConst => "add_const",
            Op::AddScalar => "add_scalar",
            Op::MulScalar => "mul_scalar",
            Op::Unary(_) => "unary",
            Op::Softmax { .. } => "softmax",
            Op::NormalizeAxis { .. } => "normalize_axis",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Transpose => "transpose",
            Op::Reshape => "reshape",
            Op::SliceCols { .. } => "slice_cols",
            Op::Gather { .. } => "gather",
            Op::Conv2d { .. } => "conv2d",
            Op::Resize => "resize",
            Op::SumAll => "sum",
        }
    }
}

struct Node<T: Real> {
    op: Op<T>,
    parents: Vec<NodeId>,
    value: Tensor<T>,
}

/// Computation graph over scalar type `T`.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, NodeId)>,
    by_name: HashMap<String, NodeId>,
    overrides: HashMap<String, Tensor<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Lays out `[c×h×w]` input patches as a `[(c·k·k) × (oh·ow)]` matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Vec<T> {
    let p = oh * ow;
    let mut cols = vec![T::zero(); c * k * k * p];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[ch * h * w + iy as usize * w..];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(cols: &[T], dx: &mut [T], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) {
    let p = oh * ow;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ch * h * w + iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] = dx[base + ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `op(a) · op(b)` where `op` optionally transposes a matrix.
fn mm<T: Real>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Result<(Vec<T>, usize, usize)> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(Error::shapes("matmul", a.shape(), b.shape()));
    }
    let at;
    let av = if ta {
        at = transpose(a.data(), ar, ac);
        &at[..]
    } else {
        a.data()
    };
    let bt;
    let bv = if tb {
        bt = transpose(b.data(), br, bc);
        &bt[..]
    } else {
        b.data()
    };
    Ok((gemm(av, bv, m, k, n), m, n))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self::with_overrides(HashMap::new())
    }

    /// A graph whose named parameters take the given values instead of the
    /// ones passed at binding time.
    pub fn with_overrides(overrides: HashMap<String, Tensor<T>>) -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), by_name: HashMap::new(), overrides }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn parents(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].parents
    }

    /// Trainable leaves bound so far, in binding order.
    pub fn params(&self) -> &[(String, NodeId)] {
        &self.params
    }

    fn push(&mut self, op: Op<T>, parents: Vec<NodeId>, value: Tensor<T>) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{} produced a non-finite value", op.name())));
        }
        self.nodes.push(Node { op, parents, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Non-trainable leaf.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, parents: Vec::new(), value });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf bound to a named parameter. Binding the same name twice
    /// returns the node created by the first binding, so every use of a
    /// parameter within one graph refers to the same leaf.
    pub fn param(&mut self, name: &str, value: &Tensor<f32>) -> NodeId {
        if let Some(&id) = self.by_name.get(name) {
            return id;
        }
        let value = match self.overrides.get(name) {
            Some(v) => v.clone(),
            None => value.cast(),
        };
        let id = self.input(value);
        self.params.push((name.to_string(), id));
        self.by_name.insert(name.to_string(), id);
        id
    }

    /// Binds a parameter from a store.
    pub fn bind(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.by_name.get(name) {
            return Ok(id);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        Ok(self.param(name, value))
    }

    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.by_name.get(name).copied()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a)·op(b)` with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: NodeId, ta: bool, b: NodeId, tb: bool) -> Result<NodeId> {
        let (data, m, n) = mm(self.value(a), ta, self.value(b), tb)?;
        self.push(Op::MatMul { ta, tb }, vec![a, b], Tensor::from_parts(vec![m, n], data))
    }

    fn binary(&mut self, op: Op<T>, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), f)?;
        self.push(op, vec![a, b], v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    /// `x[m×n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        let b = self.value(bias);
        if b.numel() != n {
            return Err(Error::shapes("add_bias", self.shape(x), b.shape()));
        }
        let bd = b.data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bd) {
                *o = *o + bv;
            }
        }
        self.push(Op::AddBias, vec![x, bias], Tensor::from_parts(vec![m, n], out))
    }

    pub fn scale(&mut self, x: NodeId, s: T) -> Result<NodeId> {
        let v = self.value(x).map(|a| a * s);
        self.push(Op::Scale(s), vec![x], v)
    }

    /// Adds a constant (non-trainable) tensor of the same shape.
    pub fn add_const(&mut self, x: NodeId, c: &Tensor<T>) -> Result<NodeId> {
        let v = self.value(x).zip_map(c, |a, b| a + b)?;
        self.push(Op::AddConst, vec![x], v)
    }

    fn scalar_of(&self, s: NodeId) -> Result<T> {
        let v = self.value(s);
        if v.numel() != 1 {
            return Err(Error::dim(format!("expected a single-element tensor, got {:?}", v.shape())));
        }
        Ok(v.data()[0])
    }

    /// `x + s` with `s` a single-element node.
    pub fn add_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.scalar_of(s)?;
        let v = self.value(x).map(|a| a + sv);
        self.push(Op::AddScalar, vec![x, s], v)
    }

    /// `x · s` with `s` a single-element node.
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.scalar_of(s)?;
        let v = self.value(x).map(|a| a * sv);
        self.push(Op::MulScalar, vec![x, s], v)
    }

    pub fn unary(&mut self, x: NodeId, kind: Unary) -> Result<NodeId> {
        let src = self.value(x);
        if matches!(kind, Unary::Log | Unary::Sqrt) && src.data().iter().any(|&v| v < T::zero() || (kind == Unary::Log && v == T::zero())) {
            return Err(Error::Domain(format!("{kind:?} of a non-positive value")));
        }
        let v = match kind {
            Unary::Exp => src.map(|a| a.exp()),
            Unary::Log => src.map(|a| a.ln()),
            Unary::Sqrt => src.map(|a| a.sqrt()),
            Unary::Square => src.map(|a| a * a),
            Unary::Gelu => src.map(gelu),
            Unary::Softplus => src.map(softplus),
        };
        self.push(Op::Unary(kind), vec![x], v)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Unary::Exp)
    }
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Unary::Log)
    }
    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Unary::Sqrt)
    }
    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Unary::Square)
    }
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Unary::Gelu)
    }
    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Unary::Softplus)
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let v = super::dense::softmax_along(self.value(x), axis)?;
        self.push(Op::Softmax { axis }, vec![x], v)
    }

    /// Divides every slice along `axis` by its sum plus `eps`.
    pub fn normalize_axis(&mut self, x: NodeId, axis: usize, eps: T) -> Result<NodeId> {
        let src = self.value(x);
        let (outer, len, inner) = axis_layout(src.shape(), axis)?;
        let d = src.data();
        let mut out = d.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let mut s = T::zero();
                for j in 0..len {
                    s = s + d[(o * len + j) * inner + i];
                }
                let denom = s + eps;
                for j in 0..len {
                    let idx = (o * len + j) * inner + i;
                    out[idx] = d[idx] / denom;
                }
            }
        }
        let v = Tensor::from_parts(src.shape().to_vec(), out);
        self.push(Op::NormalizeAxis { axis, eps }, vec![x], v)
    }

    /// Scales each row of `[m×n]` to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: NodeId, eps: T) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            let r = (row.iter().fold(T::zero(), |a, &v| a + v * v) + eps).sqrt();
            for v in row.iter_mut() {
                *v = *v / r;
            }
        }
        self.push(Op::L2NormalizeRows { eps }, vec![x], Tensor::from_parts(vec![m, n], out))
    }

    /// Layer normalization over the last axis of `[m×n]` with affine gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: T) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::shapes("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let nf = T::of(n as f64);
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / nf;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        self.push(Op::LayerNorm { xhat, rstd }, vec![x, gain, bias], Tensor::from_parts(vec![m, n], out))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).transpose2()?;
        self.push(Op::Transpose, vec![x], v)
    }

    pub fn reshape(&mut self, x: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        self.push(Op::Reshape, vec![x], v)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        if start >= end || end > n {
            return Err(Error::dim(format!("column range {start}..{end} invalid for width {n}")));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        self.push(Op::SliceCols { start }, vec![x], Tensor::from_parts(vec![m, w], out))
    }

    /// Flat elements at `indices`, as a `[len]` vector.
    pub fn gather(&mut self, x: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let src = self.value(x).data();
        if indices.is_empty() {
            return Err(Error::Empty("gather with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::dim(format!("gather index {bad} out of range for {} elements", src.len())));
        }
        let out = indices.iter().map(|&i| src[i]).collect();
        let n = indices.len();
        self.push(Op::Gather { indices }, vec![x], Tensor::from_parts(vec![n], out))
    }

    /// 2-D convolution of `[c×h×w]` input with `[o×c×k×k]` weights and `[o]` bias.
    pub fn conv2d(&mut self, x: NodeId, weight: NodeId, bias: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (c, h, w) = self.value(x).dims3()?;
        let ws = self.shape(weight).to_vec();
        let [o, wc, k, k2] = ws[..] else {
            return Err(Error::dim(format!("conv weight must be rank 4, got {ws:?}")));
        };
        if wc != c || k != k2 || self.value(bias).numel() != o {
            return Err(Error::shapes("conv2d", self.shape(x), &ws));
        }
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::dim(format!("conv geometry invalid for input {c}×{h}×{w}")));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let p = oh * ow;
        let cols = im2col(self.value(x).data(), c, h, w, k, stride, pad, oh, ow);
        let mut out = vec![T::zero(); o * p];
        let bd = self.value(bias).data();
        for (ch, row) in out.chunks_mut(p).enumerate() {
            row.fill(bd[ch]);
        }
        gemm_acc(self.value(weight).data(), &cols, &mut out, o, c * k * k, p);
        self.push(Op::Conv2d { stride, pad, k, cols }, vec![x, weight, bias], Tensor::from_parts(vec![o, oh, ow], out))
    }

    /// Half-pixel bilinear resize of a `[c×h×w]` node.
    pub fn resize(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let v = bilinear_resize(self.value(x), out_h, out_w)?;
        self.push(Op::Resize, vec![x], v)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(Op::SumAll, vec![x], v)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Accumulates gradients of a scalar node into every node of the graph.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![T::one()]));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let contributions = self.local_grads(node, &g)?;
            for (parent, pg) in node.parents.iter().zip(contributions) {
                let Some(pg) = pg else { continue };
                match &mut grads[parent.0] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a = *a + b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[idx] = Some(g);
        }
        let params = self.params.clone();
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, params, shapes })
    }

    /// Gradient contributions to each parent of `node` given its output gradient.
    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let pv = |i: usize| self.value(node.parents[i]);
        let gd = g.data();
        let out = &node.value;
        let same = |data: Vec<T>, like: &Tensor<T>| Some(Tensor::from_parts(like.shape().to_vec(), data));
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul { ta, tb } => {
                let (a, b) = (pv(0), pv(1));
                // out = A'B'; dA' = G B'^T, dB' = A'^T G.
                let (da, _, _) = if *ta { mm(b, *tb, g, true)? } else { mm(g, false, b, !*tb)? };
                let (db, _, _) = if *tb { mm(g, true, a, *ta)? } else { mm(a, !*ta, g, false)? };
                vec![same(da, a), same(db, b)]
            }
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
            Op::Mul => {
                let (a, b) = (pv(0), pv(1));
                vec![
                    same(gd.iter().zip(b.data()).map(|(&g, &b)| g * b).collect(), a),
                    same(gd.iter().zip(a.data()).map(|(&g, &a)| g * a).collect(), b),
                ]
            }
            Op::AddBias => {
                let b = pv(1);
                let n = b.numel();
                let mut db = vec![T::zero(); n];
                for row in gd.chunks(n) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
                vec![Some(g.clone()), same(db, b)]
            }
            Op::Scale(s) => vec![Some(g.map(|v| v * *s))],
            Op::AddConst => vec![Some(g.clone())],
            Op::AddScalar => vec![Some(g.clone()), same(vec![g.sum()], pv(1))],
            Op::MulScalar => {
                let (x, s) = (pv(0), pv(1));
                let sv = s.data()[0];
                let ds = gd.iter().zip(x.data()).fold(T::zero(), |a, (&g, &x)| a + g * x);
                vec![Some(g.map(|v| v * sv)), same(vec![ds], s)]
            }
            Op::Unary(kind) => {
                let x = pv(0).data();
                let y = out.data();
                let d: Vec<T> = match kind {
                    Unary::Exp => gd.iter().zip(y).map(|(&g, &y)| g * y).collect(),
                    Unary::Log => gd.iter().zip(x).map(|(&g, &x)| g / x).collect(),
                    Unary::Sqrt => gd
                        .iter()
                        .zip(y)
                        .map(|(&g, &y)| if y > T::zero() { g * T::of(0.5) / y } else { T::zero() })
                        .collect(),
                    Unary::Square => gd.iter().zip(x).map(|(&g, &x)| g * T::of(2.0) * x).collect(),
                    Unary::Gelu => gd.iter().zip(x).map(|(&g, &x)| g * gelu_grad(x)).collect(),
                    Unary::Softplus => gd.iter().zip(x).map(|(&g, &x)| g * sigmoid(x)).collect(),
                };
                vec![same(d, out)]
            }
            Op::Softmax { axis } => {
                let (outer, len, inner) = axis_layout(out.shape(), *axis)?;
                let y = out.data();
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot = (0..len).fold(T::zero(), |a, j| a + gd[idx(j)] * y[idx(j)]);
                        for j in 0..len {
                            d[idx(j)] = y[idx(j)] * (gd[idx(j)] - dot);
                        }
                    }
                }
                vec![same(d, out)]
            }
            Op::NormalizeAxis { axis, eps } => {
                let (outer, len, inner) = axis_layout(out.shape(), *axis)?;
                let x = pv(0).data();
                let y = out.data();
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let s = (0..len).fold(T::zero(), |a, j| a + x[idx(j)]) + *eps;
                        let dot = (0..len).fold(T::zero(), |a, j| a + gd[idx(j)] * y[idx(j)]);
                        for j in 0..len {
                            d[idx(j)] = (gd[idx(j)] - dot) / s;
                        }
                    }
                }
                vec![same(d, out)]
            }
            Op::L2NormalizeRows { eps } => {
                let (_, n) = out.dims2()?;
                let x = pv(0).data();
                let y = out.data();
                let mut d = vec![T::zero(); y.len()];
                for ((dr, yr), (xr, gr)) in d.chunks_mut(n).zip(y.chunks(n)).zip(x.chunks(n).zip(gd.chunks(n))) {
                    let r = (xr.iter().fold(T::zero(), |a, &v| a + v * v) + *eps).sqrt();
                    let dot = gr.iter().zip(yr).fold(T::zero(), |a, (&g, &y)| a + g * y);
                    for c in 0..n {
                        dr[c] = (gr[c] - yr[c] * dot) / r;
                    }
                }
                vec![same(d, out)]
            }
            Op::LayerNorm { xhat, rstd } => {
                let (m, n) = out.dims2()?;
                let gain = pv(1).data();
                let nf = T::of(n as f64);
                let mut dx = vec![T::zero(); m * n];
                let mut dg = vec![T::zero(); n];
                let mut db = vec![T::zero(); n];
                let mut dh = vec![T::zero(); n];
                for r in 0..m {
                    let gr = &gd[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for c in 0..n {
                        dh[c] = gr[c] * gain[c];
                        s1 = s1 + dh[c];
                        s2 = s2 + dh[c] * hr[c];
                        dg[c] = dg[c] + gr[c] * hr[c];
                        db[c] = db[c] + gr[c];
                    }
                    let (m1, m2) = (s1 / nf, s2 / nf);
                    for c in 0..n {
                        dx[r * n + c] = rstd[r] * (dh[c] - m1 - hr[c] * m2);
                    }
                }
                vec![same(dx, out), same(dg, pv(1)), same(db, pv(2))]
            }
            Op::Transpose => vec![Some(g.transpose2()?)],
            Op::Reshape => vec![Some(g.reshape(pv(0).shape().to_vec())?)],
            Op::SliceCols { start } => {
                let (m, n) = pv(0).dims2()?;
                let (_, w) = out.dims2()?;
                let mut d = vec![T::zero(); m * n];
                for r in 0..m {
                    d[r * n + start..r * n + start + w].copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                vec![same(d, pv(0))]
            }
            Op::Gather { indices } => {
                let mut d = vec![T::zero(); pv(0).numel()];
                for (&i, &v) in indices.iter().zip(gd) {
                    d[i] = d[i] + v;
                }
                vec![same(d, pv(0))]
            }
            Op::Conv2d { stride, pad, k, cols } => {
                let (x, w) = (pv(0), pv(1));
                let (c, h, wd) = x.dims3()?;
                let (o, oh, ow) = out.dims3()?;
                let p = oh * ow;
                let ckk = c * k * k;
                // dW = G · cols^T, dcols = W^T · G, db = row sums of G.
                let cols_t = transpose(cols, ckk, p);
                let dw = gemm(gd, &cols_t, o, p, ckk);
                let w_t = transpose(w.data(), o, ckk);
                let dcols = gemm(&w_t, gd, ckk, o, p);
                let mut dx = vec![T::zero(); c * h * wd];
                col2im(&dcols, &mut dx, c, h, wd, *k, *stride, *pad, oh, ow);
                let db = gd.chunks(p).map(|row| row.iter().fold(T::zero(), |a, &v| a + v)).collect();
                vec![same(dx, x), same(dw, w), same(db, pv(2))]
            }
            Op::Resize => {
                let x = pv(0);
                let (c, h, w) = x.dims3()?;
                let (_, oh, ow) = out.dims3()?;
                if (h, w) == (oh, ow) {
                    return Ok(vec![Some(g.clone())]);
                }
                let ty = resize_taps(h, oh);
                let tx = resize_taps(w, ow);
                let mut d = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    let plane = &mut d[ch * h * w..(ch + 1) * h * w];
                    let gp = &gd[ch * oh * ow..(ch + 1) * oh * ow];
                    for (r, ry) in ty.iter().enumerate() {
                        let fy = T::of(ry.frac);
                        for (q, qx) in tx.iter().enumerate() {
                            let fx = T::of(qx.frac);
                            let gv = gp[r * ow + q];
                            let top = gv * (T::one() - fy);
                            let bottom = gv * fy;
                            plane[ry.lo * w + qx.lo] = plane[ry.lo * w + qx.lo] + top * (T::one() - fx);
                            plane[ry.lo * w + qx.hi] = plane[ry.lo * w + qx.hi] + top * fx;
                            plane[ry.hi * w + qx.lo] = plane[ry.hi * w + qx.lo] + bottom * (T::one() - fx);
                            plane[ry.hi * w + qx.hi] = plane[ry.hi * w + qx.hi] + bottom * fx;
                        }
                    }
                }
                vec![same(d, x)]
            }
            Op::SumAll => {
                let x = pv(0);
                vec![Some(Tensor::from_parts(x.shape().to_vec(), vec![gd[0]; x.numel()]))]
            }
        })
    }
}

/// Result of a backward sweep: one gradient per node, addressable by node or
/// by parameter name.
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(String, NodeId)>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a node; zeros when the loss does not depend on it.
    pub fn wrt(&self, id: NodeId) -> Tensor<T> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::from_parts(self.shapes[id.0].clone(), vec![T::zero(); self.shapes[id.0].iter().product()]),
        }
    }

    pub fn param(&self, name: &str) -> Option<Tensor<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|&(_, id)| self.wrt(id))
    }

    /// `(name, gradient)` for every bound parameter, in binding order.
    pub fn named(&self) -> impl Iterator<Item = (&str, Tensor<T>)> + '_ {
        self.params.iter().map(|(n, id)| (n.as_str(), self.wrt(*id)))
    }
}
