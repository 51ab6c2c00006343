//! Dense row-major tensors and the forward kernels shared by the graph.
//!
//! All reductions run in a fixed left-to-right order so that identical
//! inputs always produce bit-identical outputs.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar type a [`Tensor`] can carry. Training runs in `f32`; the gradient
/// oracle evaluates the same code paths in `f64`.
pub trait Real: Float + Sum + Debug + Display + Default + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::dim("tensor rank must be at least 1"));
    }
    if let Some(i) = shape.iter().position(|&d| d == 0) {
        return Err(Error::dim(format!("extent {i} of shape {shape:?} is zero")));
    }
    Ok(shape.iter().product())
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Panics when the shape is invalid; for internal use where the shape
    /// was already validated.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        Ok(Self { shape, data: vec![value; n] })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        Ok(Self { shape, data: (0..n).map(&mut f).collect() })
    }

    pub fn zeros_like(&self) -> Self {
        Self { shape: self.shape.clone(), data: vec![T::zero(); self.data.len()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::dim(format!("expected [c, h, w], got shape {:?}", self.shape))),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape[1] + c]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        if n != self.data.len() {
            return Err(Error::shapes("reshape", &self.shape, &shape));
        }
        Ok(Self { shape, data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shapes("elementwise", &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.f64())).collect(),
        }
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.data.iter().zip(&other.data).all(|(a, b)| a.f64().to_bits() == b.f64().to_bits())
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        Ok(Self { shape: vec![c, r], data: transpose(&self.data, r, c) })
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul(self, other)
    }
}

pub(crate) fn transpose<T: Real>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// `out[m×n] += a[m×k] · b[k×n]`. Each output element accumulates its
/// products in increasing `k` order.
pub(crate) fn gemm_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

pub(crate) fn gemm<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm_acc(a, b, &mut out, m, k, n);
    out
}

/// Matrix product of `[m×k]` and `[k×n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shapes("matmul", a.shape(), b.shape()));
    }
    Ok(Tensor::from_parts(vec![m, n], gemm(a.data(), b.data(), m, k, n)))
}

/// `(outer, len, inner)` strides for iterating slices along `axis`.
pub(crate) fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax over `axis` with max-subtraction.
pub fn softmax_along<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_layout(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(src[idx(j)]);
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (src[idx(j)] - max).exp();
                out[idx(j)] = e;
                total = total + e;
            }
            for j in 0..len {
                out[idx(j)] = out[idx(j)] / total;
            }
        }
    }
    let out = Tensor::from_parts(x.shape().to_vec(), out);
    if !out.is_finite() {
        return Err(Error::Numeric("softmax produced a non-finite value".into()));
    }
    Ok(out)
}

/// Source taps for one output coordinate of a half-pixel bilinear resize.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub(crate) fn resize_taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            let frac = if lo == hi { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

/// Bilinear resize of a `[c×h×w]` tensor using half-pixel centers.
///
/// Interpolation is evaluated as `a + f·(b − a)` so constant fields stay
/// exactly constant; a same-size resize returns the input unchanged.
pub fn bilinear_resize<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim(format!("resize target {out_h}×{out_w} has a zero extent")));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ty = resize_taps(h, out_h);
    let tx = resize_taps(w, out_w);
    let src = x.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for r in &ty {
            let fy = T::of(r.frac);
            for q in &tx {
                let fx = T::of(q.frac);
                let a = plane[r.lo * w + q.lo];
                let b = plane[r.lo * w + q.hi];
                let top = a + fx * (b - a);
                let a = plane[r.hi * w + q.lo];
                let b = plane[r.hi * w + q.hi];
                let bottom = a + fx * (b - a);
                out.push(top + fy * (bottom - top));
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, out_h, out_w], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(matmul(&eye, &b).unwrap().data(), b.data());
        let s = matmul(&t(&[1, 1], &[3.0]), &t(&[1, 1], &[4.0])).unwrap();
        assert_eq!(s.data(), &[12.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let expect = naive_matmul(&a, &b, 2, 2, 2);
        assert_eq!(expect, vec![19.0, 22.0, 43.0, 50.0]);
        let got = matmul(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), &t(&[2, 2], &[5.0, 6.0, 7.0, 8.0])).unwrap();
        assert_eq!(got.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let err = matmul(&t(&[2, 3], &[0.0; 6]), &t(&[2, 2], &[0.0; 4])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_closed_forms() {
        let s = softmax_along(&t(&[3], &[0.0, 0.0, 0.0]), 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let s = softmax_along(&t(&[2], &[0.0, 2f32.ln()]), 0).unwrap();
        assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-6);
        assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-6);
        let s = softmax_along(&t(&[2], &[0.0, 100.0]), 0).unwrap();
        assert!(s.data()[0] < 1e-30 && (s.data()[1] - 1.0).abs() < 1e-7);
        assert!((s.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_axis_zero_on_matrix() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 1.0, 0.0, -1.0]);
        let s = softmax_along(&x, 0).unwrap();
        for c in 0..3 {
            assert!((s.at2(0, c) + s.at2(1, c) - 1.0).abs() < 1e-6);
        }
        assert!((s.at2(0, 0) - 0.5).abs() < 1e-7);
        assert!(softmax_along(&x, 2).is_err());
    }

    #[test]
    fn resize_identity_is_bit_exact() {
        let x = t(&[1, 2, 3], &[0.1, -0.0, 3.3, 4.0, 5.5, 6.25]);
        assert!(bilinear_resize(&x, 2, 3).unwrap().bit_eq(&x));
    }

    #[test]
    fn resize_constant_field() {
        let x = Tensor::<f32>::full(vec![2, 3, 5], 5.0).unwrap();
        for (h, w) in [(1, 1), (6, 10), (7, 3), (48, 64)] {
            let y = bilinear_resize(&x, h, w).unwrap();
            assert!(y.data().iter().all(|&v| v == 5.0));
        }
        assert!(bilinear_resize(&x, 0, 4).is_err());
    }

    #[test]
    fn resize_2x2_to_4x4_matches_hand_formula() {
        // Half-pixel centers: output o maps to src (o + 0.5)/2 − 0.5, clamped
        // at the borders: [-0.25→0, 0.25, 0.75, 1.25→1].
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = bilinear_resize(&x, 4, 4).unwrap();
        let pos = [0.0, 0.25, 0.75, 1.0];
        for (r, &py) in pos.iter().enumerate() {
            for (c, &px) in pos.iter().enumerate() {
                // f(x, y) = 1 + x + 2y is exactly bilinear on the grid.
                let expect: f64 = 1.0 + px + 2.0 * py;
                assert!((y.data()[r * 4 + c] as f64 - expect).abs() < 1e-6, "({r},{c})");
            }
        }
    }
}
