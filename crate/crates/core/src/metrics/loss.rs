//! Scale-invariant log loss `α·√(V[ε] + λ·E²[ε])`, `ε = ln ŷ − ln y*`.

use super::mask::EvalMask;
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Real, Tensor};

pub const SI_ALPHA: f64 = 10.0;
pub const SI_LAMBDA: f64 = 0.15;

/// Log residuals over the valid pixels, with domain checks.
pub(crate) fn log_residuals<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, mask: &EvalMask) -> Result<Vec<f64>> {
    if pred.numel() != gt.numel() || pred.numel() != mask.pixels() {
        return Err(Error::shapes("depth comparison", pred.shape(), gt.shape()));
    }
    let idx = mask.indices();
    if idx.is_empty() {
        return Err(Error::Data("no valid pixels under the mask".into()));
    }
    idx.into_iter()
        .map(|i| {
            let (p, g) = (pred.data()[i].f64(), gt.data()[i].f64());
            if p <= 0.0 || g <= 0.0 {
                return Err(Error::Domain(format!("non-positive depth at pixel {i} (pred {p}, gt {g})")));
            }
            Ok(p.ln() - g.ln())
        })
        .collect()
}

/// `(mean, population variance)` in a fixed summation order.
pub(crate) fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

pub fn si_log_loss<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, mask: &EvalMask, alpha: f64, lambda: f64) -> Result<f64> {
    let eps = log_residuals(pred, gt, mask)?;
    let (e, v) = mean_var(&eps);
    Ok(alpha * (v + lambda * e * e).sqrt())
}

/// The same loss as a graph node over a prediction node of any shape whose
/// element count matches the mask.
pub fn si_log_node<T: Real>(g: &mut Graph<T>, pred: NodeId, gt: &Tensor<T>, mask: &EvalMask, alpha: f64, lambda: f64) -> Result<NodeId> {
    if g.value(pred).numel() != mask.pixels() || gt.numel() != mask.pixels() {
        return Err(Error::shapes("si_log", g.shape(pred), gt.shape()));
    }
    let idx = mask.indices();
    if idx.is_empty() {
        return Err(Error::Data("no valid pixels under the mask".into()));
    }
    let neg_log_gt = idx
        .iter()
        .map(|&i| {
            let v = gt.data()[i];
            if v <= T::zero() {
                Err(Error::Domain(format!("non-positive ground truth at pixel {i}")))
            } else {
                Ok(-v.ln())
            }
        })
        .collect::<Result<Vec<T>>>()?;
    let n = idx.len();
    let p = g.gather(pred, idx)?;
    let logp = g.log(p)?;
    let eps = g.add_const(logp, &Tensor::new(vec![n], neg_log_gt)?)?;
    let mean = g.mean(eps)?;
    let neg_mean = g.scale(mean, -T::one())?;
    let centered = g.add_scalar(eps, neg_mean)?;
    let sq = g.square(centered)?;
    let var = g.mean(sq)?;
    let mean_sq = g.square(mean)?;
    let bias = g.scale(mean_sq, T::of(lambda))?;
    let total = g.add(var, bias)?;
    let root = g.sqrt(total)?;
    g.scale(root, T::of(alpha))
}

/// Mean `1 − cos` between predicted and target normal fields `[3×h×w]`.
pub fn cosine_loss_node<T: Real>(g: &mut Graph<T>, pred: NodeId, gt: &Tensor<T>, mask: &EvalMask) -> Result<NodeId> {
    let hw = mask.pixels();
    if g.value(pred).numel() != 3 * hw || gt.numel() != 3 * hw {
        return Err(Error::shapes("cosine loss", g.shape(pred), gt.shape()));
    }
    let n = mask.count();
    if n == 0 {
        return Err(Error::Data("no valid pixels under the mask".into()));
    }
    let weights = Tensor::from_fn(g.shape(pred).to_vec(), |i| if mask.is_valid(i % hw) { gt.data()[i] } else { T::zero() })?;
    let w = g.input(weights);
    let prod = g.mul(pred, w)?;
    let dot = g.sum(prod)?;
    let mean_cos = g.scale(dot, -T::one() / T::of(n as f64))?;
    g.add_const(mean_cos, &Tensor::scalar(T::one()))
}
