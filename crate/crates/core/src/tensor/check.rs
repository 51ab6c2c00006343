//! Central-difference gradient oracle, independent of the tape.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dense::{Real, Tensor};
use super::graph::{Graph, NodeId};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Element-wise central differences `(f(x+h) − f(x−h)) / 2h`.
///
/// The divisor is the step actually realized in `T`, and the difference is
/// taken in 64-bit arithmetic.
pub fn numeric_grad<T, F>(mut f: F, x: &Tensor<T>, h: f64) -> Result<Tensor<f64>>
where
    T: Real,
    F: FnMut(&Tensor<T>) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let up = orig + T::of(h);
        let down = orig - T::of(h);
        probe.data_mut()[i] = up;
        let fu = f(&probe)?;
        probe.data_mut()[i] = down;
        let fd = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fu.is_finite() || !fd.is_finite() {
            return Err(Error::Numeric(format!("objective is non-finite near element {i}")));
        }
        out.push((fu - fd) / (up.f64() - down.f64()));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Builds a scalar loss from parameters bound out of a store. Implemented
/// generically so the same code runs in `f32` and `f64`.
pub trait LossBuilder {
    fn build<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore) -> Result<NodeId>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// Largest element-wise relative error over the checked elements.
    pub max_rel: f64,
    /// `name[index]` of the element attaining `max_rel`.
    pub worst: String,
    pub checked: usize,
}

/// Which parameter elements a check visits.
#[derive(Clone, Debug)]
pub enum Selection {
    All,
    /// A seeded random subset holding this fraction of every tensor (at least one element each).
    Fraction { fraction: f64, seed: u64 },
}

pub fn loss_value<T: Real, B: LossBuilder>(builder: &B, store: &ParamStore, overrides: HashMap<String, Tensor<T>>) -> Result<f64> {
    let mut g = Graph::<T>::with_overrides(overrides);
    let loss = builder.build(&mut g, store)?;
    let v = g.value(loss);
    if v.numel() != 1 {
        return Err(Error::Contract("loss builder must return a scalar".into()));
    }
    Ok(v.data()[0].f64())
}

/// Analytic gradients of the loss, evaluated in precision `T`.
pub fn analytic_grads<T: Real, B: LossBuilder>(builder: &B, store: &ParamStore) -> Result<HashMap<String, Tensor<T>>> {
    let mut g = Graph::<T>::new();
    let loss = builder.build(&mut g, store)?;
    let grads = g.backward(loss)?;
    Ok(grads.named().map(|(n, t)| (n.to_string(), t)).collect())
}

/// Compares tape gradients against 64-bit central differences for the
/// selected elements of every parameter the loss binds.
///
/// `analytic` are gradients produced by [`analytic_grads`] (in whichever
/// precision the caller is validating); `perturb` optionally corrupts them
/// before comparison, used to exercise failure paths.
pub fn compare<B: LossBuilder>(
    builder: &B,
    store: &ParamStore,
    analytic: &HashMap<String, Tensor<f64>>,
    selection: &Selection,
    h: f64,
) -> Result<GradReport> {
    let mut report = GradReport { max_rel: 0.0, worst: String::new(), checked: 0 };
    let mut names: Vec<&String> = analytic.keys().collect();
    names.sort();
    for (ti, name) in names.into_iter().enumerate() {
        let base: Tensor<f64> = store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?
            .cast();
        let n = base.numel();
        let indices: Vec<usize> = match selection {
            Selection::All => (0..n).collect(),
            Selection::Fraction { fraction, seed } => {
                let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(ti as u64));
                let mut idx = sample(&mut rng, n, k).into_vec();
                idx.sort_unstable();
                idx
            }
        };
        let a = &analytic[name];
        for i in indices {
            let eval = |delta: f64| {
                let mut t = base.clone();
                t.data_mut()[i] += delta;
                let mut ov = HashMap::new();
                ov.insert(name.clone(), t);
                loss_value::<f64, B>(builder, store, ov)
            };
            let fu = eval(h)?;
            let fd = eval(-h)?;
            if !fu.is_finite() || !fd.is_finite() {
                return Err(Error::Numeric(format!("objective is non-finite near {name}[{i}]")));
            }
            let numeric = (fu - fd) / (2.0 * h);
            let r = rel_error(a.data()[i], numeric);
            report.checked += 1;
            if r > report.max_rel || report.worst.is_empty() {
                report.max_rel = r.max(report.max_rel);
                report.worst = format!("{name}[{i}]");
            }
        }
    }
    Ok(report)
}
