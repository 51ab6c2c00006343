use std::collections::HashMap;
use std::f64::consts::PI;

use super::net::Model;
use crate::error::{Error, Result};
use crate::isd::OutputMode;
use crate::metrics::{cosine_loss_node, si_log_node, EvalMask, SI_ALPHA, SI_LAMBDA};
use crate::tensor::{Graph, ParamStore, Tensor};

pub const BASE_LR: f64 = 2e-4;
pub const FINAL_LR: f64 = 2e-5;
pub const WEIGHT_DECAY: f64 = 0.02;
pub const BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;
pub const WARM_FRACTION: f64 = 0.3;
pub const CLIP_NORM: f64 = 10.0;

/// Constant rate for the first `warm_fraction` of steps, then cosine
/// annealing down to `final_lr` at the last step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub final_lr: f64,
    pub warm_fraction: f64,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(base_lr: f64, total_steps: usize) -> Self {
        Self { base_lr, final_lr: base_lr * FINAL_LR / BASE_LR, warm_fraction: WARM_FRACTION, total_steps }
    }

    /// Rate applied at zero-based step `step`.
    pub fn lr(&self, step: usize) -> f64 {
        let flat = (self.warm_fraction * self.total_steps as f64).floor() as usize;
        if step < flat || self.total_steps <= flat + 1 {
            return self.base_lr;
        }
        let t = ((step - flat) as f64 / (self.total_steps - flat - 1) as f64).min(1.0);
        self.final_lr + 0.5 * (self.base_lr - self.final_lr) * (1.0 + (PI * t).cos())
    }
}

/// AdamW state with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: usize,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub clip_norm: Option<f64>,
}

impl OptimState {
    pub fn new(store: &ParamStore, schedule: Schedule, weight_decay: f64) -> Result<Self> {
        let zeros = store.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
            schedule,
            weight_decay,
            betas: BETAS,
            eps: ADAM_EPS,
            clip_norm: Some(CLIP_NORM),
        })
    }

    /// One update of `store` along `grads` (in store order). Returns the
    /// gradient norm before clipping.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<f64> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(Error::Contract(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        let norm = grads.iter().flat_map(|g| g.data()).map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric("non-finite gradient norm".into()));
        }
        let clip = match self.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        let lr = self.schedule.lr(self.step);
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let decay = 1.0 - lr * self.weight_decay;
        for (k, (_, p)) in store.iter_mut().enumerate() {
            let (m, v, g) = (self.first[k].data_mut(), self.second[k].data_mut(), grads[k].data());
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g[i] as f64 * clip;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = (mi / c1) / ((vi / c2).sqrt() + self.eps);
                *w = (*w as f64 * decay - lr * update) as f32;
            }
        }
        Ok(norm)
    }
}

/// One supervised example: image `[3×H×W]`, target `[k×H×W]` and its mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub target: Tensor,
    pub mask: EvalMask,
}

/// Per-sample loss and parameter gradients (in store order).
pub fn loss_and_grads(model: &Model, sample: &Sample) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::<f32>::new();
    let out = model.forward(&mut g, &sample.image)?;
    let loss = sample_loss(&mut g, model, out.output, sample)?;
    let value = g.value(loss).data()[0] as f64;
    let grads = g.backward(loss)?;
    let named: HashMap<&str, Tensor> = grads.named().collect();
    let ordered = model
        .store
        .iter()
        .map(|(name, t)| match named.get(name) {
            Some(g) => Ok(g.clone()),
            None => Tensor::zeros(t.shape().to_vec()),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((value, ordered))
}

pub(crate) fn sample_loss<T: crate::tensor::Real>(
    g: &mut Graph<T>,
    model: &Model,
    pred: crate::tensor::NodeId,
    sample: &Sample,
) -> Result<crate::tensor::NodeId> {
    if sample.mask.count() == 0 {
        return Err(Error::Data("sample has no valid pixels".into()));
    }
    let target = sample.target.cast();
    match model.cfg.output {
        OutputMode::Depth => si_log_node(g, pred, &target, &sample.mask, SI_ALPHA, SI_LAMBDA),
        OutputMode::Normals => cosine_loss_node(g, pred, &target, &sample.mask),
    }
}

/// Mean per-sample loss over `batch`, one AdamW update on the averaged gradients.
pub fn train_step(model: &mut Model, batch: &[Sample], opt: &mut OptimState) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    if let Some(i) = batch.iter().position(|s| s.mask.count() == 0) {
        return Err(Error::Data(format!("batch sample {i} has no valid pixels")));
    }
    let mut total = 0.0;
    let mut acc: Option<Vec<Tensor>> = None;
    for sample in batch {
        let (loss, grads) = loss_and_grads(model, sample)?;
        total += loss;
        acc = Some(match acc {
            None => grads,
            Some(mut a) => {
                for (x, y) in a.iter_mut().zip(&grads) {
                    for (p, q) in x.data_mut().iter_mut().zip(y.data()) {
                        *p += q;
                    }
                }
                a
            }
        });
    }
    let n = batch.len() as f32;
    let mut grads = acc.expect("non-empty batch");
    for gr in &mut grads {
        for v in gr.data_mut() {
            *v /= n;
        }
    }
    opt.apply(&mut model.store, &grads)?;
    Ok(total / batch.len() as f64)
}

/// Mean per-sample loss without updating parameters.
pub fn evaluate_loss(model: &Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("no samples".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let mut g = Graph::<f32>::new();
        let out = model.forward(&mut g, &s.image)?;
        let loss = sample_loss(&mut g, model, out.output, s)?;
        total += g.value(loss).data()[0] as f64;
    }
    Ok(total / samples.len() as f64)
}
