//! Toy end-to-end pipeline and its training loop.

mod checkpoint;
mod config;
mod net;
mod optim;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CKPT_MAGIC, CKPT_VERSION};
pub use config::{HeadMode, ModelConfig};
pub use net::{build_model, Forward, Model, LEVELS};
pub use optim::{
    evaluate_loss, loss_and_grads, train_step, OptimState, Sample, Schedule, ADAM_EPS, BASE_LR, BETAS, CLIP_NORM, FINAL_LR,
    WARM_FRACTION, WEIGHT_DECAY,
};

use crate::error::Result;
use crate::tensor::{Graph, LossBuilder, NodeId, ParamStore, Real};

/// Full-model loss on one sample, for gradient checks. Parameters are read
/// from `store`, which must hold the model's own parameter names.
pub struct ModelLoss<'a> {
    pub model: &'a Model,
    pub sample: &'a Sample,
}

impl LossBuilder for ModelLoss<'_> {
    fn build<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore) -> Result<NodeId> {
        let mut view = self.model.clone();
        if !std::ptr::eq(store, &self.model.store) {
            view.load_params(store.clone())?;
        }
        let out = view.forward(g, &self.sample.image)?;
        optim::sample_loss(g, &view, out.output, self.sample)
    }
}
