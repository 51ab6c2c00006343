use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{HeadMode, ModelConfig};
use crate::afp::{init_priors, AfpBlock};
use crate::error::{Error, Result};
use crate::isd::{edd_readout, project_and_fuse, IsdStage, OutputMode};
use crate::layers::{channel_norm, to_map, to_tokens, Conv, Linear, Norm};
use crate::tensor::{Graph, NodeId, ParamStore, Real, Tensor};

/// Three scales, coarse to fine: `/8`, `/4`, `/2`.
pub const LEVELS: usize = 3;
const SCALES: [usize; LEVELS] = [8, 4, 2];

#[derive(Clone, Debug, PartialEq)]
struct EncoderStage {
    conv: Conv,
    norm: Norm,
    to_width: Conv,
}

#[derive(Clone, Debug, PartialEq)]
struct Mixer {
    proj: Linear,
    gate: String,
}

#[derive(Clone, Debug, PartialEq)]
struct Head {
    afp: AfpBlock,
    prior: String,
    isd: IsdStage,
    out: Linear,
}

#[derive(Clone, Debug, PartialEq)]
enum Decoder {
    Isd { heads: Vec<Head>, depth_scale: Option<String> },
    Edd { afp: AfpBlock, prior: String },
}

/// The parameterized pipeline: encoder, optional cross-scale mixing, FPN,
/// then the discretization head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    encoder: Vec<EncoderStage>,
    mixers: Option<Vec<Mixer>>,
    smooth: Vec<Conv>,
    decoder: Decoder,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[k×H×W]` prediction.
    pub output: NodeId,
    /// Per-scale `[k×h×w]` maps, coarse to fine; absent for the explicit head.
    pub levels: Option<[NodeId; LEVELS]>,
    /// `[hw×N]` partition weights per AFP run.
    pub partitions: Vec<NodeId>,
}

pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = cfg.channels;
    let widths = [c, 2 * c, 4 * c];
    let mut encoder = Vec::with_capacity(LEVELS);
    let mut c_in = 3;
    for (i, &w) in widths.iter().enumerate() {
        encoder.push(EncoderStage {
            conv: Conv::new(&mut store, &mut rng, &format!("enc{i}.conv"), c_in, w, 3, 2)?,
            norm: Norm::new(&mut store, &format!("enc{i}.norm"), w)?,
            to_width: Conv::new(&mut store, &mut rng, &format!("enc{i}.proj"), w, c, 1, 1)?,
        });
        c_in = w;
    }
    let mixers = if cfg.use_msda {
        let mut ms = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            let gate = format!("mix{l}.gate");
            store.insert(&gate, Tensor::zeros(vec![1])?)?;
            ms.push(Mixer { proj: Linear::new(&mut store, &mut rng, &format!("mix{l}.proj"), c, c)?, gate });
        }
        Some(ms)
    } else {
        None
    };
    let smooth = (0..LEVELS)
        .map(|l| Conv::new(&mut store, &mut rng, &format!("fpn{l}.smooth"), c, c, 3, 1))
        .collect::<Result<Vec<_>>>()?;
    let decoder = match cfg.head {
        HeadMode::Isd => {
            let mut heads = Vec::with_capacity(LEVELS);
            for l in 0..LEVELS {
                let prior = format!("head{l}.prior");
                init_priors(&mut store, &mut rng, &prior, cfg.idrs, c)?;
                heads.push(Head {
                    afp: AfpBlock::new(&mut store, &mut rng, &format!("head{l}.afp"), c, true)?,
                    prior,
                    isd: IsdStage::new(&mut store, &mut rng, &format!("head{l}.isd"), c, cfg.isd_layers)?,
                    out: Linear::new(&mut store, &mut rng, &format!("head{l}.out"), c, cfg.output.channels())?,
                });
            }
            let depth_scale = (cfg.output == OutputMode::Depth).then(|| "depth_scale".to_string());
            if let Some(name) = &depth_scale {
                store.insert(name.as_str(), Tensor::scalar(cfg.depth_scale() as f32))?;
            }
            Decoder::Isd { heads, depth_scale }
        }
        HeadMode::Edd => {
            let prior = "edd.prior".to_string();
            init_priors(&mut store, &mut rng, &prior, cfg.idrs, c)?;
            let (lo, hi) = cfg.depth_range;
            let n = cfg.idrs;
            let p = store.get_mut(&prior).expect("prior just inserted");
            for i in 0..n {
                let t = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
                p.data_mut()[i * c + c - 1] = (lo.ln() + t * (hi / lo).ln()) as f32;
            }
            Decoder::Edd { afp: AfpBlock::new(&mut store, &mut rng, "edd.afp", c, true)?, prior }
        }
    };
    Ok(Model { cfg: cfg.clone(), store, encoder, mixers, smooth, decoder })
}

impl Model {
    /// Replaces every parameter with the same-named, same-shaped entry of `other`.
    pub fn load_params(&mut self, other: ParamStore) -> Result<()> {
        if other.len() != self.store.len() {
            return Err(Error::Config(format!("{} parameters supplied, model has {}", other.len(), self.store.len())));
        }
        for (name, t) in self.store.iter() {
            let o = other.get(name).ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))?;
            if o.shape() != t.shape() {
                return Err(Error::shapes(name, t.shape(), o.shape()));
            }
        }
        self.store = other;
        Ok(())
    }

    fn encode<T: Real>(&self, g: &mut Graph<T>, image: NodeId) -> Result<Vec<NodeId>> {
        let mut x = image;
        let mut feats = Vec::with_capacity(LEVELS);
        for stage in &self.encoder {
            let y = stage.conv.forward(g, &self.store, x)?;
            let y = channel_norm(g, &self.store, &stage.norm, y)?;
            x = g.gelu(y)?;
            feats.push(stage.to_width.forward(g, &self.store, x)?);
        }
        feats.reverse();
        Ok(feats)
    }

    /// Each scale gains a gated projection of the other scales resampled onto it.
    fn mix<T: Real>(&self, g: &mut Graph<T>, mixers: &[Mixer], feats: &[NodeId]) -> Result<Vec<NodeId>> {
        let mut out = Vec::with_capacity(LEVELS);
        for (l, m) in mixers.iter().enumerate() {
            let (_, h, w) = g.value(feats[l]).dims3()?;
            let mut acc = None;
            for (k, &f) in feats.iter().enumerate() {
                if k == l {
                    continue;
                }
                let r = g.resize(f, h, w)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, r)?,
                    None => r,
                });
            }
            let others = acc.expect("three scales");
            let tokens = to_tokens(g, others)?;
            let p = m.proj.forward(g, &self.store, tokens)?;
            let p = to_map(g, p, h, w)?;
            let gate = g.bind(&self.store, &m.gate)?;
            let gated = g.mul_scalar(p, gate)?;
            out.push(g.add(feats[l], gated)?);
        }
        Ok(out)
    }

    /// Top-down pathway; returns `[C×h×w]` embeddings coarse to fine.
    fn pyramid<T: Real>(&self, g: &mut Graph<T>, feats: &[NodeId]) -> Result<Vec<NodeId>> {
        let mut out = Vec::with_capacity(LEVELS);
        let mut above: Option<NodeId> = None;
        for (l, &f) in feats.iter().enumerate() {
            let (_, h, w) = g.value(f).dims3()?;
            let merged = match above {
                Some(a) => {
                    let up = g.resize(a, h, w)?;
                    g.add(f, up)?
                }
                None => f,
            };
            above = Some(merged);
            let s = self.smooth[l].forward(g, &self.store, merged)?;
            out.push(g.gelu(s)?);
        }
        Ok(out)
    }

    fn render_input<T: Real>(&self, g: &mut Graph<T>, image: &Tensor) -> Result<NodeId> {
        let (c, h, w) = image.dims3()?;
        if (c, h, w) != (3, self.cfg.height, self.cfg.width) {
            return Err(Error::dim(format!("image {:?} for a {}×{} model", image.shape(), self.cfg.height, self.cfg.width)));
        }
        if !image.is_finite() {
            return Err(Error::Numeric("non-finite input image".into()));
        }
        Ok(g.input(image.map(|v| v - 0.5).cast()))
    }

    /// Forward pass on a `[3×H×W]` image with values nominally in `[0, 1]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, image: &Tensor) -> Result<Forward> {
        let x = self.render_input(g, image)?;
        let feats = self.encode(g, x)?;
        let feats = match &self.mixers {
            Some(m) => self.mix(g, m, &feats)?,
            None => feats,
        };
        let emb = self.pyramid(g, &feats)?;
        let (out_h, out_w) = (self.cfg.height, self.cfg.width);
        let iters = if self.cfg.use_afp { self.cfg.afp_iters } else { 0 };
        match &self.decoder {
            Decoder::Isd { heads, depth_scale } => {
                let mut finals = Vec::with_capacity(LEVELS);
                let mut partitions = Vec::with_capacity(LEVELS);
                for (head, &e) in heads.iter().zip(&emb) {
                    let (_, h, w) = g.value(e).dims3()?;
                    let tokens = to_tokens(g, e)?;
                    let prior = g.bind(&self.store, &head.prior)?;
                    let idrs = if iters > 0 {
                        let run = head.afp.run(g, &self.store, tokens, prior, iters)?;
                        partitions.push(run.weights);
                        run.idrs
                    } else {
                        prior
                    };
                    finals.push((head.isd.forward(g, &self.store, tokens, idrs)?, h, w));
                }
                let scale = depth_scale.as_ref().map(|n| g.bind(&self.store, n)).transpose()?;
                let outs: Vec<Linear> = heads.iter().map(|h| h.out.clone()).collect();
                let fused = project_and_fuse(g, &self.store, &finals, &outs, self.cfg.output, scale, out_h, out_w)?;
                Ok(Forward { output: fused.fused, levels: Some(fused.levels), partitions })
            }
            Decoder::Edd { afp, prior } => {
                let finest = emb[LEVELS - 1];
                let (_, h, w) = g.value(finest).dims3()?;
                let tokens = to_tokens(g, finest)?;
                let stacked = g.bind(&self.store, prior)?;
                let c = self.cfg.channels;
                let mut partitions = Vec::new();
                let refined = if iters > 0 {
                    let run = afp.run(g, &self.store, tokens, stacked, iters)?;
                    partitions.push(run.weights);
                    run.idrs
                } else {
                    stacked
                };
                let repr = g.slice_cols(refined, 0, c - 1)?;
                let log_v = g.slice_cols(stacked, c - 1, c)?;
                let values = g.exp(log_v)?;
                let d = edd_readout(g, tokens, repr, values, self.cfg.temperature)?;
                let map = g.reshape(d, vec![1, h, w])?;
                let output = g.resize(map, out_h, out_w)?;
                Ok(Forward { output, levels: None, partitions })
            }
        }
    }

    /// f32 prediction for one image.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let out = self.forward(&mut g, image)?;
        Ok(g.value(out.output).clone())
    }

    pub fn scales(&self) -> [(usize, usize); LEVELS] {
        SCALES.map(|s| (self.cfg.height / s, self.cfg.width / s))
    }
}
