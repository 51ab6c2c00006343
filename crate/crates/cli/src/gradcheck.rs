//! Finite-difference gradient suites for each differentiable block.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use idsc::afp::{init_priors, AfpBlock};
use idsc::data::gen_synthetic;
use idsc::isd::{edd_readout, IsdStage};
use idsc::layers::uniform;
use idsc::metrics::{si_log_node, EvalMask, SI_ALPHA, SI_LAMBDA};
use idsc::model::{build_model, ModelLoss};
use idsc::tensor::{analytic_grads, compare, GradReport, Graph, LossBuilder, NodeId, ParamStore, Real, Selection, Tensor};
use idsc::Result;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::train::scene_sample;

pub const MAX_SIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Afp,
    Isd,
    Edd,
    SiLog,
    Model,
}

impl Block {
    pub const ALL: [Block; 5] = [Block::Afp, Block::Isd, Block::Edd, Block::SiLog, Block::Model];

    pub fn parse(s: &str) -> Option<Vec<Block>> {
        Some(match s {
            "all" => Self::ALL.to_vec(),
            "afp" => vec![Block::Afp],
            "isd" => vec![Block::Isd],
            "edd" => vec![Block::Edd],
            "silog" => vec![Block::SiLog],
            "model" => vec![Block::Model],
            _ => return None,
        })
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Block::Afp => "afp",
            Block::Isd => "isd",
            Block::Edd => "edd",
            Block::SiLog => "silog",
            Block::Model => "model",
        })
    }
}

/// Contracts a node against a fixed random tensor of the same shape, giving a scalar.
fn readout<T: Real>(g: &mut Graph<T>, x: NodeId, weights: &Tensor) -> Result<NodeId> {
    let w = g.input(weights.cast());
    let m = g.mul(x, w)?;
    g.sum(m)
}

struct AfpProbe {
    block: AfpBlock,
    iters: usize,
    weights: Tensor,
}

impl LossBuilder for AfpProbe {
    fn build<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore) -> Result<NodeId> {
        let f = g.bind(store, "probe.feats")?;
        let p = g.bind(store, "probe.prior")?;
        let run = self.block.run(g, store, f, p, self.iters)?;
        readout(g, run.idrs, &self.weights)
    }
}

struct IsdProbe {
    stage: IsdStage,
    weights: Tensor,
}

impl LossBuilder for IsdProbe {
    fn build<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore) -> Result<NodeId> {
        let p = g.bind(store, "probe.pixels")?;
        let h = g.bind(store, "probe.idrs")?;
        let d = self.stage.forward(g, store, p, h)?;
        readout(g, d, &self.weights)
    }
}

struct EddProbe {
    temperature: f64,
    weights: Tensor,
}

impl LossBuilder for EddProbe {
    fn build<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore) -> Result<NodeId> {
        let p = g.bind(store, "probe.pixels")?;
        let r = g.bind(store, "probe.repr")?;
        let lv = g.bind(store, "probe.log_values")?;
        let v = g.exp(lv)?;
        let d = edd_readout(g, p, r, v, self.temperature)?;
        readout(g, d, &self.weights)
    }
}

struct SiLogProbe {
    gt: Tensor,
    mask: EvalMask,
}

impl LossBuilder for SiLogProbe {
    fn build<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore) -> Result<NodeId> {
        let p = g.bind(store, "probe.pred")?;
        si_log_node(g, p, &self.gt.cast(), &self.mask, SI_ALPHA, SI_LAMBDA)
    }
}

#[derive(Clone, Debug)]
pub struct BlockResult {
    pub block: Block,
    pub report: GradReport,
    pub passed: bool,
}

impl BlockResult {
    pub fn line(&self) -> String {
        format!(
            "block={} max_rel={:.3e} checked={} worst={} status={}",
            self.block,
            self.report.max_rel,
            self.report.checked,
            self.report.worst,
            if self.passed { "pass" } else { "fail" }
        )
    }
}

fn check<B: LossBuilder>(builder: &B, store: &ParamStore, selection: &Selection, h: f64, corrupt: bool) -> Result<GradReport> {
    let mut analytic: HashMap<String, Tensor<f64>> = analytic_grads::<f64, B>(builder, store)?;
    if corrupt {
        for t in analytic.values_mut() {
            *t = t.map(|v| 1.5 * v + 1e-3);
        }
    }
    compare(builder, store, &analytic, selection, h)
}

/// Runs the requested suites; `corrupt` perturbs the analytic gradients to
/// exercise the failure path.
pub fn run_suites(cfg: &RunConfig, blocks: &[Block], corrupt: bool) -> std::result::Result<Vec<BlockResult>, CliError> {
    let m = cfg.model();
    if m.height > MAX_SIDE || m.width > MAX_SIDE {
        return Err(CliError::Usage(format!("gradient checks need input at most {MAX_SIDE}×{MAX_SIDE}, got {}×{}", m.height, m.width)));
    }
    m.validate()?;
    let (c, n) = (m.channels, m.idrs);
    let pixels = (m.height / 2) * (m.width / 2);
    let h = cfg.real("gradcheck.step");
    let tol = cfg.real("gradcheck.tolerance");
    let seed = cfg.u64("run.seed");
    let mut out = Vec::with_capacity(blocks.len());
    for &block in blocks {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let report = match block {
            Block::Afp => {
                store.insert("probe.feats", uniform(&mut rng, vec![pixels, c], 1.0)?)?;
                init_priors(&mut store, &mut rng, "probe.prior", n, c)?;
                let prior = store.get_mut("probe.prior").expect("prior");
                *prior = prior.map(|v| v * 25.0);
                let block = AfpBlock::new(&mut store, &mut rng, "probe.afp", c, true)?;
                let probe = AfpProbe { block, iters: m.afp_iters.max(1), weights: uniform(&mut rng, vec![n, c], 1.0)? };
                check(&probe, &store, &Selection::All, h, corrupt)?
            }
            Block::Isd => {
                store.insert("probe.pixels", uniform(&mut rng, vec![pixels, c], 1.0)?)?;
                store.insert("probe.idrs", uniform(&mut rng, vec![n, c], 1.0)?)?;
                let stage = IsdStage::new(&mut store, &mut rng, "probe.isd", c, m.isd_layers)?;
                let probe = IsdProbe { stage, weights: uniform(&mut rng, vec![pixels, c], 1.0)? };
                check(&probe, &store, &Selection::All, h, corrupt)?
            }
            Block::Edd => {
                store.insert("probe.pixels", uniform(&mut rng, vec![pixels, c], 1.0)?)?;
                store.insert("probe.repr", uniform(&mut rng, vec![n, c - 1], 1.0)?)?;
                store.insert("probe.log_values", uniform(&mut rng, vec![n, 1], 1.0)?)?;
                let probe = EddProbe { temperature: m.temperature, weights: uniform(&mut rng, vec![pixels, 1], 1.0)? };
                check(&probe, &store, &Selection::All, h, corrupt)?
            }
            Block::SiLog => {
                let shape = vec![1, m.height, m.width];
                store.insert("probe.pred", Tensor::from_fn(shape.clone(), |_| rng.gen_range(0.5f32..4.0))?)?;
                let gt = Tensor::from_fn(shape, |_| rng.gen_range(0.5f32..4.0))?;
                let flags = (0..m.height * m.width).map(|_| rng.gen_bool(0.8)).collect();
                let probe = SiLogProbe { gt, mask: EvalMask::from_flags(flags, m.height, m.width)? };
                check(&probe, &store, &Selection::All, h, corrupt)?
            }
            Block::Model => {
                let model = build_model(&m)?;
                let scene = &gen_synthetic(seed, 1, m.height, m.width, m.depth_range)?[0];
                let sample = scene_sample(scene, m.output);
                let probe = ModelLoss { model: &model, sample: &sample };
                let selection = Selection::Fraction { fraction: cfg.real("gradcheck.fraction"), seed };
                check(&probe, &model.store, &selection, h, corrupt)?
            }
        };
        let passed = report.max_rel < tol;
        out.push(BlockResult { block, report, passed });
    }
    Ok(out)
}
