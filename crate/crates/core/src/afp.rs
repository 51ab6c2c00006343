//! Adaptive feature partitioning.
//!
//! A set of `N` learnable priors is refined into input-dependent internal
//! discrete representations (IDRs) by iterating a *transposed*
//! cross-attention: the softmax runs over the `N` representations for every
//! pixel, so pixels are softly assigned to a few IDRs and each IDR gathers
//! the values of the pixels it won.
//!
//! One iteration, with `k_i, v_i` projected once from the features and
//! `q_j` projected from the current IDRs:
//!
//! ```text
//! W_ij   = exp(k_i·q_j) / Σ_k exp(k_i·q_k)          (rows sum to 1)
//! Ŵ_ij   = W_ij / (Σ_i W_ij + ε)                       (columns sum to ~1)
//! h_j   += Σ_i Ŵ_ij v_i
//! h_j   += FFN(LN(h_j))
//! ```
//!
//! The projections, norms and feed-forward are shared by all iterations.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{trunc_normal, FeedForward, Linear, Norm};
use crate::tensor::{softmax_along, Graph, NodeId, ParamStore, Real, Tensor};

/// Column-normalization epsilon along the pixel axis.
pub const COLUMN_EPS: f64 = 1e-8;
/// Standard deviation of the truncated-normal prior initialization.
pub const PRIOR_INIT_STD: f32 = 0.02;
pub const DEFAULT_IDRS: usize = 32;
pub const DEFAULT_ITERS: usize = 2;

/// Priors and current representations at one resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct IdrSet {
    pub priors: Tensor,
    pub idrs: Tensor,
    pub level: u8,
}

impl IdrSet {
    pub fn from_priors(priors: Tensor, level: u8) -> Result<Self> {
        let (n, _) = priors.dims2()?;
        if n == 0 {
            return Err(Error::Empty("IDR set needs at least one representation".into()));
        }
        Ok(Self { idrs: priors.clone(), priors, level })
    }

    pub fn count(&self) -> usize {
        self.priors.shape()[0]
    }
}

/// Registers `[n×c]` priors under `name`.
pub fn init_priors(store: &mut ParamStore, rng: &mut impl Rng, name: &str, n: usize, c: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("IDR count must be at least 1".into()));
    }
    store.insert(name, trunc_normal(rng, vec![n, c], PRIOR_INIT_STD)?)
}

/// Soft pixel-to-IDR assignment `[M×N]`; every row sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionWeights(Tensor<f64>);

impl PartitionWeights {
    pub fn new<T: Real>(w: &Tensor<T>) -> Result<Self> {
        let (m, n) = w.dims2()?;
        let w: Tensor<f64> = w.cast();
        for i in 0..m {
            let row = &w.data()[i * n..(i + 1) * n];
            if row.iter().any(|&v| !(0.0..=1.0 + 1e-6).contains(&v)) {
                return Err(Error::Domain(format!("partition row {i} has entries outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-5 {
                return Err(Error::Domain(format!("partition row {i} sums to {s}")));
            }
        }
        Ok(Self(w))
    }

    pub fn tensor(&self) -> &Tensor<f64> {
        &self.0
    }

    pub fn pixels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn idrs(&self) -> usize {
        self.0.shape()[1]
    }

    /// One `[h×w]` attention map per IDR, as a `[N×h×w]` raster.
    pub fn as_maps(&self, h: usize, w: usize) -> Result<Tensor> {
        if h * w != self.pixels() {
            return Err(Error::dim(format!("{} pixels cannot form a {h}×{w} map", self.pixels())));
        }
        let t = self.0.transpose2()?.cast::<f32>();
        t.reshape(vec![self.idrs(), h, w])
    }
}

/// Shannon entropy (nats) of each pixel's assignment; lies in `[0, ln N]`.
pub fn partition_entropy(w: &PartitionWeights) -> Tensor<f64> {
    let n = w.idrs();
    let data = w
        .tensor()
        .data()
        .chunks(n)
        .map(|row| row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum::<f64>())
        .collect();
    Tensor::new(vec![w.pixels()], data).expect("non-empty partition")
}

/// Entropy of `softmax(scale · logits)` per row of an `[M×N]` logit matrix.
pub fn scaled_entropy(logits: &Tensor<f64>, scale: f64) -> Result<Tensor<f64>> {
    let w = softmax_along(&logits.map(|z| z * scale), 1)?;
    Ok(partition_entropy(&PartitionWeights::new(&w)?))
}

/// Query, key and value projections shared across iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct AfpProjections {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

/// Transposed-attention core on graph nodes: keys/values `[M×C]`, queries
/// `[N×C]`. Returns the row-softmax weights `[M×N]` and the aggregated
/// update `[N×C]`.
pub fn transposed_attention<T: Real>(
    g: &mut Graph<T>,
    keys: NodeId,
    values: NodeId,
    queries: NodeId,
    logit_scale: Option<f64>,
) -> Result<(NodeId, NodeId)> {
    if g.shape(keys)[0] == 0 {
        return Err(Error::Empty("transposed attention over zero pixels".into()));
    }
    let mut logits = g.matmul_t(keys, false, queries, true)?;
    if let Some(s) = logit_scale {
        logits = g.scale(logits, T::of(s))?;
    }
    let w = g.softmax(logits, 1)?;
    let w_cols = g.normalize_axis(w, 0, T::of(COLUMN_EPS))?;
    let update = g.matmul_t(w_cols, true, values, false)?;
    Ok((w, update))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AfpBlock {
    pub proj: AfpProjections,
    pub feature_norm: Norm,
    pub query_norm: Norm,
    pub ffn: FeedForward,
    /// Multiply logits by `1/√C` when set.
    pub scale_logits: bool,
    pub channels: usize,
}

/// Graph nodes produced by [`AfpBlock::run`].
#[derive(Clone, Copy, Debug)]
pub struct AfpNodes {
    pub idrs: NodeId,
    pub weights: NodeId,
}

impl AfpBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, channels: usize, scale_logits: bool) -> Result<Self> {
        let c = channels;
        Ok(Self {
            proj: AfpProjections {
                query: Linear::new(store, rng, &format!("{name}.q"), c, c)?,
                key: Linear::new(store, rng, &format!("{name}.k"), c, c)?,
                value: Linear::new(store, rng, &format!("{name}.v"), c, c)?,
            },
            feature_norm: Norm::new(store, &format!("{name}.feat_norm"), c)?,
            query_norm: Norm::new(store, &format!("{name}.query_norm"), c)?,
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), c, 2 * c)?,
            scale_logits,
            channels,
        })
    }

    fn logit_scale(&self) -> Option<f64> {
        self.scale_logits.then(|| 1.0 / (self.channels as f64).sqrt())
    }

    /// Keys and values from `[M×C]` features; computed once per run.
    pub fn keys_values<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, feats: NodeId) -> Result<(NodeId, NodeId)> {
        if g.shape(feats)[0] == 0 {
            return Err(Error::Empty("AFP needs at least one pixel".into()));
        }
        let f = self.feature_norm.forward(g, store, feats)?;
        let k = self.proj.key.forward(g, store, f)?;
        let v = self.proj.value.forward(g, store, f)?;
        Ok((k, v))
    }

    fn queries<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, h: NodeId) -> Result<NodeId> {
        let hn = self.query_norm.forward(g, store, h)?;
        self.proj.query.forward(g, store, hn)
    }

    /// One refinement of the `[N×C]` representations `h`.
    pub fn step<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, keys: NodeId, values: NodeId, h: NodeId) -> Result<(NodeId, NodeId)> {
        let q = self.queries(g, store, h)?;
        let (w, update) = transposed_attention(g, keys, values, q, self.logit_scale())?;
        let h = g.add(h, update)?;
        let h = self.ffn.forward(g, store, h)?;
        Ok((w, h))
    }

    /// `iters` refinements starting from `prior`. With zero iterations the
    /// prior node itself is returned and the weights are diagnostics only.
    pub fn run<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, feats: NodeId, prior: NodeId, iters: usize) -> Result<AfpNodes> {
        let (k, v) = self.keys_values(g, store, feats)?;
        let mut h = prior;
        let mut weights = None;
        for _ in 0..iters {
            let (w, next) = self.step(g, store, k, v, h)?;
            weights = Some(w);
            h = next;
        }
        let weights = match weights {
            Some(w) => w,
            None => {
                let q = self.queries(g, store, prior)?;
                transposed_attention(g, k, v, q, self.logit_scale())?.0
            }
        };
        Ok(AfpNodes { idrs: h, weights })
    }
}

/// Tensor-level single step: features `[M×C]`, current IDRs `[N×C]`.
pub fn transposed_attention_step(store: &ParamStore, block: &AfpBlock, feats: &Tensor, idrs: &Tensor) -> Result<(PartitionWeights, Tensor)> {
    let mut g = Graph::<f32>::new();
    let f = g.input(feats.clone());
    let h = g.input(idrs.clone());
    let (k, v) = block.keys_values(&mut g, store, f)?;
    let (w, next) = block.step(&mut g, store, k, v, h)?;
    Ok((PartitionWeights::new(g.value(w))?, g.value(next).clone()))
}

/// Tensor-level refinement of an IDR set over `iters` iterations.
pub fn afp_run(store: &ParamStore, block: &AfpBlock, feats: &Tensor, set: &IdrSet, iters: usize) -> Result<(IdrSet, PartitionWeights)> {
    let mut g = Graph::<f32>::new();
    let f = g.input(feats.clone());
    let prior = g.input(set.priors.clone());
    let out = block.run(&mut g, store, f, prior, iters)?;
    let refined = IdrSet { priors: set.priors.clone(), idrs: g.value(out.idrs).clone(), level: set.level };
    Ok((refined, PartitionWeights::new(g.value(out.weights))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        crate::layers::uniform(rng, shape, 1.0).unwrap()
    }

    #[test]
    fn single_idr_gives_all_ones_and_mean_of_values() {
        let mut r = rng();
        let keys = random(&mut r, vec![5, 3]);
        let values = random(&mut r, vec![5, 3]);
        let q = random(&mut r, vec![1, 3]);
        let mut g = Graph::<f64>::new();
        let (k, v, qn) = (g.input(keys.cast()), g.input(values.cast()), g.input(q.cast()));
        let (w, upd) = transposed_attention(&mut g, k, v, qn, None).unwrap();
        assert!(g.value(w).data().iter().all(|&x| x == 1.0));
        for c in 0..3 {
            let mean: f64 = (0..5).map(|i| values.at2(i, c) as f64).sum::<f64>() / 5.0;
            assert!((g.value(upd).at2(0, c) - mean).abs() < 1e-7);
        }
    }

    #[test]
    fn identical_keys_give_identical_rows_and_tied_queries_uniform_rows() {
        let mut r = rng();
        let row = random(&mut r, vec![1, 4]);
        let keys = Tensor::from_fn(vec![6, 4], |i| row.data()[i % 4]).unwrap();
        let mut g = Graph::<f32>::new();
        let k = g.input(keys);
        let q = g.input(random(&mut r, vec![3, 4]));
        let (w, _) = transposed_attention(&mut g, k, k, q, None).unwrap();
        let wv = g.value(w);
        for i in 1..6 {
            for j in 0..3 {
                assert_eq!(wv.at2(i, j), wv.at2(0, j));
            }
        }
        let tied = g.input(Tensor::full(vec![3, 4], -0.7).unwrap());
        let (w, _) = transposed_attention(&mut g, k, k, tied, None).unwrap();
        assert!(g.value(w).data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-7));
    }

    #[test]
    fn entropy_extremes() {
        let uniform = PartitionWeights::new(&Tensor::<f64>::full(vec![2, 4], 0.25).unwrap()).unwrap();
        for &e in partition_entropy(&uniform).data() {
            assert!((e - 4f64.ln()).abs() < 1e-12);
        }
        let one_hot = PartitionWeights::new(&Tensor::<f64>::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(partition_entropy(&one_hot).data(), &[0.0]);
    }

    #[test]
    fn rejects_unnormalized_weights() {
        assert!(PartitionWeights::new(&Tensor::<f64>::new(vec![1, 2], vec![0.5, 0.6]).unwrap()).is_err());
    }

    #[test]
    fn zero_iterations_return_priors_bitwise() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let block = AfpBlock::new(&mut store, &mut r, "afp", 4, false).unwrap();
        init_priors(&mut store, &mut r, "afp.prior", 3, 4).unwrap();
        let set = IdrSet::from_priors(store.get("afp.prior").unwrap().clone(), 1).unwrap();
        let feats = random(&mut r, vec![6, 4]);
        let (out, w) = afp_run(&store, &block, &feats, &set, 0).unwrap();
        assert!(out.idrs.bit_eq(&set.priors));
        assert_eq!(w.pixels(), 6);
        let (out2, _) = afp_run(&store, &block, &feats, &set, 2).unwrap();
        assert!(!out2.idrs.bit_eq(&set.priors));
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(Tensor::<f32>::zeros(vec![0, 4]).is_err());
        let mut store = ParamStore::new();
        assert!(init_priors(&mut store, &mut rng(), "p", 0, 4).is_err());
    }
}
