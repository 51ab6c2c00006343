use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use idsc::afp::{init_priors, partition_entropy, scaled_entropy, transposed_attention_step, AfpBlock, PartitionWeights};
use idsc::isd::{edd_head, edd_selector_params, isd_layer, EddHead};
use idsc::metrics::{depth_metrics, si_log_loss, EvalMask};
use idsc::tensor::{analytic_grads, loss_value, softmax_along, Graph, LossBuilder, NodeId, ParamStore, Real, Tensor};
use idsc::Result;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi)).unwrap()
}

/// One primitive applied to the parameter `x`, read out against fixed weights.
struct OpProbe {
    op: usize,
    rows: usize,
    cols: usize,
    extra: Tensor,
}

const OPS: usize = 15;

impl LossBuilder for OpProbe {
    fn build<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore) -> Result<NodeId> {
        let (r, c) = (self.rows, self.cols);
        let x = g.bind(store, "x")?;
        let y = match self.op {
            0 => {
                let w = g.bind(store, "w")?;
                g.matmul(x, w)?
            }
            1 => g.softmax(x, 1)?,
            2 => {
                let gain = g.bind(store, "gain")?;
                let bias = g.bind(store, "bias")?;
                g.layer_norm(x, gain, bias, T::of(1e-5))?
            }
            3 => g.gelu(x)?,
            4 => g.softplus(x)?,
            5 => g.exp(x)?,
            6 => g.square(x)?,
            7 => {
                let p = g.softplus(x)?;
                g.sqrt(p)?
            }
            8 => {
                let p = g.softplus(x)?;
                g.log(p)?
            }
            9 => {
                let p = g.softplus(x)?;
                g.normalize_axis(p, 0, T::of(1e-6))?
            }
            10 => g.l2_normalize_rows(x, T::of(1e-9))?,
            11 => {
                let w = g.bind(store, "w")?;
                let t = g.transpose(x)?;
                g.matmul_t(t, true, w, false)?
            }
            12 => {
                let m = g.reshape(x, vec![1, r, c])?;
                let w = g.bind(store, "kernel")?;
                let b = g.bind(store, "kbias")?;
                let s = 1 + (r + c) % 2;
                g.conv2d(m, w, b, s, 1)?
            }
            13 => {
                let m = g.reshape(x, vec![1, r, c])?;
                g.resize(m, r + 1, 2 * c)?
            }
            _ => {
                let s = g.slice_cols(x, 0, c.max(2) - 1)?;
                let idx = (0..r * (c.max(2) - 1)).rev().step_by(2).collect();
                let flat = g.reshape(s, vec![r * (c.max(2) - 1)])?;
                g.gather(flat, idx)?
            }
        };
        let shape = g.shape(y).to_vec();
        let w = g.input(Tensor::from_fn(shape, |i| T::of(self.extra.data()[i % self.extra.numel()] as f64))?);
        let m = g.mul(y, w)?;
        g.sum(m)
    }
}

/// Max over elements of `|a − n| / (1e-6 + |n|)` against 64-bit central differences.
fn fd_error<B: LossBuilder>(b: &B, store: &ParamStore, h: f64) -> f64 {
    let analytic = analytic_grads::<f64, B>(b, store).unwrap();
    let mut worst = 0.0f64;
    for (name, a) in &analytic {
        let base: Tensor<f64> = store.get(name).unwrap().cast();
        for i in 0..base.numel() {
            let at = |d: f64| {
                let mut t = base.clone();
                t.data_mut()[i] += d;
                loss_value::<f64, B>(b, store, HashMap::from([(name.clone(), t)])).unwrap()
            };
            let n = (at(h) - at(-h)) / (2.0 * h);
            worst = worst.max((a.data()[i] - n).abs() / (1e-6 + n.abs()));
        }
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(150))]

    #[test]
    fn op_gradients_match_central_differences(op in 0..OPS, rows in 2usize..5, cols in 2usize..5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        store.insert("x", rand_tensor(&mut r, vec![rows, cols], -1.5, 1.5)).unwrap();
        store.insert("w", rand_tensor(&mut r, vec![cols, 3], -1.0, 1.0)).unwrap();
        store.insert("gain", rand_tensor(&mut r, vec![cols], 0.5, 1.5)).unwrap();
        store.insert("bias", rand_tensor(&mut r, vec![cols], -0.5, 0.5)).unwrap();
        store.insert("kernel", rand_tensor(&mut r, vec![2, 1, 3, 3], -1.0, 1.0)).unwrap();
        store.insert("kbias", rand_tensor(&mut r, vec![2], -0.5, 0.5)).unwrap();
        let probe = OpProbe { op, rows, cols, extra: rand_tensor(&mut r, vec![7], -1.0, 1.0) };
        let err = fd_error(&probe, &store, 1e-5);
        prop_assert!(err < 1e-5, "op {op}: relative error {err}");
    }

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(rows in 1usize..6, cols in 1usize..8, shift in -50.0f64..50.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x: Tensor<f64> = Tensor::from_fn(vec![rows, cols], |_| r.gen_range(-20.0..20.0)).unwrap();
        let s = softmax_along(&x, 1).unwrap();
        let shifted = softmax_along(&x.map(|v| v + shift), 1).unwrap();
        for (i, row) in s.data().chunks(cols).enumerate() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            for (j, &p) in row.iter().enumerate() {
                prop_assert!((p - shifted.data()[i * cols + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn partition_rows_sum_to_one(pixels in 1usize..40, n in 1usize..10, c in 2usize..9, seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let block = AfpBlock::new(&mut store, &mut r, "afp", c, true).unwrap();
        init_priors(&mut store, &mut r, "prior", n, c).unwrap();
        let feats = rand_tensor(&mut r, vec![pixels, c], -2.0, 2.0);
        let (w, next) = transposed_attention_step(&store, &block, &feats, store.get("prior").unwrap()).unwrap();
        prop_assert_eq!(w.tensor().shape(), &[pixels, n]);
        prop_assert_eq!(next.shape(), &[n, c]);
        for row in w.tensor().data().chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
        let h = partition_entropy(&w);
        prop_assert!(h.data().iter().all(|&e| e >= -1e-12 && e <= (n as f64).ln() + 1e-6));
    }

    #[test]
    fn sharper_logits_lower_entropy(pixels in 1usize..20, n in 2usize..10, seed in any::<u64>()) {
        let mut r = rng(seed);
        let logits: Tensor<f64> = Tensor::from_fn(vec![pixels, n], |_| r.gen_range(-3.0..3.0)).unwrap();
        let scales = [0.5, 1.0, 2.0, 4.0];
        let ents: Vec<Tensor<f64>> = scales.iter().map(|&s| scaled_entropy(&logits, s).unwrap()).collect();
        for (i, row) in logits.data().chunks(n).enumerate() {
            let spread = row.iter().cloned().fold(f64::MIN, f64::max) - row.iter().cloned().fold(f64::MAX, f64::min);
            if spread < 1e-6 {
                continue;
            }
            for k in 1..scales.len() {
                prop_assert!(ents[k].data()[i] < ents[k - 1].data()[i], "row {i} scale {}", scales[k]);
            }
        }
    }

    #[test]
    fn selector_layer_reproduces_explicit_head(pixels in 1usize..30, n in 1usize..10, c in 2usize..9, inv_t in 0.25f32..4.0, seed in any::<u64>()) {
        let t = 1.0 / inv_t as f64;
        let mut r = rng(seed);
        let pix: Tensor<f64> = Tensor::from_fn(vec![pixels, c], |_| r.gen_range(-2.0..2.0)).unwrap();
        let repr = rand_tensor(&mut r, vec![n, c - 1], -2.0, 2.0);
        let values = rand_tensor(&mut r, vec![n, 1], 0.5, 10.0);
        let expected = edd_head(&pix, &EddHead::new(repr.clone(), values.clone(), t).unwrap()).unwrap();
        let mut store = ParamStore::new();
        let params = edd_selector_params(&mut store, "sel", c, t).unwrap();
        let idrs: Tensor<f64> = Tensor::from_fn(vec![n, c], |k| {
            let (i, j) = (k / c, k % c);
            if j < c - 1 { repr.at2(i, j) as f64 } else { values.data()[i] as f64 }
        }).unwrap();
        let mut g = Graph::<f64>::new();
        let p = g.input(pix);
        let h = g.input(idrs);
        let acc = g.input(Tensor::zeros(vec![pixels, c]).unwrap());
        let out = isd_layer(&mut g, &store, &params, p, h, acc).unwrap();
        let out = g.value(out);
        for i in 0..pixels {
            prop_assert!((out.at2(i, 0) - expected.data()[i]).abs() < 1e-6);
            for j in 1..c {
                prop_assert!(out.at2(i, j) == 0.0);
            }
        }
    }

    #[test]
    fn deltas_are_monotone_and_symmetric(n in 1usize..64, seed in any::<u64>()) {
        let mut r = rng(seed);
        let gt: Tensor<f64> = Tensor::from_fn(vec![1, 1, n], |_| r.gen_range(0.5..20.0)).unwrap();
        let pred: Tensor<f64> = Tensor::from_fn(vec![1, 1, n], |i| gt.data()[i] * r.gen_range(0.3f64..3.0)).unwrap();
        let mask = EvalMask::all(1, n);
        let a = depth_metrics(&pred, &gt, &mask).unwrap();
        let d = a.deltas();
        prop_assert!(d[0] <= d[1] && d[1] <= d[2] && d[2] <= d[3]);
        let b = depth_metrics(&gt, &pred, &mask).unwrap();
        prop_assert_eq!(a.deltas(), b.deltas());
        prop_assert!((a.si_log - b.si_log).abs() < 1e-9);
    }

    #[test]
    fn si_log_is_scale_invariant_and_consistent_with_loss(n in 2usize..64, k in 0.1f64..10.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let gt: Tensor<f64> = Tensor::from_fn(vec![1, 1, n], |_| r.gen_range(0.5..20.0)).unwrap();
        let pred: Tensor<f64> = Tensor::from_fn(vec![1, 1, n], |i| gt.data()[i] * r.gen_range(0.5f64..2.0)).unwrap();
        let mask = EvalMask::all(1, n);
        let base = depth_metrics(&pred, &gt, &mask).unwrap();
        let scaled = depth_metrics(&pred.map(|v| v * k), &gt, &mask).unwrap();
        prop_assert!((base.si_log - scaled.si_log).abs() < 1e-4 * base.si_log.max(1.0));
        // With no mean term the loss is the metric up to the prefactor.
        let loss = si_log_loss(&pred, &gt, &mask, 100.0, 0.0).unwrap();
        prop_assert!((loss - base.si_log).abs() < 1e-9 * base.si_log.max(1.0));
        let mean_eps = (0..n).map(|i| (pred.data()[i] / gt.data()[i]).ln()).sum::<f64>() / n as f64;
        let full = si_log_loss(&pred, &gt, &mask, 10.0, 0.15).unwrap();
        let from_metric = 0.1 * (base.si_log.powi(2) + 1e4 * 0.15 * mean_eps.powi(2)).sqrt();
        prop_assert!((full - from_metric).abs() < 1e-4, "{full} vs {from_metric}");
    }

    #[test]
    fn masked_pixels_do_not_matter(n in 2usize..40, seed in any::<u64>()) {
        let mut r = rng(seed);
        let gt: Tensor<f64> = Tensor::from_fn(vec![1, 1, n], |_| r.gen_range(0.5..20.0)).unwrap();
        let pred: Tensor<f64> = Tensor::from_fn(vec![1, 1, n], |_| r.gen_range(0.5..20.0)).unwrap();
        let mut flags: Vec<bool> = (0..n).map(|_| r.gen_bool(0.6)).collect();
        flags[0] = true;
        let mask = EvalMask::from_flags(flags.clone(), 1, n).unwrap();
        let mut other = pred.clone();
        for (i, &f) in flags.iter().enumerate() {
            if !f {
                other.data_mut()[i] = r.gen_range(0.5..20.0);
            }
        }
        prop_assert_eq!(depth_metrics(&pred, &gt, &mask).unwrap(), depth_metrics(&other, &gt, &mask).unwrap());
        prop_assert_eq!(si_log_loss(&pred, &gt, &mask, 10.0, 0.15).unwrap(), si_log_loss(&other, &gt, &mask, 10.0, 0.15).unwrap());
    }
}

#[test]
fn partition_weights_reject_bad_rows() {
    let bad = Tensor::new(vec![1, 2], vec![0.7f32, 0.4]).unwrap();
    assert!(PartitionWeights::new(&bad).is_err());
}
