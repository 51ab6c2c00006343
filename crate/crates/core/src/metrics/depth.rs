use super::loss::{log_residuals, mean_var};
use super::mask::EvalMask;
use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// Ratio thresholds `1.25^i` for `i ∈ {0.5, 1, 2, 3}`.
pub const DELTA_EXPONENTS: [f64; 4] = [0.5, 1.0, 2.0, 3.0];

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DepthEvalReport {
    pub rms: f64,
    pub rms_log: f64,
    pub log10: f64,
    pub a_rel: f64,
    pub s_rel: f64,
    pub d05: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub si_log: f64,
    pub n_valid: usize,
}

impl DepthEvalReport {
    pub const KEYS: [&'static str; 11] =
        ["rms", "rms_log", "log10", "a_rel", "s_rel", "d05", "d1", "d2", "d3", "si_log", "n_valid"];

    pub fn deltas(&self) -> [f64; 4] {
        [self.d05, self.d1, self.d2, self.d3]
    }

    /// Values in `KEYS` order.
    pub fn values(&self) -> [f64; 11] {
        [
            self.rms,
            self.rms_log,
            self.log10,
            self.a_rel,
            self.s_rel,
            self.d05,
            self.d1,
            self.d2,
            self.d3,
            self.si_log,
            self.n_valid as f64,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    /// Per-sample mean of every metric; `n_valid` is summed.
    pub fn aggregate(reports: &[DepthEvalReport]) -> Option<DepthEvalReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let mut acc = [0.0; 10];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        let m = acc.map(|a| a / n);
        Some(DepthEvalReport {
            rms: m[0],
            rms_log: m[1],
            log10: m[2],
            a_rel: m[3],
            s_rel: m[4],
            d05: m[5],
            d1: m[6],
            d2: m[7],
            d3: m[8],
            si_log: m[9],
            n_valid: reports.iter().map(|r| r.n_valid).sum(),
        })
    }
}

pub fn depth_metrics<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, mask: &EvalMask) -> Result<DepthEvalReport> {
    let eps = log_residuals(pred, gt, mask)?;
    let idx = mask.indices();
    let n = idx.len() as f64;
    let thresholds = DELTA_EXPONENTS.map(|e| 1.25f64.powf(e));
    let (mut sq, mut abs_rel, mut sq_rel, mut log10) = (0.0, 0.0, 0.0, 0.0);
    let mut inliers = [0usize; 4];
    for &i in &idx {
        let (p, g) = (pred.data()[i].f64(), gt.data()[i].f64());
        let d = p - g;
        sq += d * d;
        abs_rel += d.abs() / g;
        sq_rel += d * d / g;
        log10 += (p.log10() - g.log10()).abs();
        let ratio = (p / g).max(g / p);
        for (c, &t) in inliers.iter_mut().zip(&thresholds) {
            if ratio < t {
                *c += 1;
            }
        }
    }
    let (_, var) = mean_var(&eps);
    let rms_log = (eps.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let frac = inliers.map(|c| c as f64 / n);
    Ok(DepthEvalReport {
        rms: (sq / n).sqrt(),
        rms_log,
        log10: log10 / n,
        a_rel: abs_rel / n,
        s_rel: sq_rel / n,
        d05: frac[0],
        d1: frac[1],
        d2: frac[2],
        d3: frac[3],
        si_log: 100.0 * var.sqrt(),
        n_valid: idx.len(),
    })
}
