use super::mask::EvalMask;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const INLIER_DEGREES: [f64; 3] = [11.5, 22.5, 30.0];
pub const UNIT_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NormalEvalReport {
    pub mean: f64,
    pub median: f64,
    pub rms: f64,
    pub within_11_5: f64,
    pub within_22_5: f64,
    pub within_30: f64,
    pub n_valid: usize,
}

impl NormalEvalReport {
    pub const KEYS: [&'static str; 7] = ["mean", "median", "rms", "a11_5", "a22_5", "a30", "n_valid"];

    pub fn inliers(&self) -> [f64; 3] {
        [self.within_11_5, self.within_22_5, self.within_30]
    }

    pub fn values(&self) -> [f64; 7] {
        [self.mean, self.median, self.rms, self.within_11_5, self.within_22_5, self.within_30, self.n_valid as f64]
    }
}

/// Angular errors in degrees between `[3×h×w]` unit fields over valid pixels.
pub fn angular_errors<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, mask: &EvalMask) -> Result<Vec<f64>> {
    let hw = mask.pixels();
    for t in [pred, gt] {
        if t.numel() != 3 * hw || t.shape()[0] != 3 {
            return Err(Error::dim(format!("normal field {:?} for {hw} pixels", t.shape())));
        }
    }
    let idx = mask.indices();
    if idx.is_empty() {
        return Err(Error::Data("no valid pixels under the mask".into()));
    }
    let vec_at = |t: &Tensor<T>, i: usize| [0, 1, 2].map(|c| t.data()[c * hw + i].f64());
    idx.into_iter()
        .map(|i| {
            let (p, g) = (vec_at(pred, i), vec_at(gt, i));
            for v in [p, g] {
                let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if (norm - 1.0).abs() > UNIT_TOLERANCE {
                    return Err(Error::Domain(format!("normal at pixel {i} has norm {norm}")));
                }
            }
            let dot = p[0] * g[0] + p[1] * g[1] + p[2] * g[2];
            Ok(dot.clamp(-1.0, 1.0).acos().to_degrees())
        })
        .collect()
}

pub fn normal_metrics<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, mask: &EvalMask) -> Result<NormalEvalReport> {
    let mut err = angular_errors(pred, gt, mask)?;
    let n = err.len() as f64;
    let mean = err.iter().sum::<f64>() / n;
    let rms = (err.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let within = INLIER_DEGREES.map(|t| err.iter().filter(|&&e| e < t).count() as f64 / n);
    let mid = (err.len() - 1) / 2;
    let (_, median, _) = err.select_nth_unstable_by(mid, f64::total_cmp);
    Ok(NormalEvalReport {
        mean,
        median: *median,
        rms,
        within_11_5: within[0],
        within_22_5: within[1],
        within_30: within[2],
        n_valid: err.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(vs: &[[f64; 3]]) -> Tensor<f64> {
        let n = vs.len();
        Tensor::from_fn(vec![3, 1, n], |k| vs[k % n][k / n]).unwrap()
    }

    fn tilted(deg: f64) -> [f64; 3] {
        let r = deg.to_radians();
        [r.sin(), 0.0, r.cos()]
    }

    #[test]
    fn identical_and_orthogonal() {
        let gt = field(&[[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]);
        let mask = EvalMask::all(1, 2);
        let r = normal_metrics(&gt, &gt, &mask).unwrap();
        assert_eq!(r.mean, 0.0);
        assert_eq!(r.inliers(), [1.0; 3]);
        let perp = field(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let r = normal_metrics(&perp, &gt, &mask).unwrap();
        assert!((r.mean - 90.0).abs() < 1e-9);
        assert_eq!(r.inliers(), [0.0; 3]);
    }

    #[test]
    fn mixed_rotations() {
        let up = [0.0, 0.0, 1.0];
        let gt = field(&[up; 4]);
        let pred = field(&[tilted(10.0), tilted(25.0), tilted(25.0), tilted(10.0)]);
        let r = normal_metrics(&pred, &gt, &EvalMask::all(1, 4)).unwrap();
        assert!((r.mean - 17.5).abs() < 1e-6);
        assert!((r.median - 10.0).abs() < 1e-6);
        assert_eq!(r.inliers(), [0.5, 0.5, 1.0]);
    }

    #[test]
    fn rejects_non_unit() {
        let gt = field(&[[0.0, 0.0, 1.0]]);
        let bad = field(&[[0.0, 0.0, 1.01]]);
        assert!(matches!(normal_metrics(&bad, &gt, &EvalMask::all(1, 1)), Err(Error::Domain(_))));
    }
}
