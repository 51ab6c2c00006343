use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Depth caps used by the common benchmarks, in meters.
pub const CAP_INDOOR: f64 = 10.0;
pub const CAP_KITTI: f64 = 80.0;
pub const CAP_DRIVING: f64 = 150.0;

/// Axis-aligned pixel rectangle `[x, x+w) × [y, y+h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Crop {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.y && row < self.y + self.height && col >= self.x && col < self.x + self.width
    }
}

/// Per-pixel validity over an `h×w` grid.
///
/// A pixel is valid when its explicit flag is set, its ground truth is
/// positive and not above the cap, and it lies inside the crop.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalMask {
    valid: Vec<bool>,
    pub height: usize,
    pub width: usize,
    pub cap: Option<f64>,
    pub crop: Option<Crop>,
}

impl EvalMask {
    pub fn all(height: usize, width: usize) -> Self {
        Self { valid: vec![true; height * width], height, width, cap: None, crop: None }
    }

    pub fn from_flags(flags: Vec<bool>, height: usize, width: usize) -> Result<Self> {
        if flags.len() != height * width {
            return Err(Error::dim(format!("{} mask flags for a {height}×{width} grid", flags.len())));
        }
        Ok(Self { valid: flags, height, width, cap: None, crop: None })
    }

    /// Validity derived from a `[1×h×w]` (or `[h×w]`) ground-truth depth map.
    pub fn from_depth<T: Real>(gt: &Tensor<T>, cap: Option<f64>, crop: Option<Crop>) -> Result<Self> {
        let (h, w) = grid_of(gt)?;
        Self::all(h, w).restrict(gt, cap, crop)
    }

    /// Intersects with the depth, cap and crop rules for `gt`.
    pub fn restrict<T: Real>(mut self, gt: &Tensor<T>, cap: Option<f64>, crop: Option<Crop>) -> Result<Self> {
        let (h, w) = grid_of(gt)?;
        if (h, w) != (self.height, self.width) {
            return Err(Error::dim(format!("mask grid {}×{} vs depth grid {h}×{w}", self.height, self.width)));
        }
        for (i, (flag, &d)) in self.valid.iter_mut().zip(gt.data()).enumerate() {
            let d = d.f64();
            let in_crop = crop.map_or(true, |c| c.contains(i / w, i % w));
            *flag = *flag && d > 0.0 && cap.map_or(true, |c| d <= c) && in_crop;
        }
        self.cap = cap.or(self.cap);
        self.crop = crop.or(self.crop);
        Ok(self)
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    pub fn flags(&self) -> &[bool] {
        &self.valid
    }

    pub fn count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn pixels(&self) -> usize {
        self.valid.len()
    }

    /// Flat indices of valid pixels, ascending.
    pub fn indices(&self) -> Vec<usize> {
        self.valid.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect()
    }
}

/// `(h, w)` of a single-channel map.
pub(crate) fn grid_of<T: Real>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        &[1, h, w] | &[h, w] => Ok((h, w)),
        s => Err(Error::dim(format!("expected a single-channel map, got {s:?}"))),
    }
}
