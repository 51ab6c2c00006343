use crate::error::{Error, Result};
use crate::isd::OutputMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadMode {
    /// Per-resolution cross-attention stages fused by the mean.
    Isd,
    /// Explicit depth discretization on the finest embeddings only.
    Edd,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub idrs: usize,
    pub afp_iters: usize,
    pub isd_layers: usize,
    pub head: HeadMode,
    pub use_afp: bool,
    pub use_msda: bool,
    pub output: OutputMode,
    pub depth_range: (f64, f64),
    /// Initial value of the learnable depth scale; the range's geometric mean when unset.
    pub depth_scale_init: Option<f64>,
    /// Softmax temperature of the explicit head.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// 48×64 input, C=32, N=8, two AFP iterations and two ISD layers.
    pub fn toy() -> Self {
        Self {
            height: 48,
            width: 64,
            channels: 32,
            idrs: 8,
            afp_iters: 2,
            isd_layers: 2,
            head: HeadMode::Isd,
            use_afp: true,
            use_msda: true,
            output: OutputMode::Depth,
            depth_range: (1.0, 10.0),
            depth_scale_init: None,
            temperature: 1.0,
            seed: 0,
        }
    }

    /// 16×16 input, C=8, N=4; sized for finite-difference checks.
    pub fn mini() -> Self {
        Self { height: 16, width: 16, channels: 8, idrs: 4, ..Self::toy() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.height == 0 || self.width == 0 || self.height % 8 != 0 || self.width % 8 != 0 {
            return bad(format!("input {}×{} must be positive multiples of 8", self.height, self.width));
        }
        if self.channels < 2 {
            return bad(format!("channel width {} must be at least 2", self.channels));
        }
        if self.idrs == 0 {
            return bad("IDR count must be at least 1".into());
        }
        if self.isd_layers == 0 {
            return bad("ISD needs at least one layer".into());
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        let (lo, hi) = self.depth_range;
        if !(lo > 0.0 && hi > lo) {
            return bad(format!("depth range [{lo}, {hi}] must satisfy 0 < min < max"));
        }
        if let Some(s) = self.depth_scale_init {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("depth scale {s} must be positive"));
            }
        }
        if self.head == HeadMode::Edd && self.output == OutputMode::Normals {
            return bad("the explicit head predicts depth only".into());
        }
        Ok(())
    }

    pub fn depth_scale(&self) -> f64 {
        self.depth_scale_init.unwrap_or_else(|| (self.depth_range.0 * self.depth_range.1).sqrt())
    }
}
