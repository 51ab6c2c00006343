//! Flat dotted-key run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use idsc::data::SplitSpec;
use idsc::isd::OutputMode;
use idsc::metrics::Crop;
use idsc::model::{HeadMode, ModelConfig, OptimState, Schedule};
use idsc::tensor::ParamStore;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Int,
    Real,
    Flag,
    /// One of a fixed set of words.
    Choice(&'static [&'static str]),
    /// `auto`, `none` or a positive real.
    OptReal,
    /// `none` or `x,y,width,height`.
    Rect,
    /// Non-empty comma-separated list of the inner kind.
    List(&'static Kind),
}

const HEADS: &[&str] = &["isd", "edd"];
const OUTPUTS: &[&str] = &["depth", "normals"];

static SCHEMA: &[(&str, &str, Kind)] = &[
    ("run.seed", "0", Kind::Int),
    ("model.height", "48", Kind::Int),
    ("model.width", "64", Kind::Int),
    ("model.channels", "32", Kind::Int),
    ("model.n_idrs", "8", Kind::Int),
    ("model.head", "isd", Kind::Choice(HEADS)),
    ("model.use_afp", "true", Kind::Flag),
    ("model.use_msda", "true", Kind::Flag),
    ("model.output", "depth", Kind::Choice(OUTPUTS)),
    ("model.depth_min", "1", Kind::Real),
    ("model.depth_max", "10", Kind::Real),
    ("model.depth_scale", "auto", Kind::OptReal),
    ("model.temperature", "1", Kind::Real),
    ("afp.iters", "2", Kind::Int),
    ("isd.layers", "2", Kind::Int),
    ("train.steps", "2000", Kind::Int),
    ("train.batch", "4", Kind::Int),
    ("train.lr", "0.0002", Kind::Real),
    ("train.final_lr", "0.00002", Kind::Real),
    ("train.weight_decay", "0.02", Kind::Real),
    ("train.warm_fraction", "0.3", Kind::Real),
    ("train.beta1", "0.9", Kind::Real),
    ("train.beta2", "0.999", Kind::Real),
    ("train.eps", "1e-8", Kind::Real),
    ("train.clip_norm", "10", Kind::OptReal),
    ("data.train_scenes", "16", Kind::Int),
    ("data.test_scenes", "8", Kind::Int),
    ("eval.cap", "none", Kind::OptReal),
    ("eval.crop", "none", Kind::Rect),
    ("split.train_thresh", "2", Kind::Real),
    ("split.test_thresh", "50", Kind::Real),
    ("split.max_occlusion", "0.3", Kind::Real),
    ("split.crop_width", "1920", Kind::Int),
    ("split.crop_height", "870", Kind::Int),
    ("split.top_crop", "180", Kind::Int),
    ("split.depth_cap", "150", Kind::Real),
    ("split.shared_gate", "false", Kind::Flag),
    ("gradcheck.step", "1e-4", Kind::Real),
    ("gradcheck.fraction", "0.01", Kind::Real),
    ("gradcheck.tolerance", "0.002", Kind::Real),
    ("ablate.heads", "isd,edd", Kind::List(&Kind::Choice(HEADS))),
    ("ablate.afp", "true,false", Kind::List(&Kind::Flag)),
    ("ablate.msda", "true,false", Kind::List(&Kind::Flag)),
    ("ablate.idrs", "8", Kind::List(&Kind::Int)),
];

fn check(kind: Kind, v: &str) -> Result<(), String> {
    let ok = match kind {
        Kind::Int => v.parse::<u64>().is_ok(),
        Kind::Real => v.parse::<f64>().map_or(false, f64::is_finite),
        Kind::Flag => matches!(v, "true" | "false"),
        Kind::Choice(words) => words.contains(&v),
        Kind::OptReal => matches!(v, "auto" | "none") || v.parse::<f64>().map_or(false, |x| x.is_finite() && x > 0.0),
        Kind::Rect => v == "none" || (v.split(',').count() == 4 && v.split(',').all(|p| p.trim().parse::<usize>().is_ok())),
        Kind::List(inner) => {
            return if v.trim().is_empty() {
                Err("empty list".into())
            } else {
                v.split(',').try_for_each(|p| check(*inner, p.trim()))
            }
        }
    };
    if ok {
        Ok(())
    } else {
        Err(format!("{v:?} is not a valid {kind:?}"))
    }
}

/// Every knob with its effective value; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: SCHEMA.iter().map(|(k, v, _)| (*k, v.to_string())).collect() }
    }
}

impl RunConfig {
    /// Defaults sized for finite-difference checks: 16×16 input, C=8, N=4.
    pub fn miniature() -> Self {
        let mut c = Self::default();
        for (k, v) in [("model.height", "16"), ("model.width", "16"), ("model.channels", "8"), ("model.n_idrs", "4")] {
            c.set(k, v).expect("schema key");
        }
        c
    }

    pub fn keys() -> impl Iterator<Item = &'static str> {
        SCHEMA.iter().map(|(k, _, _)| *k)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let (k, _, kind) = SCHEMA
            .iter()
            .find(|(k, _, _)| *k == key)
            .ok_or_else(|| CliError::Usage(format!("unknown config key {key:?}")))?;
        let value = value.trim();
        check(*kind, value).map_err(|e| CliError::Usage(format!("{key}: {e}")))?;
        self.values.insert(k, value.to_string());
        Ok(())
    }

    /// Applies a `key=value` assignment.
    pub fn assign(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair.split_once('=').ok_or_else(|| CliError::Usage(format!("expected key=value, got {pair:?}")))?;
        self.set(k.trim(), v)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.assign(line).map_err(|e| CliError::Usage(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).unwrap_or_else(|| panic!("schema key {key}"))
    }

    pub fn int(&self, key: &str) -> usize {
        self.get(key).parse().expect("validated integer")
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.get(key).parse().expect("validated integer")
    }

    pub fn real(&self, key: &str) -> f64 {
        self.get(key).parse().expect("validated real")
    }

    pub fn flag(&self, key: &str) -> bool {
        self.get(key) == "true"
    }

    pub fn opt_real(&self, key: &str) -> Option<f64> {
        self.get(key).parse().ok()
    }

    pub fn list(&self, key: &str) -> Vec<String> {
        self.get(key).split(',').map(|s| s.trim().to_string()).collect()
    }

    /// `key = value` for every knob, in key order.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            writeln!(out, "{k} = {v}").expect("string write");
        }
        out
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            height: self.int("model.height"),
            width: self.int("model.width"),
            channels: self.int("model.channels"),
            idrs: self.int("model.n_idrs"),
            afp_iters: self.int("afp.iters"),
            isd_layers: self.int("isd.layers"),
            head: if self.get("model.head") == "edd" { HeadMode::Edd } else { HeadMode::Isd },
            use_afp: self.flag("model.use_afp"),
            use_msda: self.flag("model.use_msda"),
            output: if self.get("model.output") == "normals" { OutputMode::Normals } else { OutputMode::Depth },
            depth_range: (self.real("model.depth_min"), self.real("model.depth_max")),
            depth_scale_init: self.opt_real("model.depth_scale"),
            temperature: self.real("model.temperature"),
            seed: self.u64("run.seed"),
        }
    }

    pub fn optimizer(&self, store: &ParamStore) -> Result<OptimState, CliError> {
        let schedule = Schedule {
            base_lr: self.real("train.lr"),
            final_lr: self.real("train.final_lr"),
            warm_fraction: self.real("train.warm_fraction"),
            total_steps: self.int("train.steps"),
        };
        let mut opt = OptimState::new(store, schedule, self.real("train.weight_decay"))?;
        opt.betas = (self.real("train.beta1"), self.real("train.beta2"));
        opt.eps = self.real("train.eps");
        opt.clip_norm = self.opt_real("train.clip_norm");
        Ok(opt)
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train_threshold: self.real("split.train_thresh"),
            test_threshold: self.real("split.test_thresh"),
            max_occlusion: self.real("split.max_occlusion"),
            crop_width: self.int("split.crop_width") as u32,
            crop_height: self.int("split.crop_height") as u32,
            top_crop: self.int("split.top_crop") as u32,
            depth_cap: self.real("split.depth_cap"),
            shared_gate: self.flag("split.shared_gate"),
        }
    }

    pub fn eval_crop(&self) -> Option<Crop> {
        let v = self.get("eval.crop");
        if v == "none" {
            return None;
        }
        let p: Vec<usize> = v.split(',').map(|s| s.trim().parse().expect("validated rectangle")).collect();
        Some(Crop { x: p[0], y: p[1], width: p[2], height: p[3] })
    }
}
