use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use idsc::data::{gen_synthetic, SyntheticScene};
use idsc::isd::OutputMode;
use idsc::metrics::{depth_metrics, depth_record, fmt_sig, normal_metrics, normal_record, DepthEvalReport, NormalEvalReport};
use idsc::model::{build_model, evaluate_loss, save_checkpoint, train_step, Model, ModelConfig, Sample};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::RunLog;

/// Held-out scenes are drawn from this seed offset so they never coincide with training scenes.
pub const TEST_SEED_OFFSET: u64 = 1 << 32;

pub fn scene_sample(scene: &SyntheticScene, output: OutputMode) -> Sample {
    let target = match output {
        OutputMode::Depth => scene.depth.clone(),
        OutputMode::Normals => scene.normals.clone(),
    };
    Sample { image: scene.image.clone(), target, mask: scene.mask.clone() }
}

pub struct Datasets {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Median ground-truth depth over the training scenes.
    pub median_depth: f64,
}

pub fn datasets(cfg: &RunConfig) -> Result<Datasets, CliError> {
    let m = cfg.model();
    let seed = cfg.u64("run.seed");
    let gen = |seed: u64, n: usize| gen_synthetic(seed, n, m.height, m.width, m.depth_range);
    let train_scenes = gen(seed, cfg.int("data.train_scenes"))?;
    let test_scenes = gen(seed ^ TEST_SEED_OFFSET, cfg.int("data.test_scenes"))?;
    let mut depths: Vec<f32> = train_scenes.iter().flat_map(|s| s.depth.data().iter().copied()).collect();
    depths.sort_by(f32::total_cmp);
    let median_depth = depths[(depths.len() - 1) / 2] as f64;
    Ok(Datasets {
        train: train_scenes.iter().map(|s| scene_sample(s, m.output)).collect(),
        test: test_scenes.iter().map(|s| scene_sample(s, m.output)).collect(),
        median_depth,
    })
}

pub fn model_config(cfg: &RunConfig, data: &Datasets) -> ModelConfig {
    let mut m = cfg.model();
    m.depth_scale_init = m.depth_scale_init.or(Some(data.median_depth));
    m
}

#[derive(Clone, Debug, PartialEq)]
pub enum EvalSummary {
    Depth(DepthEvalReport),
    Normals(NormalEvalReport),
}

impl EvalSummary {
    pub fn record(&self, label: &str) -> String {
        match self {
            EvalSummary::Depth(r) => depth_record(label, r),
            EvalSummary::Normals(r) => normal_record(label, r),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            EvalSummary::Depth(r) => r.is_finite(),
            EvalSummary::Normals(r) => r.values().iter().all(|v| v.is_finite()),
        }
    }
}

/// Per-sample records and their aggregate over `samples`.
pub fn evaluate_model(model: &Model, samples: &[Sample]) -> Result<(Vec<EvalSummary>, EvalSummary), CliError> {
    let mut per = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = model.predict(&s.image)?;
        per.push(match model.cfg.output {
            OutputMode::Depth => EvalSummary::Depth(depth_metrics(&pred, &s.target, &s.mask)?),
            OutputMode::Normals => EvalSummary::Normals(normal_metrics(&pred, &s.target, &s.mask)?),
        });
    }
    let agg = match model.cfg.output {
        OutputMode::Depth => {
            let rs: Vec<DepthEvalReport> = per.iter().filter_map(|e| if let EvalSummary::Depth(r) = e { Some(*r) } else { None }).collect();
            EvalSummary::Depth(DepthEvalReport::aggregate(&rs).ok_or_else(|| idsc::Error::Data("no test samples".into()))?)
        }
        OutputMode::Normals => {
            let rs: Vec<NormalEvalReport> = per.iter().filter_map(|e| if let EvalSummary::Normals(r) = e { Some(*r) } else { None }).collect();
            EvalSummary::Normals(mean_normal_report(&rs).ok_or_else(|| idsc::Error::Data("no test samples".into()))?)
        }
    };
    Ok((per, agg))
}

pub fn mean_normal_report(rs: &[NormalEvalReport]) -> Option<NormalEvalReport> {
    if rs.is_empty() {
        return None;
    }
    let n = rs.len() as f64;
    let mean = |f: fn(&NormalEvalReport) -> f64| rs.iter().map(f).sum::<f64>() / n;
    Some(NormalEvalReport {
        mean: mean(|r| r.mean),
        median: mean(|r| r.median),
        rms: mean(|r| r.rms),
        within_11_5: mean(|r| r.within_11_5),
        within_22_5: mean(|r| r.within_22_5),
        within_30: mean(|r| r.within_30),
        n_valid: rs.iter().map(|r| r.n_valid).sum(),
    })
}

pub struct TrainOutcome {
    pub model: Model,
    /// Mean loss over the whole training set before the first step.
    pub initial_loss: f64,
    /// Mean loss over the whole training set after the last step.
    pub final_loss: f64,
    /// Batch loss at every step.
    pub losses: Vec<f64>,
    pub test: EvalSummary,
    pub elapsed: Duration,
}

/// Trains on synthetic scenes and evaluates on the held-out set, writing
/// `checkpoint.ckpt`, `loss.csv`, `report.txt` and `config.txt` into `dir`.
pub fn run_training(cfg: &RunConfig, dir: &Path, log: &mut RunLog) -> Result<TrainOutcome, CliError> {
    let start = Instant::now();
    let batch = cfg.int("train.batch");
    if batch == 0 {
        return Err(CliError::Usage("train.batch must be at least 1".into()));
    }
    let data = datasets(cfg)?;
    let mcfg = model_config(cfg, &data);
    let mut model = build_model(&mcfg)?;
    let mut opt = cfg.optimizer(&model.store)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), cfg_with_scale(cfg, &mcfg).echo())?;
    let initial_loss = evaluate_loss(&model, &data.train)?;
    log.line(&format!("parameters {} initial_loss {}", model.store.numel(), fmt_sig(initial_loss)))?;
    let steps = cfg.int("train.steps");
    let mut csv = String::from("step,lr,loss\n");
    let mut losses = Vec::with_capacity(steps);
    let n = data.train.len();
    for step in 0..steps {
        let lr = opt.schedule.lr(step);
        let b: Vec<Sample> = (0..batch).map(|k| data.train[(step * batch + k) % n].clone()).collect();
        let loss = train_step(&mut model, &b, &mut opt)?;
        csv.push_str(&format!("{step},{},{}\n", fmt_sig(lr), fmt_sig(loss)));
        losses.push(loss);
        if step % 100 == 0 || step + 1 == steps {
            log.line(&format!("step {step} lr {} loss {}", fmt_sig(lr), fmt_sig(loss)))?;
        }
    }
    fs::write(dir.join("loss.csv"), csv)?;
    save_checkpoint(&model.store, dir.join("checkpoint.ckpt"))?;
    let final_loss = evaluate_loss(&model, &data.train)?;
    let (per, test) = evaluate_model(&model, &data.test)?;
    let labelled: Vec<(String, EvalSummary)> = per.into_iter().enumerate().map(|(i, s)| (format!("test{i:03}"), s)).collect();
    let report = crate::eval::report_text(&labelled, &test);
    fs::write(dir.join("report.txt"), &report)?;
    log.line(&format!("final_loss {} ratio {}", fmt_sig(final_loss), fmt_sig(final_loss / initial_loss)))?;
    log.line(&test.record("aggregate"))?;
    Ok(TrainOutcome { model, initial_loss, final_loss, losses, test, elapsed: start.elapsed() })
}

/// The run config with the resolved depth scale, which is what `eval` needs to rebuild the model.
fn cfg_with_scale(cfg: &RunConfig, m: &ModelConfig) -> RunConfig {
    let mut c = cfg.clone();
    if let Some(s) = m.depth_scale_init {
        c.set("model.depth_scale", &format!("{s}")).expect("positive scale");
    }
    c
}
