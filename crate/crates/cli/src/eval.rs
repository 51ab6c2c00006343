//! Raster-pair and checkpoint evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use idsc::data::read_raster;
use idsc::isd::OutputMode;
use idsc::metrics::{depth_metrics, normal_metrics, Crop, EvalMask};
use idsc::model::{build_model, load_checkpoint};
use idsc::tensor::Tensor;
use idsc::Error;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::train::{datasets, evaluate_model, EvalSummary};

pub struct RasterPair {
    pub label: String,
    pub pred: PathBuf,
    pub gt: PathBuf,
}

/// Pairs `<stem>.pred.idsc` with `<stem>.gt.idsc` in `dir`, sorted by stem.
pub fn pairs_in_dir(dir: &Path) -> Result<Vec<RasterPair>, CliError> {
    let mut stems: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".pred.idsc")).map(str::to_string))
        .collect();
    stems.sort();
    let mut out = Vec::with_capacity(stems.len());
    for stem in stems {
        let gt = dir.join(format!("{stem}.gt.idsc"));
        if !gt.is_file() {
            return Err(Error::Data(format!("{} has no matching ground truth", dir.join(format!("{stem}.pred.idsc")).display())).into());
        }
        out.push(RasterPair { label: stem.clone(), pred: dir.join(format!("{stem}.pred.idsc")), gt });
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no *.pred.idsc files in {}", dir.display())).into());
    }
    Ok(out)
}

fn evaluate_pair(pred: &Tensor, gt: &Tensor, p: &RasterPair, cap: Option<f64>, crop: Option<Crop>) -> Result<EvalSummary, CliError> {
    if pred.shape() != gt.shape() {
        return Err(Error::Data(format!(
            "{}: shape {:?} does not match {} with shape {:?}",
            p.pred.display(),
            pred.shape(),
            p.gt.display(),
            gt.shape()
        ))
        .into());
    }
    let in_file = |e: Error| -> CliError { Error::Data(format!("{}: {e}", p.gt.display())).into() };
    match gt.shape()[0] {
        1 => {
            let mask = EvalMask::from_depth(gt, cap, crop)?;
            if mask.count() == 0 {
                return Err(in_file(Error::Data("no valid pixels".into())));
            }
            Ok(EvalSummary::Depth(depth_metrics(pred, gt, &mask)?))
        }
        3 => {
            let (h, w) = (gt.shape()[1], gt.shape()[2]);
            let flags = (0..h * w).map(|i| crop.map_or(true, |c| c.contains(i / w, i % w))).collect();
            let mask = EvalMask::from_flags(flags, h, w)?;
            if mask.count() == 0 {
                return Err(in_file(Error::Data("no valid pixels".into())));
            }
            Ok(EvalSummary::Normals(normal_metrics(pred, gt, &mask)?))
        }
        c => Err(in_file(Error::Data(format!("{c} channels; expected 1 (depth) or 3 (normals)")))),
    }
}

/// Per-pair records followed by the aggregate.
pub fn evaluate_pairs(pairs: &[RasterPair], cap: Option<f64>, crop: Option<Crop>) -> Result<(Vec<(String, EvalSummary)>, EvalSummary), CliError> {
    let mut per = Vec::with_capacity(pairs.len());
    for p in pairs {
        let pred = read_raster(&p.pred).map_err(|e| Error::Data(format!("{}: {e}", p.pred.display())))?;
        let gt = read_raster(&p.gt).map_err(|e| Error::Data(format!("{}: {e}", p.gt.display())))?;
        per.push((p.label.clone(), evaluate_pair(&pred, &gt, p, cap, crop)?));
    }
    let agg = aggregate(per.iter().map(|(_, s)| s))?;
    Ok((per, agg))
}

fn aggregate<'a>(items: impl Iterator<Item = &'a EvalSummary>) -> Result<EvalSummary, CliError> {
    let items: Vec<&EvalSummary> = items.collect();
    let depth: Vec<_> = items.iter().filter_map(|s| if let EvalSummary::Depth(r) = s { Some(*r) } else { None }).collect();
    let normals: Vec<_> = items.iter().filter_map(|s| if let EvalSummary::Normals(r) = s { Some(*r) } else { None }).collect();
    if !depth.is_empty() && !normals.is_empty() {
        return Err(Error::Data("cannot aggregate depth and normal rasters together".into()).into());
    }
    if depth.is_empty() {
        crate::train::mean_normal_report(&normals).map(EvalSummary::Normals)
    } else {
        idsc::metrics::DepthEvalReport::aggregate(&depth).map(EvalSummary::Depth)
    }
    .ok_or_else(|| Error::Data("nothing to evaluate".into()).into())
}

/// Rebuilds the model from `cfg`, loads `checkpoint` and evaluates on the held-out scenes.
pub fn evaluate_checkpoint(cfg: &RunConfig, checkpoint: &Path, cap: Option<f64>, crop: Option<Crop>) -> Result<(Vec<(String, EvalSummary)>, EvalSummary), CliError> {
    let mut data = datasets(cfg)?;
    let mut model = build_model(&crate::train::model_config(cfg, &data))?;
    model.load_params(load_checkpoint(checkpoint)?)?;
    if cap.is_some() || crop.is_some() {
        for s in &mut data.test {
            s.mask = match model.cfg.output {
                OutputMode::Depth => s.mask.clone().restrict(&s.target, cap, crop)?,
                OutputMode::Normals => {
                    let (h, w) = (s.mask.height, s.mask.width);
                    let flags = (0..h * w).map(|i| s.mask.is_valid(i) && crop.map_or(true, |c| c.contains(i / w, i % w))).collect();
                    EvalMask::from_flags(flags, h, w)?
                }
            };
        }
    }
    let (per, agg) = evaluate_model(&model, &data.test)?;
    Ok((per.into_iter().enumerate().map(|(i, s)| (format!("test{i:03}"), s)).collect(), agg))
}

pub fn report_text(per: &[(String, EvalSummary)], agg: &EvalSummary) -> String {
    let mut out = String::new();
    for (label, s) in per {
        out.push_str(&s.record(label));
        out.push('\n');
    }
    out.push_str(&agg.record("aggregate"));
    out.push('\n');
    out
}
