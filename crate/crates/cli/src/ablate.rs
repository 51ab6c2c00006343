//! Flag-grid and representation-count sweeps.

use std::fs;
use std::path::Path;

use idsc::metrics::fmt_sig;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::train::{run_training, EvalSummary};
use crate::RunLog;

pub const CSV_HEADER: &str = "head,afp,msda,n_idrs,d1,rms,a_rel,final_loss";
pub const IDR_SWEEP: &str = "2,4,8,16,32,64,128";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridPoint {
    pub head: String,
    pub afp: String,
    pub msda: String,
    pub idrs: String,
}

impl GridPoint {
    pub fn label(&self) -> String {
        format!("{}_afp-{}_msda-{}_n{}", self.head, self.afp, self.msda, self.idrs)
    }
}

/// Cartesian product in head, afp, msda, idrs order with the last axis fastest.
pub fn grid(cfg: &RunConfig) -> Vec<GridPoint> {
    let mut out = Vec::new();
    for head in cfg.list("ablate.heads") {
        for afp in cfg.list("ablate.afp") {
            for msda in cfg.list("ablate.msda") {
                for idrs in cfg.list("ablate.idrs") {
                    out.push(GridPoint { head: head.clone(), afp: afp.clone(), msda: msda.clone(), idrs });
                }
            }
        }
    }
    out
}

/// Sets the grid axes for a named preset.
pub fn apply_preset(cfg: &mut RunConfig, preset: &str) -> Result<(), CliError> {
    let axes = match preset {
        "flag-grid" => [("ablate.heads", "edd,isd"), ("ablate.afp", "false,true"), ("ablate.msda", "false,true"), ("ablate.idrs", "8")],
        "idr-sweep" => [("ablate.heads", "isd"), ("ablate.afp", "true"), ("ablate.msda", "true"), ("ablate.idrs", IDR_SWEEP)],
        _ => return Err(CliError::Usage(format!("unknown preset {preset:?}; expected flag-grid or idr-sweep"))),
    };
    for (k, v) in axes {
        cfg.set(k, v)?;
    }
    Ok(())
}

pub struct AblationRow {
    pub point: GridPoint,
    pub summary: EvalSummary,
    pub final_loss: f64,
}

impl AblationRow {
    pub fn csv(&self) -> String {
        let EvalSummary::Depth(r) = &self.summary else { unreachable!("ablation runs are depth runs") };
        let p = &self.point;
        format!(
            "{},{},{},{},{},{},{},{}",
            p.head,
            p.afp,
            p.msda,
            p.idrs,
            fmt_sig(r.d1),
            fmt_sig(r.rms),
            fmt_sig(r.a_rel),
            fmt_sig(self.final_loss)
        )
    }
}

/// Trains and evaluates every grid point, writing `ablate.csv` and one run directory per point.
pub fn run_grid(cfg: &RunConfig, dir: &Path, log: &mut RunLog) -> Result<Vec<AblationRow>, CliError> {
    if cfg.get("model.output") != "depth" {
        return Err(CliError::Usage("ablation reports depth metrics; set model.output = depth".into()));
    }
    let points = grid(cfg);
    if points.is_empty() {
        return Err(CliError::Usage("empty ablation grid".into()));
    }
    fs::create_dir_all(dir)?;
    let mut rows = Vec::with_capacity(points.len());
    let mut csv = format!("{CSV_HEADER}\n");
    for (i, point) in points.into_iter().enumerate() {
        let mut c = cfg.clone();
        c.set("model.head", &point.head)?;
        c.set("model.use_afp", &point.afp)?;
        c.set("model.use_msda", &point.msda)?;
        c.set("model.n_idrs", &point.idrs)?;
        log.line(&format!("run {i} {}", point.label()))?;
        let outcome = run_training(&c, &dir.join(format!("{i:02}_{}", point.label())), log)?;
        let row = AblationRow { point, summary: outcome.test, final_loss: outcome.final_loss };
        csv.push_str(&row.csv());
        csv.push('\n');
        rows.push(row);
    }
    fs::write(dir.join("ablate.csv"), csv)?;
    Ok(rows)
}
