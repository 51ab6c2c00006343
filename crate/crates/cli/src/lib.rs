//! Command-line front end for the `idsc` library.

pub mod ablate;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod train;

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::eval::RasterPair;
use crate::gradcheck::Block;

/// Environment variable naming the root under which each command writes its outputs.
pub const OUT_ENV: &str = "IDSC_OUT_DIR";
pub const DEFAULT_OUT: &str = "idsc-out";

/// Append-only `run.log` in a command's output directory, mirrored to stderr.
pub struct RunLog {
    file: File,
    quiet: bool,
}

impl RunLog {
    /// Creates the log and writes the command name followed by every effective config value.
    pub fn create(dir: &Path, command: &str, cfg: &RunConfig, quiet: bool) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        let mut log = Self { file: File::create(dir.join("run.log"))?, quiet };
        writeln!(log.file, "# command {command}")?;
        log.file.write_all(cfg.echo().as_bytes())?;
        Ok(log)
    }

    pub fn line(&mut self, msg: &str) -> Result<(), CliError> {
        writeln!(self.file, "{msg}")?;
        if !self.quiet {
            eprintln!("{msg}");
        }
        Ok(())
    }
}

#[derive(Parser, Debug)]
#[command(name = "idsc", version, about = "Internal-discretization depth models at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (default: $IDSC_OUT_DIR/<command> or ./idsc-out/<command>).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write progress to run.log only.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on synthetic scenes and evaluate on a held-out set.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        idrs: Option<usize>,
    },
    /// Evaluate raster pairs, a directory of pairs, or a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        pred: Vec<PathBuf>,
        #[arg(long)]
        gt: Vec<PathBuf>,
        /// Directory of `<stem>.pred.idsc` / `<stem>.gt.idsc` pairs.
        #[arg(long)]
        dir: Option<PathBuf>,
        /// Maximum valid ground-truth depth.
        #[arg(long)]
        cap: Option<f64>,
        /// Evaluation window `x,y,width,height`.
        #[arg(long)]
        crop: Option<String>,
    },
    /// Train and evaluate every point of a configuration grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// `flag-grid` (head × afp × msda) or `idr-sweep` (2..128 representations).
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Compare analytic and central-difference gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// afp, isd, edd, silog, model or all.
        #[arg(long, default_value = "all")]
        block: String,
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Write synthetic image, depth and normal rasters.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Select frames from a pose log into train and test manifests.
    Split {
        #[command(flatten)]
        common: Common,
        /// Tab-separated pose log: scene, camera, timestamp, x, y, z, occlusion.
        #[arg(long)]
        records: PathBuf,
        /// Comma-separated test scene ids; every other scene goes to train.
        #[arg(long, default_value = "")]
        test_scenes: String,
        #[arg(long)]
        train_thresh: Option<f64>,
        #[arg(long)]
        test_thresh: Option<f64>,
        #[arg(long)]
        max_occlusion: Option<f64>,
        #[arg(long)]
        top_crop: Option<u32>,
        #[arg(long)]
        shared_gate: bool,
    },
}

/// Defaults, then the config file, then `--set` pairs, then explicit flags.
fn resolve(common: &Common, base: RunConfig, flags: &[(&str, Option<String>)]) -> Result<RunConfig, CliError> {
    let mut cfg = base;
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for pair in &common.set {
        cfg.assign(pair)?;
    }
    if let Some(seed) = common.seed {
        cfg.set("run.seed", &seed.to_string())?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    Ok(cfg)
}

fn out_dir(common: &Common, command: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| {
        std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)).join(command)
    })
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train { common, steps, lr, idrs } => {
            let flags = [
                ("train.steps", steps.map(|v| v.to_string())),
                ("train.lr", lr.map(|v| v.to_string())),
                ("model.n_idrs", idrs.map(|v| v.to_string())),
            ];
            let cfg = resolve(&common, RunConfig::default(), &flags)?;
            let dir = out_dir(&common, "train");
            let mut log = RunLog::create(&dir, "train", &cfg, common.quiet)?;
            let outcome = train::run_training(&cfg, &dir, &mut log)?;
            println!("{}", outcome.test.record("aggregate"));
            Ok(())
        }
        Command::Eval { common, checkpoint, pred, gt, dir, cap, crop } => {
            let flags = [("eval.cap", cap.map(|v| v.to_string())), ("eval.crop", crop)];
            let cfg = resolve(&common, RunConfig::default(), &flags)?;
            let (cap, crop) = (cfg.opt_real("eval.cap"), cfg.eval_crop());
            let sources = usize::from(checkpoint.is_some()) + usize::from(dir.is_some()) + usize::from(!pred.is_empty() || !gt.is_empty());
            if sources != 1 {
                return Err(CliError::Usage("give exactly one of --checkpoint, --dir or --pred/--gt pairs".into()));
            }
            let out = out_dir(&common, "eval");
            let mut log = RunLog::create(&out, "eval", &cfg, common.quiet)?;
            let (per, agg) = if let Some(ckpt) = checkpoint {
                eval::evaluate_checkpoint(&cfg, &ckpt, cap, crop)?
            } else {
                let pairs = match dir {
                    Some(d) => eval::pairs_in_dir(&d)?,
                    None => {
                        if pred.len() != gt.len() {
                            return Err(CliError::Usage(format!("{} --pred files but {} --gt files", pred.len(), gt.len())));
                        }
                        pred.into_iter()
                            .zip(gt)
                            .enumerate()
                            .map(|(i, (p, g))| RasterPair { label: format!("pair{i:03}"), pred: p, gt: g })
                            .collect()
                    }
                };
                eval::evaluate_pairs(&pairs, cap, crop)?
            };
            let text = eval::report_text(&per, &agg);
            fs::write(out.join("report.txt"), &text)?;
            log.line(&agg.record("aggregate"))?;
            print!("{text}");
            Ok(())
        }
        Command::Ablate { common, preset, steps } => {
            let mut base = RunConfig::default();
            if let Some(p) = &preset {
                ablate::apply_preset(&mut base, p)?;
            }
            let cfg = resolve(&common, base, &[("train.steps", steps.map(|v| v.to_string()))])?;
            let dir = out_dir(&common, "ablate");
            let mut log = RunLog::create(&dir, "ablate", &cfg, common.quiet)?;
            let rows = ablate::run_grid(&cfg, &dir, &mut log)?;
            println!("{}", ablate::CSV_HEADER);
            for r in &rows {
                println!("{}", r.csv());
            }
            Ok(())
        }
        Command::Gradcheck { common, block, corrupt } => {
            let blocks = Block::parse(&block).ok_or_else(|| CliError::Usage(format!("unknown block {block:?}")))?;
            let cfg = resolve(&common, RunConfig::miniature(), &[])?;
            let dir = out_dir(&common, "gradcheck");
            let mut log = RunLog::create(&dir, "gradcheck", &cfg, common.quiet)?;
            let results = gradcheck::run_suites(&cfg, &blocks, corrupt)?;
            let mut failed = Vec::new();
            for r in &results {
                println!("{}", r.line());
                log.line(&r.line())?;
                if !r.passed {
                    failed.push(r.block.to_string());
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::SuiteFailed(format!("gradient check failed for {}", failed.join(", "))))
            }
        }
        Command::Synth { common, count } => {
            let cfg = resolve(&common, RunConfig::default(), &[("data.train_scenes", count.map(|v| v.to_string()))])?;
            let dir = out_dir(&common, "synth");
            let mut log = RunLog::create(&dir, "synth", &cfg, common.quiet)?;
            let m = cfg.model();
            let scenes = idsc::data::gen_synthetic(cfg.u64("run.seed"), cfg.int("data.train_scenes"), m.height, m.width, m.depth_range)?;
            for (i, s) in scenes.iter().enumerate() {
                idsc::data::write_raster(&s.image, dir.join(format!("scene{i:03}.image.idsc")))?;
                idsc::data::write_raster(&s.depth, dir.join(format!("scene{i:03}.depth.idsc")))?;
                idsc::data::write_raster(&s.normals, dir.join(format!("scene{i:03}.normals.idsc")))?;
            }
            log.line(&format!("wrote {} scenes", scenes.len()))?;
            Ok(())
        }
        Command::Split { common, records, test_scenes, train_thresh, test_thresh, max_occlusion, top_crop, shared_gate } => {
            let flags = [
                ("split.train_thresh", train_thresh.map(|v| v.to_string())),
                ("split.test_thresh", test_thresh.map(|v| v.to_string())),
                ("split.max_occlusion", max_occlusion.map(|v| v.to_string())),
                ("split.top_crop", top_crop.map(|v| v.to_string())),
                ("split.shared_gate", shared_gate.then(|| "true".to_string())),
            ];
            let cfg = resolve(&common, RunConfig::default(), &flags)?;
            let dir = out_dir(&common, "split");
            let mut log = RunLog::create(&dir, "split", &cfg, common.quiet)?;
            let text = fs::read_to_string(&records)?;
            let frames = idsc::data::parse_pose_log(&text)?;
            let test: Vec<&str> = test_scenes.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            let mut scenes: Vec<&str> = frames.iter().map(|f| f.scene_id.as_str()).collect();
            scenes.dedup();
            let train: Vec<&str> = scenes.iter().copied().filter(|s| !test.contains(s)).collect();
            let partition = idsc::data::ScenePartition::new(train, test.iter().copied().filter(|s| scenes.contains(s)));
            let spec = cfg.split_spec();
            let split = idsc::data::make_split(&frames, &spec, &partition)?;
            fs::write(dir.join("train.txt"), idsc::data::write_manifest(&split.train, &spec))?;
            fs::write(dir.join("test.txt"), idsc::data::write_manifest(&split.test, &spec))?;
            log.line(&format!("train {} frames, test {} frames", split.train.len(), split.test.len()))?;
            Ok(())
        }
    }
}
