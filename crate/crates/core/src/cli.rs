//! The `mjp` command line.
//!
//! Every subcommand writes under `--out`. Failures print a single line
//! `error[<kind>]: <message>` on stderr and exit with
//! [`Error::exit_code`].

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::bench::{run_sweep, write_json};
use crate::config::{GridConfig, RunConfig, Setup};
use crate::data::{generate_dataset, list_scenes, read_dataset, read_frame, write_dataset};
use crate::error::{Error, Result};
use crate::predictor::{
    prepare_frames, score_cells, scores, topk_mask, train_stage1_task, train_stage2_consistency,
    train_stage3_joint, train_stage4_finetune, EpochLog, PredictorWeights, TrainFrame,
};
use crate::pruning::{prune_frame, write_pruned_frame};
use crate::taskproxy::TaskHead;
use crate::viz::render_sweep;
use crate::voxelgrid::MaskGrid;

pub const TASK_HEAD: &str = "task_head.json";
pub const PREDICTOR_CONS: &str = "predictor_cons.json";
pub const PREDICTOR: &str = "predictor.json";
pub const TASK_HEAD_JOINT: &str = "task_head_joint.json";
pub const TASK_HEAD_FINETUNED: &str = "task_head_finetuned.json";
pub const FINETUNE_SUMMARY: &str = "finetune.json";
pub const RUN_CONFIG: &str = "run_config.json";
pub const REPORT: &str = "report.json";
pub const TIMING: &str = "timing.json";
pub const SWEEP_PLOT: &str = "sweep.ppm";
pub const MASK_DIR: &str = "masks";
pub const PRUNED_DIR: &str = "pruned";

#[derive(Debug, Parser)]
#[command(name = "mjp", version, about = "Joint LiDAR and camera input pruning on synthetic BEV scenes")]
pub struct Cli {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Overrides the scene and training seeds.
    #[arg(long, global = true, env = "MJP_SEED")]
    pub seed: Option<u64>,

    /// Worker threads for per-frame work.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,

    /// Full-scale 1024x1024x80 grid under a 128x128x16 mask.
    #[arg(long, global = true)]
    pub paper_grid: bool,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    /// Occupancy head on unpruned features.
    Task,
    /// Predictor on the consistency loss.
    Cons,
    /// Predictor and head on the full objective.
    Joint,
    /// Head on top-k pruned features.
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Task => "task",
            Stage::Cons => "cons",
            Stage::Joint => "joint",
            Stage::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HeadChoice {
    Anchor,
    Joint,
    Finetuned,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenes into `--out`.
    Gen {
        #[arg(long, default_value_t = 50)]
        scenes: usize,
    },
    /// Run one training stage; each stage needs the previous one's artifacts in `--out`.
    Train {
        #[arg(long, value_enum)]
        stage: Stage,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Write one MJPM mask per scene to `<out>/masks`.
    Predict {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Directory holding predictor.json; defaults to `--out`.
        #[arg(long, value_name = "DIR")]
        model: Option<PathBuf>,
        /// Top-k drop ratio; without it cells are kept where the score reaches theta.
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Apply masks to the raw inputs and write pruned frames to `<out>/pruned`.
    Prune {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Mask directory; defaults to `<out>/masks`.
        #[arg(long, value_name = "DIR")]
        masks: Option<PathBuf>,
    },
    /// Mean IoU and cost at one ratio, written to `<out>/eval.json`.
    Eval {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        model: Option<PathBuf>,
        /// Defaults to the configured training ratio.
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long, value_enum, default_value = "anchor")]
        head: HeadChoice,
    },
    /// Ratio sweep with a random-mask baseline: `<out>/report.json` and `<out>/timing.json`.
    Bench {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        model: Option<PathBuf>,
    },
    /// Plot a sweep report to `<out>/sweep.ppm`.
    Viz {
        /// Defaults to `<out>/report.json`.
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
    },
}

/// Parses `args`, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return 2;
        }
    };
    match run(&cli) {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

/// Config file, then `--paper-grid`, then the seed override.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    if cli.paper_grid {
        cfg.grid = GridConfig::full_size();
    }
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<String> {
    if cli.jobs == 0 {
        return Err(Error::Usage("--jobs must be at least 1".into()));
    }
    let cfg = resolve_config(cli)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| Error::Usage(format!("cannot start {} worker threads: {e}", cli.jobs)))?;
    pool.install(|| dispatch(cli, &cfg))
}

fn dispatch(cli: &Cli, cfg: &RunConfig) -> Result<String> {
    let out = cli.out.as_path();
    match &cli.command {
        Command::Gen { scenes } => gen(cfg, *scenes, out),
        Command::Train { stage, data } => train(cfg, *stage, data, out),
        Command::Predict { data, model, ratio } => predict(cfg, data, model_dir(model, out), *ratio, out),
        Command::Prune { data, masks } => {
            let masks = masks.clone().unwrap_or_else(|| out.join(MASK_DIR));
            prune(cfg, data, &masks, out)
        }
        Command::Eval {
            data,
            model,
            ratio,
            head,
        } => eval(cfg, data, model_dir(model, out), ratio.unwrap_or(cfg.train.ratio), *head, out),
        Command::Bench { data, model } => bench(cfg, data, model_dir(model, out), out),
        Command::Viz { report } => {
            let report = report.clone().unwrap_or_else(|| out.join(REPORT));
            viz(&report, out)
        }
    }
}

fn model_dir<'a>(model: &'a Option<PathBuf>, out: &'a Path) -> &'a Path {
    model.as_deref().unwrap_or(out)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// `dir/name`, or a prerequisite error naming the step that produces it.
fn require(dir: &Path, name: &str, producer: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::Prerequisite(format!(
            "{} not found; run `{producer}` first",
            p.display()
        )))
    }
}

fn load_frames(cfg: &RunConfig, data: &Path) -> Result<(Setup, Vec<TrainFrame>)> {
    let setup = cfg.setup()?;
    let frames = read_dataset(data)?;
    let tf = prepare_frames(&setup, &frames)?;
    Ok((setup, tf))
}

fn write_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for l in logs {
        let line = serde_json::to_string(l).map_err(|e| Error::json(path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

fn gen(cfg: &RunConfig, scenes: usize, out: &Path) -> Result<String> {
    if scenes == 0 {
        return Err(Error::Usage("--scenes must be at least 1".into()));
    }
    let frames = generate_dataset(&cfg.scene, scenes)?;
    ensure_dir(out)?;
    for stale in list_scenes(out)?.into_iter().skip(scenes) {
        std::fs::remove_dir_all(&stale).map_err(|e| Error::io(&stale, e))?;
    }
    write_dataset(out, &frames)?;
    Ok(format!("wrote {scenes} scenes to {}", out.display()))
}

fn train(cfg: &RunConfig, stage: Stage, data: &Path, out: &Path) -> Result<String> {
    let tc = &cfg.train;
    let needs = |name: &str, producer: Stage| require(out, name, &format!("mjp train --stage {}", producer.name()));
    // prerequisites first, so a missing artifact fails before any data is read
    let inputs: Vec<PathBuf> = match stage {
        Stage::Task => vec![],
        Stage::Cons => vec![needs(TASK_HEAD, Stage::Task)?],
        Stage::Joint => vec![needs(TASK_HEAD, Stage::Task)?, needs(PREDICTOR_CONS, Stage::Cons)?],
        Stage::Finetune => vec![
            needs(TASK_HEAD, Stage::Task)?,
            needs(PREDICTOR, Stage::Joint)?,
            needs(TASK_HEAD_JOINT, Stage::Joint)?,
        ],
    };
    let (setup, frames) = load_frames(cfg, data)?;
    ensure_dir(out)?;
    cfg.write(out.join(RUN_CONFIG))?;
    let log_path = out.join(format!("train_{}.jsonl", stage.name()));
    let (logs, summary) = match stage {
        Stage::Task => {
            let (head, logs) = train_stage1_task(&frames, tc)?;
            head.write(out.join(TASK_HEAD))?;
            (logs, format!("stage task: head -> {}", out.join(TASK_HEAD).display()))
        }
        Stage::Cons => {
            TaskHead::read(&inputs[0])?;
            let (w, logs) = train_stage2_consistency(&frames, tc)?;
            w.write(out.join(PREDICTOR_CONS))?;
            (logs, format!("stage cons: predictor -> {}", out.join(PREDICTOR_CONS).display()))
        }
        Stage::Joint => {
            let anchor = TaskHead::read(&inputs[0])?;
            let w0 = PredictorWeights::read(&inputs[1])?;
            let (w, head, logs) = train_stage3_joint(&frames, &w0, &anchor, tc)?;
            w.write(out.join(PREDICTOR))?;
            head.write(out.join(TASK_HEAD_JOINT))?;
            (logs, format!("stage joint: predictor -> {}", out.join(PREDICTOR).display()))
        }
        Stage::Finetune => {
            let anchor = TaskHead::read(&inputs[0])?;
            let w = PredictorWeights::read(&inputs[1])?;
            let head0 = TaskHead::read(&inputs[2])?;
            let (head, summary, logs) = train_stage4_finetune(&setup, &frames, &w, &head0, &anchor, tc)?;
            head.write(out.join(TASK_HEAD_FINETUNED))?;
            write_json(&summary, out.join(FINETUNE_SUMMARY))?;
            (
                logs,
                format!(
                    "stage finetune: IoU {:.4} -> {:.4} at ratio {}",
                    summary.p_before, summary.p_after, summary.ratio
                ),
            )
        }
    };
    write_log(&log_path, &logs)?;
    Ok(summary)
}

fn predict(cfg: &RunConfig, data: &Path, model: &Path, ratio: Option<f64>, out: &Path) -> Result<String> {
    let w = PredictorWeights::read(require(model, PREDICTOR, "mjp train --stage joint")?)?;
    if let Some(r) = ratio {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::Usage(format!("--ratio {r} is outside [0, 1]")));
        }
    }
    let setup = cfg.setup()?;
    let scenes = list_scenes(data)?;
    if scenes.is_empty() {
        return Err(Error::Prerequisite(format!("no scene_* directories under {}", data.display())));
    }
    let dir = out.join(MASK_DIR);
    ensure_dir(&dir)?;
    let mut zero = 0.0;
    for scene in &scenes {
        let frame = read_frame(scene)?;
        let feats = setup.cell_features(&frame)?;
        let mask = match ratio {
            Some(r) => topk_mask(feats.dims, &scores(&w, &feats), r, w.theta)?,
            None => score_cells(&w, &feats)?,
        };
        zero += mask.zero_fraction();
        mask.write(dir.join(mask_name(scene)))?;
    }
    Ok(format!(
        "wrote {} masks to {} (mean zero fraction {:.4})",
        scenes.len(),
        dir.display(),
        zero / scenes.len() as f64
    ))
}

fn mask_name(scene: &Path) -> String {
    let stem = scene.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    format!("{stem}.mjpm")
}

fn prune(cfg: &RunConfig, data: &Path, masks: &Path, out: &Path) -> Result<String> {
    let setup = cfg.setup()?;
    let scenes = list_scenes(data)?;
    if scenes.is_empty() {
        return Err(Error::Prerequisite(format!("no scene_* directories under {}", data.display())));
    }
    let mut kept_points = 0usize;
    let mut points = 0usize;
    for scene in &scenes {
        let mask_path = require(masks, &mask_name(scene), "mjp predict")?;
        let mask = MaskGrid::read(&mask_path)?;
        let frame = read_frame(scene)?;
        setup.check_frame(&frame)?;
        let outcome = prune_frame(&frame, &mask, &setup.spec, &setup.bm, &setup.fp)?;
        kept_points += outcome.kept_point_indices.len();
        points += outcome.total_points;
        let name = scene.file_name().unwrap_or_default();
        write_pruned_frame(&outcome, &frame, &mask, out.join(PRUNED_DIR).join(name))?;
    }
    Ok(format!(
        "pruned {} scenes into {}: kept {kept_points} of {points} points",
        scenes.len(),
        out.join(PRUNED_DIR).display()
    ))
}

fn eval(cfg: &RunConfig, data: &Path, model: &Path, ratio: f64, head: HeadChoice, out: &Path) -> Result<String> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Usage(format!("--ratio {ratio} is outside [0, 1]")));
    }
    let w = PredictorWeights::read(require(model, PREDICTOR, "mjp train --stage joint")?)?;
    let anchor = TaskHead::read(require(model, TASK_HEAD, "mjp train --stage task")?)?;
    let chosen = match head {
        HeadChoice::Anchor => None,
        HeadChoice::Joint => Some(TaskHead::read(require(model, TASK_HEAD_JOINT, "mjp train --stage joint")?)?),
        HeadChoice::Finetuned => Some(TaskHead::read(require(
            model,
            TASK_HEAD_FINETUNED,
            "mjp train --stage finetune",
        )?)?),
    };
    let (setup, frames) = load_frames(cfg, data)?;
    let (report, _) = run_sweep(&setup, &frames, &[ratio], &w, &anchor, chosen.as_ref(), &cfg.train)?;
    let row = &report.rows[0];
    let p = row.performance_finetuned.unwrap_or(row.performance);
    let result = serde_json::json!({
        "anchor_performance": report.anchor_performance,
        "cost_reduction": row.cost_reduction,
        "frames": report.frames,
        "head": format!("{head:?}").to_lowercase(),
        "performance": p,
        "random_performance": row.random_performance,
        "ratio": ratio,
        "zero_fraction": row.zero_fraction,
    });
    ensure_dir(out)?;
    write_json(&result, out.join("eval.json"))?;
    Ok(format!(
        "ratio {ratio}: IoU {p:.4} (anchor {:.4}), backbone cost -{:.1}%",
        report.anchor_performance,
        100.0 * row.cost_reduction
    ))
}

fn bench(cfg: &RunConfig, data: &Path, model: &Path, out: &Path) -> Result<String> {
    let w = PredictorWeights::read(require(model, PREDICTOR, "mjp train --stage joint")?)?;
    let anchor = TaskHead::read(require(model, TASK_HEAD, "mjp train --stage task")?)?;
    let finetuned = require(model, TASK_HEAD_FINETUNED, "mjp train --stage finetune")?;
    let finetuned = TaskHead::read(finetuned)?;
    let (setup, frames) = load_frames(cfg, data)?;
    let (report, timing) = run_sweep(
        &setup,
        &frames,
        &cfg.bench.ratios,
        &w,
        &anchor,
        Some(&finetuned),
        &cfg.train,
    )?;
    ensure_dir(out)?;
    report.write(out.join(REPORT))?;
    write_json(&timing, out.join(TIMING))?;
    let half = report.row(0.5).map(|r| format!(", r=0.5: IoU {:.4}, cost -{:.1}%", r.performance, 100.0 * r.cost_reduction));
    Ok(format!(
        "swept {} ratios over {} frames (anchor IoU {:.4}{}) -> {}",
        report.rows.len(),
        report.frames,
        report.anchor_performance,
        half.unwrap_or_default(),
        out.join(REPORT).display()
    ))
}

fn viz(report: &Path, out: &Path) -> Result<String> {
    if !report.is_file() {
        return Err(Error::Prerequisite(format!("{} not found; run `mjp bench` first", report.display())));
    }
    let report = crate::bench::SweepReport::read(report)?;
    ensure_dir(out)?;
    let path = out.join(SWEEP_PLOT);
    render_sweep(&report).write_ppm(&path)?;
    Ok(format!("plot -> {}", path.display()))
}
