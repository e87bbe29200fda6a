use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, ValueEnum};
use endovid_core::check::{gradcheck_suite, Fault, SuiteOptions};
use endovid_core::data::{
    clip_ranges, generate_synthetic_dataset, load_checkpoint, load_dataset, load_frame_sequence, save_clip,
    save_manifest, Manifest, VideoClip, MANIFEST_FILE,
};
use endovid_core::distill::{pretrain_run, read_metrics, MetricsRow, RunOptions, METRICS_FILE};
use endovid_core::model::VideoTransformer;
use endovid_core::probe::{linear_probe, ProbeReport};
use endovid_core::tensor::{GradCheckOptions, ParamStore};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{resolve_seed, ConfigArgs, Preset, RunConfig};
use crate::{CliError, Command};

pub const RUN_INFO_FILE: &str = "run_info.json";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    WrongBackward,
    NonFinite,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BackboneArg {
    Teacher,
    Student,
}

#[derive(Clone, Debug, Args)]
pub struct MakeDataArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset directory to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty directory.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub count: Option<usize>,
    /// Frame side in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub square: Option<usize>,
    /// Speed of the slowest class in pixels per frame.
    #[arg(long)]
    pub speed: Option<f64>,
    #[arg(long)]
    pub fps: Option<f64>,
    /// Slice the frame sequence in this directory instead of generating.
    #[arg(long)]
    pub slice_from: Option<PathBuf>,
    /// Clip duration when slicing.
    #[arg(long, default_value_t = 5.0)]
    pub seconds: f64,
    /// Label attached to every sliced clip.
    #[arg(long)]
    pub label: Option<usize>,
}

/// Fixed schema of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub rows: usize,
    pub first_step: u64,
    pub last_step: u64,
    pub window: usize,
    pub first_window_loss: f64,
    pub last_window_loss: f64,
    pub loss_decreased: bool,
    pub min_teacher_entropy: f64,
    pub max_teacher_entropy: f64,
    pub final_teacher_entropy: f64,
    pub final_lr: f64,
    pub all_finite: bool,
    pub wall_clock_seconds: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunInfo {
    pub seed: u64,
    pub steps: u64,
    pub wall_clock_seconds: f64,
    pub final_checkpoint: PathBuf,
}

pub fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Pretrain { config, train, resume } => {
            let mut cfg = config.resolve(Preset::Desk)?;
            train.apply(&mut cfg);
            pretrain(&cfg, resume)
        }
        Command::Gradcheck {
            config,
            coords,
            step,
            tolerance,
            inject_fault,
        } => {
            let cfg = config.resolve(Preset::Tiny)?;
            gradcheck(&cfg, coords, step, tolerance, inject_fault)
        }
        Command::Probe {
            config,
            data,
            checkpoint,
            random_init,
            backbone,
            unfreeze,
            epochs,
            frames,
            report,
        } => {
            let mut cfg = config.resolve(Preset::Desk)?;
            if let Some(d) = data {
                cfg.data.root = Some(d);
            }
            cfg.probe.unfreeze |= unfreeze;
            if let Some(e) = epochs {
                cfg.probe.epochs = e;
            }
            if let Some(f) = frames {
                cfg.probe.frames = f;
            }
            let source = match (checkpoint, random_init) {
                (Some(p), _) => Backbone::Checkpoint(p, backbone),
                (None, true) => Backbone::Random,
                (None, false) => return Err(CliError::Usage("need --checkpoint or --random-init".into())),
            };
            let r = probe(&cfg, &source)?;
            let json = serde_json::to_string_pretty(&r).expect("report serialises");
            println!("{json}");
            if let Some(p) = report {
                fs::write(&p, json + "\n").map_err(|e| io_error(&p, e))?;
            }
            Ok(())
        }
        Command::MakeData(args) => make_data(&args),
        Command::ExportMetrics { run, window } => {
            let s = export_metrics(&run, window)?;
            println!("{}", serde_json::to_string_pretty(&s).expect("summary serialises"));
            Ok(())
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(endovid_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn data_root(cfg: &RunConfig) -> Result<&Path, CliError> {
    cfg.data
        .root
        .as_deref()
        .ok_or_else(|| CliError::Config {
            field: "data.root".into(),
            reason: "no dataset directory given (use --data or data.root)".into(),
        })
}

pub fn pretrain(cfg: &RunConfig, resume: Option<PathBuf>) -> Result<(), CliError> {
    cfg.validate()?;
    let root = data_root(cfg)?;
    let started = Instant::now();
    let (manifest, clips) = load_dataset(root)?;
    log::info!("loaded {} clips from {}", clips.len(), root.display());
    let out = &cfg.run.out_dir;
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    cfg.write_snapshot(out)?;
    let opts = RunOptions {
        out_dir: out.clone(),
        resume,
    };
    let summary = pretrain_run(&clips, &cfg.model, &cfg.views, &cfg.distill, cfg.seed(), &opts, |_| {})?;
    let info = RunInfo {
        seed: cfg.seed(),
        steps: summary.steps,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        final_checkpoint: summary.final_checkpoint.clone(),
    };
    let p = out.join(RUN_INFO_FILE);
    fs::write(&p, serde_json::to_string_pretty(&info).expect("info serialises") + "\n").map_err(|e| io_error(&p, e))?;
    println!(
        "pre-trained {} steps on `{}` ({} clips); checkpoint {}",
        summary.steps,
        manifest.dataset,
        clips.len(),
        summary.final_checkpoint.display()
    );
    Ok(())
}

pub fn gradcheck(
    cfg: &RunConfig,
    coords: usize,
    step: f64,
    tolerance: f64,
    inject: Option<FaultArg>,
) -> Result<(), CliError> {
    cfg.validate()?;
    let opts = SuiteOptions {
        model: cfg.model.clone(),
        views: cfg.views.clone(),
        distill: cfg.distill.clone(),
        seed: cfg.seed(),
        check: GradCheckOptions {
            step,
            coords_per_tensor: coords,
            seed: cfg.seed(),
        },
        tolerance,
        inject: inject.map(|f| match f {
            FaultArg::WrongBackward => Fault::WrongBackward,
            FaultArg::NonFinite => Fault::NonFinite,
        }),
    };
    let items = gradcheck_suite(&opts, |it| {
        let detail = match (&it.report.failure, &it.report.worst) {
            (Some(f), _) => format!("  ({f})"),
            (None, Some(w)) if !it.passed => format!("  (worst `{}`[{}])", w.param, w.index),
            _ => String::new(),
        };
        println!(
            "{:<24} max_rel_err {:.3e}  coords {:>4}  {}{}",
            it.name,
            it.report.max_rel_error,
            it.report.checked,
            if it.passed { "PASS" } else { "FAIL" },
            detail
        );
    })?;
    let failed: Vec<&str> = items.iter().filter(|i| !i.passed).map(|i| i.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks below {tolerance:e}", items.len());
        Ok(())
    } else {
        Err(CliError::Failed(format!("gradient check failed: {}", failed.join(", "))))
    }
}

pub enum Backbone {
    Checkpoint(PathBuf, BackboneArg),
    Random,
}

pub fn probe(cfg: &RunConfig, source: &Backbone) -> Result<ProbeReport, CliError> {
    let root = data_root(cfg)?;
    let (_, clips) = load_dataset(root)?;
    let (model_cfg, params) = match source {
        Backbone::Checkpoint(path, which) => {
            let ckpt = load_checkpoint(path)?;
            let prefix = match which {
                BackboneArg::Teacher => "teacher",
                BackboneArg::Student => "student",
            };
            let mut p = ParamStore::new();
            for (name, t) in ckpt.group(prefix) {
                p.insert(name, t);
            }
            if p.is_empty() {
                return Err(CliError::Runtime(endovid_core::Error::Contract(format!(
                    "checkpoint {} holds no `{prefix}` parameters",
                    path.display()
                ))));
            }
            (ckpt.model, p)
        }
        Backbone::Random => {
            cfg.model.validate()?;
            let model = VideoTransformer::new(cfg.model.clone())?;
            let p = model.init_params(&mut rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed()));
            (cfg.model.clone(), p)
        }
    };
    let model = VideoTransformer::new(model_cfg)?;
    let mut probe_cfg = cfg.probe.clone();
    probe_cfg.seed = cfg.seed();
    if probe_cfg.size == 0 {
        probe_cfg.size = cfg.views.global_size;
    }
    Ok(linear_probe(&model, &params, &clips, &probe_cfg)?)
}

fn dir_is_non_empty(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

pub fn make_data(args: &MakeDataArgs) -> Result<(), CliError> {
    if dir_is_non_empty(&args.out) && !args.force {
        return Err(CliError::Usage(format!(
            "{} is not empty; pass --force to write into it",
            args.out.display()
        )));
    }
    let cfg = args.config.resolve(Preset::Desk)?;
    fs::create_dir_all(&args.out).map_err(|e| io_error(&args.out, e))?;
    let seed = resolve_seed(args.config.seed, cfg.run.seed)?;

    let manifest = match &args.slice_from {
        Some(src) => {
            let fps = args.fps.unwrap_or(cfg.data.synthetic.fps);
            let video = load_frame_sequence(src)?;
            let ranges = clip_ranges(video.len(), fps, args.seconds)?;
            let name = src.file_name().and_then(|n| n.to_str()).unwrap_or("video");
            let mut entries = Vec::new();
            for (i, r) in ranges.into_iter().enumerate() {
                let frames = video.select(&r.collect::<Vec<_>>())?;
                let clip = VideoClip::new(format!("{name}_clip_{i:04}"), fps, args.label, frames)?;
                entries.push(save_clip(&args.out, &clip)?);
            }
            Manifest {
                dataset: name.to_string(),
                seed,
                clips: entries,
            }
        }
        None => {
            let mut spec = cfg.data.synthetic.clone();
            spec.seed = seed;
            macro_rules! set {
                ($field:ident, $arg:expr) => {
                    if let Some(v) = $arg {
                        spec.$field = v;
                    }
                };
            }
            set!(count, args.count);
            set!(size, args.size);
            set!(frames, args.frames);
            set!(classes, args.classes);
            set!(square, args.square);
            set!(base_speed, args.speed);
            set!(fps, args.fps);
            let (manifest, clips) = generate_synthetic_dataset(&spec)?;
            for c in &clips {
                save_clip(&args.out, c)?;
            }
            manifest
        }
    };
    let path = save_manifest(&args.out, &manifest)?;
    let bytes = fs::read(&path).map_err(|e| io_error(&path, e))?;
    let hash: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    let hist = manifest.class_histogram();
    let hist: BTreeMap<String, usize> = hist.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    println!("dataset `{}`: {} clips", manifest.dataset, manifest.clips.len());
    println!("classes: {}", serde_json::to_string(&hist).expect("histogram serialises"));
    println!("{MANIFEST_FILE} sha256 {hash}");
    Ok(())
}

fn window_mean(rows: &[MetricsRow]) -> f64 {
    rows.iter().map(|r| r.loss_total).sum::<f64>() / rows.len() as f64
}

pub fn summarize(rows: &[MetricsRow], window: usize) -> Result<MetricsSummary, CliError> {
    if rows.is_empty() {
        return Err(CliError::Failed("metrics file has no rows".into()));
    }
    if window == 0 {
        return Err(CliError::Usage("--window must be positive".into()));
    }
    let w = window.min(rows.len());
    let first = window_mean(&rows[..w]);
    let last = window_mean(&rows[rows.len() - w..]);
    let ent = rows.iter().map(|r| r.teacher_entropy);
    let tail = rows.last().expect("non-empty");
    Ok(MetricsSummary {
        rows: rows.len(),
        first_step: rows[0].step,
        last_step: tail.step,
        window: w,
        first_window_loss: first,
        last_window_loss: last,
        loss_decreased: last < first,
        min_teacher_entropy: ent.clone().fold(f64::INFINITY, f64::min),
        max_teacher_entropy: ent.fold(f64::NEG_INFINITY, f64::max),
        final_teacher_entropy: tail.teacher_entropy,
        final_lr: tail.lr,
        all_finite: rows
            .iter()
            .all(|r| [r.loss_cv, r.loss_dm, r.loss_total, r.teacher_entropy, r.lr].iter().all(|v| v.is_finite())),
        wall_clock_seconds: None,
    })
}

pub fn export_metrics(run: &Path, window: usize) -> Result<MetricsSummary, CliError> {
    let csv = run.join(METRICS_FILE);
    if !csv.is_file() {
        return Err(CliError::Failed(format!("{} does not exist", csv.display())));
    }
    let rows = read_metrics(&csv)?;
    let mut s = summarize(&rows, window)?;
    let info = run.join(RUN_INFO_FILE);
    if let Ok(text) = fs::read_to_string(&info) {
        if let Ok(i) = serde_json::from_str::<RunInfo>(&text) {
            s.wall_clock_seconds = Some(i.wall_clock_seconds);
        }
    }
    let out = run.join(SUMMARY_FILE);
    fs::write(&out, serde_json::to_string_pretty(&s).expect("summary serialises") + "\n").map_err(|e| io_error(&out, e))?;
    Ok(s)
}
