//! `trunkshare` subcommands: `synth`, `train`, `eval` and `bench`.
//!
//! Exit codes: 0 ok, 2 configuration or contract error, 3 I/O or malformed file,
//! 4 numeric divergence.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;
use trunkshare_core::bench::{fmt3, run_bench, Loaded};
use trunkshare_core::config::RunConfig;
use trunkshare_core::data::{Dataset, Split, TaskAvail};
use trunkshare_core::det::detections_to_csv;
use trunkshare_core::imageio::{palette_color, RgbImage};
use trunkshare_core::model::{Model, TaskMode};
use trunkshare_core::params::ParamStore;
use trunkshare_core::train::{evaluate, train, TrainOutputs};
use trunkshare_core::CoreError;
use trunkshare_tensor::TensorError;

pub const THREADS_ENV: &str = "TRUNKSHARE_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Core(e) => match e {
                CoreError::Io(_) | CoreError::Format { .. } => 3,
                CoreError::Tensor(TensorError::Io(_)) | CoreError::Tensor(TensorError::Format(_)) => 3,
                CoreError::Divergence { .. } | CoreError::Tensor(TensorError::NonFinite(_)) => 4,
                _ => 2,
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Core(CoreError::Io(e))
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(name = "trunkshare", version, about = "Shared-trunk detection and segmentation toolkit")]
pub struct Cli {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Run seed (overrides `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a multitask or single-task model.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset and optionally render samples.
    Eval(EvalArgs),
    /// Compare Base / FCN / SSD / Multitask / Naive deployments.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub count: Option<usize>,
    /// both | det-only | seg-only
    #[arg(long)]
    pub task: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// multi | det | seg
    #[arg(long, default_value = "multi")]
    pub mode: String,
    /// Checkpoint(s) whose `trunk` and matching head namespaces seed the model.
    #[arg(long = "warm-start")]
    pub warm_start: Vec<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long = "lambda-det")]
    pub lambda_det: Option<f64>,
    #[arg(long = "lambda-seg")]
    pub lambda_seg: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Number of side-by-side prediction / ground-truth renders to write.
    #[arg(long, default_value_t = 0)]
    pub render: usize,
    /// val | train | all
    #[arg(long, default_value = "val")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// One multitask, one detection and one segmentation checkpoint, in any order.
    #[arg(long, num_args = 1.., required = true)]
    pub models: Vec<PathBuf>,
    /// Leave time cells empty so the report is a pure function of the models.
    #[arg(long = "no-timing")]
    pub no_timing: bool,
}

/// Parses `TRUNKSHARE_THREADS` (default 1).
pub fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

/// Loads the config and applies global overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Runs one command inside a rayon pool sized by `TRUNKSHARE_THREADS` and returns
/// the text to print on success.
pub fn run(cli: Cli) -> Result<String> {
    let threads = thread_count()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cli))
}

fn dispatch(cli: Cli) -> Result<String> {
    let mut cfg = resolve_config(&cli)?;
    match cli.command {
        Command::Synth(args) => {
            if let Some(count) = args.count {
                cfg.data.count = count;
            }
            if let Some(task) = &args.task {
                cfg.data.task = task.parse::<TaskAvail>()?;
            }
            cfg.validate()?;
            cmd_synth(&cfg)
        }
        Command::Train(args) => {
            if let Some(steps) = args.steps {
                cfg.train.steps = steps;
            }
            if let Some(l) = args.lambda_det {
                cfg.train.loss_weights.det = l;
            }
            if let Some(l) = args.lambda_seg {
                cfg.train.loss_weights.seg = l;
            }
            cfg.validate()?;
            let mode = args.mode.parse::<TaskMode>()?;
            cmd_train(&cfg, &args.dataset, mode, &args.warm_start)
        }
        Command::Eval(args) => {
            cfg.validate()?;
            cmd_eval(&cfg, &args)
        }
        Command::Bench(args) => {
            if args.no_timing {
                cfg.bench.timing = false;
            }
            cfg.validate()?;
            cmd_bench(&cfg, &args.models)
        }
    }
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<String> {
    let out = &cfg.out_dir;
    let data = Dataset::generate(&cfg.scene, cfg.data.count, cfg.seed, cfg.data.task, cfg.data.val_fraction)?;
    data.save(out)?;
    cfg.write_resolved(out)?;
    Ok(format!("wrote {} scenes to {}", data.len(), out.display()))
}

fn load_dataset_for(cfg: &RunConfig, dir: &Path) -> Result<Dataset> {
    let data = Dataset::load(dir)?;
    if data.spec.image_size != cfg.scene.image_size || data.spec.num_classes != cfg.scene.num_classes {
        return Err(CliError::Usage(format!(
            "dataset {} has {} px scenes with {} classes; the configuration expects {} px and {}",
            dir.display(),
            data.spec.image_size,
            data.spec.num_classes,
            cfg.scene.image_size,
            cfg.scene.num_classes
        )));
    }
    Ok(data)
}

/// Task mode implied by the namespaces present in a checkpoint.
pub fn mode_of(params: &ParamStore) -> Result<TaskMode> {
    match (params.has_namespace("det"), params.has_namespace("seg")) {
        (true, true) => Ok(TaskMode::Multi),
        (true, false) => Ok(TaskMode::Det),
        (false, true) => Ok(TaskMode::Seg),
        (false, false) => Err(CliError::Usage("checkpoint holds no task head".into())),
    }
}

/// Loads a checkpoint and the model it belongs to under `cfg`.
pub fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<(Model, ParamStore)> {
    let params = ParamStore::load(path)?;
    let model = Model::new(cfg.model.clone(), mode_of(&params)?)?;
    model
        .check_params(&params)
        .map_err(|e| CliError::Usage(format!("{} does not fit the configured model: {e}", path.display())))?;
    Ok((model, params))
}

pub fn cmd_train(cfg: &RunConfig, dataset: &Path, mode: TaskMode, warm: &[PathBuf]) -> Result<String> {
    let data = load_dataset_for(cfg, dataset)?;
    if mode.has_det() && !data.has_det() {
        return Err(CliError::Usage(format!(
            "mode {} needs detection annotations; the dataset has none",
            mode.as_str()
        )));
    }
    if mode.has_seg() && !data.has_seg() {
        return Err(CliError::Usage(format!(
            "mode {} needs segmentation annotations; the dataset has none",
            mode.as_str()
        )));
    }
    let model = Model::new(cfg.model.clone(), mode)?;
    let mut params = model.init_params(cfg.seed)?;
    for path in warm {
        let source = ParamStore::load(path)?;
        let mut namespaces = vec!["trunk"];
        if mode.has_det() && source.has_namespace("det") {
            namespaces.push("det");
        }
        if mode.has_seg() && source.has_namespace("seg") {
            namespaces.push("seg");
        }
        params
            .load_namespaces(&source, &namespaces)
            .map_err(|e| CliError::Usage(format!("warm start from {}: {e}", path.display())))?;
    }
    let out = &cfg.out_dir;
    cfg.write_resolved(out)?;
    let outputs = TrainOutputs::in_dir(out);
    let outcome = train(&model, &mut params, &data, &cfg.train, cfg.seed, Some(&outputs))?;
    let last = outcome.records.last().expect("at least one step");
    let mut msg = format!(
        "trained {} model for {} steps; final loss {:.6}",
        mode.as_str(),
        last.step,
        last.loss.total
    );
    if let Some(m) = last.miou {
        msg += &format!("; miou {m:.6}");
    }
    if let Some(m) = last.map {
        msg += &format!("; map {m:.6}");
    }
    Ok(msg)
}

pub fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<String> {
    let (model, params) = load_checkpoint(cfg, &args.ckpt)?;
    let data = load_dataset_for(cfg, &args.dataset)?;
    let mut indices = match args.split.as_str() {
        "val" => data.split_indices(Split::Val),
        "train" => data.split_indices(Split::Train),
        "all" => (0..data.len()).collect(),
        other => return Err(CliError::Usage(format!("unknown split {other:?}"))),
    };
    indices.retain(|&i| {
        let s = &data.samples[i];
        (model.mode().has_det() && s.boxes.is_some()) || (model.mode().has_seg() && s.mask.is_some())
    });
    if indices.is_empty() {
        return Err(CliError::Usage(
            "no sample in the split carries an annotation this model can score".into(),
        ));
    }
    let report = evaluate(&model, &params, &data, &indices, cfg.train.eval_batch, cfg.train.ap_mode)?;
    let out = &cfg.out_dir;
    cfg.write_resolved(out)?;
    let mut lines = Vec::new();
    if let Some(m) = report.miou {
        lines.push(format!("miou {m:.6}"));
    }
    if let Some(m) = report.map {
        lines.push(format!("map {m:.6}"));
        let mut per_image: Vec<(usize, Vec<_>)> = Vec::new();
        for (idx, d) in &report.detections {
            let id = data.samples[*idx].id;
            match per_image.last_mut() {
                Some((last, v)) if *last == id => v.push(*d),
                _ => per_image.push((id, vec![*d])),
            }
        }
        fs::write(out.join("detections.csv"), detections_to_csv(&per_image))?;
    }
    fs::write(out.join("eval.txt"), lines.join("\n") + "\n")?;
    if args.render > 0 {
        let dir = out.join("renders");
        fs::create_dir_all(&dir)?;
        for &idx in indices.iter().take(args.render) {
            let sample = &data.samples[idx];
            let dets: Vec<_> = report.detections.iter().filter(|(i, _)| *i == idx).map(|(_, d)| *d).collect();
            let mask = report.masks.iter().find(|(i, _)| *i == idx).map(|(_, m)| m);
            let mut pred = RgbImage::from_tensor(&sample.image)?;
            if let Some(m) = mask {
                pred.overlay_mask(m, 0.5);
            }
            for d in dets.iter().filter(|d| d.score >= 0.5) {
                pred.draw_box(&d.bbox, palette_color(d.class_id as u8));
            }
            let gt = render_ground_truth(&sample.image, sample.boxes.as_deref(), sample.mask.as_ref())?;
            pred.hconcat(&gt)?.scaled(4).save(&dir.join(format!("{:05}.ppm", sample.id)))?;
        }
    }
    Ok(lines.join("\n"))
}

fn loaded((model, params): &(Model, ParamStore)) -> Loaded<'_> {
    Loaded { model, params }
}

/// Image with the ground-truth mask blended in and boxes outlined in class colors.
pub fn render_ground_truth(
    image: &trunkshare_tensor::Tensor,
    boxes: Option<&[trunkshare_core::det::GtBox]>,
    mask: Option<&trunkshare_core::seg::SegMask>,
) -> Result<RgbImage> {
    let mut img = RgbImage::from_tensor(image)?;
    if let Some(m) = mask {
        img.overlay_mask(m, 0.5);
    }
    for b in boxes.unwrap_or_default() {
        img.draw_box(&b.bbox, palette_color(b.class_id as u8));
    }
    Ok(img)
}

pub fn cmd_bench(cfg: &RunConfig, paths: &[PathBuf]) -> Result<String> {
    let mut slots: [Option<(Model, ParamStore)>; 3] = [None, None, None];
    for path in paths {
        let (model, params) = load_checkpoint(cfg, path)?;
        let k = match model.mode() {
            TaskMode::Multi => 0,
            TaskMode::Det => 1,
            TaskMode::Seg => 2,
        };
        if slots[k].is_some() {
            return Err(CliError::Usage(format!("more than one {} checkpoint given", model.mode().as_str())));
        }
        slots[k] = Some((model, params));
    }
    let [Some(multi), Some(ssd), Some(fcn)] = &slots else {
        return Err(CliError::Usage("bench needs one multi, one det and one seg checkpoint".into()));
    };
    let report = run_bench(loaded(multi), loaded(ssd), loaded(fcn), &cfg.bench, cfg.seed)?;
    let out = &cfg.out_dir;
    cfg.write_resolved(out)?;
    fs::write(out.join("report.md"), report.to_markdown()?)?;
    fs::write(out.join("report.csv"), report.to_csv()?)?;
    report.bar_chart()?.save(&out.join("report.ppm"))?;
    let r = report.ratios()?;
    Ok(format!(
        "speedup {} memory {} size {}",
        fmt3(r.speedup),
        fmt3(r.memory),
        fmt3(r.size)
    ))
}
