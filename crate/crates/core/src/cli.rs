//! `naima` command line: `synth`, `train`, `eval`, `viz`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{RunConfig, Variant};
use crate::data::io::{list_ids, read_sample, read_split, split_dir, write_sample};
use crate::data::{generate_synthetic_dataset, SamplePair};
use crate::error::{Error, Result};
use crate::eval::{emit_error_map, emit_feature_maps, evaluate_with, BicubicBaseline, DepthPredictor};
use crate::gta::NaimaModel;
use crate::objective::LossKind;
use crate::trainer::{train, write_atomic, write_loss_csv, Checkpoint, TrainState};

pub const CONFIG_ENV: &str = "NAIMA_CONFIG";
pub const CONFIG_SNAPSHOT: &str = "run_config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Parser, Debug)]
#[command(name = "naima", version, about = "Guided depth super-resolution with semantic token attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic RGB-D dataset.
    Synth(SynthArgs),
    /// Train a model and write checkpoints and a loss log.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Emit feature-map and error-map figures for one sample.
    Viz(VizArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of training samples.
    #[arg(long)]
    pub count: usize,
    /// Additional held-out samples written to `val/`.
    #[arg(long, default_value_t = 0)]
    pub val_count: usize,
    /// Side length of the square HR images (multiple of 14 and the scale).
    #[arg(long)]
    pub size: usize,
    #[arg(long, default_value_t = 4)]
    pub scale: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Millimeters per 16-bit depth unit.
    #[arg(long, default_value_t = 0.25)]
    pub depth_scale_mm: f64,
    /// Skip the raw float grids.
    #[arg(long)]
    pub no_raw: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Config file (falls back to $NAIMA_CONFIG).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root holding `train/` (and optionally `val/`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub scale: Option<usize>,
    /// `naima` or `naima_plus`.
    #[arg(long)]
    pub variant: Option<String>,
    /// `l1_grad` or `l1`.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use the small desk-scale model preset.
    #[arg(long)]
    pub tiny: bool,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Split directory under the data root; the root itself is used when it
    /// holds samples directly.
    #[arg(long, default_value = "val")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write one error map per sample.
    #[arg(long)]
    pub error_maps: bool,
    /// Score plain bicubic upsampling instead of the model.
    #[arg(long)]
    pub baseline: bool,
}

#[derive(Args, Debug)]
pub struct VizArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Sample id; defaults to the first one in the split.
    #[arg(long)]
    pub sample: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Viz(a) => cmd_viz(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::path(dir, e))
}

fn write_snapshot(dir: &Path, run: &RunConfig) -> Result<()> {
    write_atomic(&dir.join(CONFIG_SNAPSHOT), run.to_text().as_bytes())
}

/// `root/split` when it exists, else `root` if it holds samples directly.
pub fn resolve_split(root: &Path, split: &str) -> Result<PathBuf> {
    if !root.is_dir() {
        return Err(Error::InvalidInput(format!("data directory {} does not exist", root.display())));
    }
    let dir = split_dir(root, split);
    if dir.is_dir() {
        return Ok(dir);
    }
    if !list_ids(root)?.is_empty() {
        return Ok(root.to_path_buf());
    }
    Err(Error::InvalidInput(format!(
        "no `{split}` split and no samples under {}",
        root.display()
    )))
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let train = generate_synthetic_dataset(a.count, a.size, a.size, a.scale, a.seed)?;
    // Held-out scenes continue the index sequence so they never repeat a
    // training scene.
    let val = generate_synthetic_dataset(a.count + a.val_count, a.size, a.size, a.scale, a.seed)?.split_off(a.count);
    create_dir(&a.out)?;
    for (split, samples) in [("train", &train), ("val", &val)] {
        if samples.is_empty() {
            continue;
        }
        let dir = split_dir(&a.out, split);
        for s in samples {
            write_sample(&dir, s, a.depth_scale_mm, !a.no_raw)?;
        }
    }
    let mut run = RunConfig::default();
    run.model.scale = a.scale;
    run.data_dir = Some(a.out.clone());
    write_snapshot(&a.out, &run)?;
    let manifest = format!(
        "count = {}\nval_count = {}\nsize = {}\nscale = {}\nseed = {}\ndepth_scale_mm = {}\n",
        a.count, a.val_count, a.size, a.scale, a.seed, a.depth_scale_mm
    );
    write_atomic(&a.out.join("manifest.txt"), manifest.as_bytes())?;
    println!(
        "wrote {} training and {} validation samples ({}x{}, scale {}) to {}",
        train.len(),
        val.len(),
        a.size,
        a.size,
        a.scale,
        a.out.display()
    );
    Ok(())
}

/// Defaults ← config file (or `$NAIMA_CONFIG`) ← flags ← `--set` overrides.
pub fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut run = RunConfig::default();
    if a.tiny {
        run.model = crate::config::ModelConfig::tiny();
    }
    let file = a.config.clone().or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    if let Some(path) = file {
        run.apply_file(&path)?;
    }
    if let Some(d) = &a.data {
        run.data_dir = Some(d.clone());
    }
    if let Some(o) = &a.out {
        run.out_dir = Some(o.clone());
    }
    if let Some(s) = a.scale {
        run.model.scale = s;
    }
    if let Some(v) = &a.variant {
        run.model.variant = v.parse::<Variant>()?;
    }
    if let Some(l) = &a.loss {
        run.loss.kind = l.parse::<LossKind>()?;
    }
    if let Some(e) = a.epochs {
        run.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        run.train.lr0 = lr;
    }
    if let Some(s) = a.seed {
        run.train.seed = s;
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        run.set(k.trim(), v.trim())?;
    }
    run.validate()?;
    Ok(run)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut run = resolve_train_config(a)?;
    let data = run
        .data_dir
        .clone()
        .ok_or_else(|| Error::Config("no data directory (use --data or paths.data)".into()))?;
    let out = run
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("no output directory (use --out or paths.out)".into()))?;
    let scale = run.model.scale;
    let train_set = read_split(&resolve_split(&data, "train")?, scale)?;
    let val_dir = split_dir(&data, "val");
    let val_set = if val_dir.is_dir() { read_split(&val_dir, scale)? } else { Vec::new() };

    let (model, mut state) = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.run.model != run.model {
                return Err(Error::Incompatible("resume checkpoint was trained with a different model config".into()));
            }
            ckpt.restore()?
        }
        None => {
            let model = NaimaModel::from_config(run.model.clone())?;
            let state = TrainState::new(&model)?;
            (model, state)
        }
    };
    run.model = model.config().clone();
    create_dir(&out)?;
    write_snapshot(&out, &run)?;
    eprintln!(
        "training {} ({} parameters) on {} samples for {} epochs",
        run.model.variant,
        model.params().num_scalars(),
        train_set.len(),
        run.train.epochs
    );
    train(&model, &train_set, &val_set, &run, &mut state, |r| {
        eprintln!("epoch {:>4}  loss {:.6}  lr {:.3e}", r.epoch, r.mean_loss, r.lr);
    })?;
    write_loss_csv(&out.join("loss.csv"), &state.history)?;
    if !state.validation.is_empty() {
        let mut csv = String::from("epoch,rmse_cm\n");
        for (e, r) in &state.validation {
            csv.push_str(&format!("{e},{r}\n"));
        }
        write_atomic(&out.join("validation.csv"), csv.as_bytes())?;
    }
    let ckpt = Checkpoint::capture(&model, &run, &state)?;
    ckpt.save(&out.join(CHECKPOINT_FILE))?;
    println!(
        "finished {} epochs; final loss {}; checkpoint {}",
        state.epoch,
        state.history.last().map_or(f64::NAN, |r| r.mean_loss),
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<(NaimaModel, RunConfig)> {
    let ckpt = Checkpoint::load(path)?;
    let (model, _) = ckpt.restore()?;
    Ok((model, ckpt.run))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let (model, mut run) = load_model(&a.checkpoint)?;
    let scale = model.config().scale;
    let dataset = read_split(&resolve_split(&a.data, &a.split)?, scale)?;
    let baseline = BicubicBaseline { scale };
    let predictor: &dyn DepthPredictor = if a.baseline { &baseline } else { &model };
    let report = evaluate_with(predictor, &dataset)?;
    create_dir(&a.out)?;
    run.data_dir = Some(a.data.clone());
    run.out_dir = Some(a.out.clone());
    write_snapshot(&a.out, &run)?;
    write_atomic(&a.out.join("report.csv"), report.to_csv().as_bytes())?;
    write_atomic(&a.out.join("summary.txt"), format!("{}\n", report.summary()).as_bytes())?;
    if a.error_maps {
        let dir = a.out.join("error_maps");
        create_dir(&dir)?;
        for s in &dataset {
            emit_error_map(predictor, s, &dir).map_err(|e| e.for_sample(&s.id))?;
        }
    }
    println!("{}", report.summary());
    Ok(())
}

fn find_sample(dir: &Path, id: Option<&str>, scale: usize) -> Result<SamplePair> {
    let ids = list_ids(dir)?;
    let id = match id {
        Some(id) if ids.iter().any(|i| i == id) => id.to_string(),
        Some(id) => return Err(Error::InvalidInput(format!("no sample `{id}` in {}", dir.display()))),
        None => ids
            .first()
            .cloned()
            .ok_or_else(|| Error::InvalidInput(format!("no samples in {}", dir.display())))?,
    };
    read_sample(dir, &id, scale)
}

pub fn cmd_viz(a: &VizArgs) -> Result<()> {
    let (model, mut run) = load_model(&a.checkpoint)?;
    let sample = find_sample(&resolve_split(&a.data, &a.split)?, a.sample.as_deref(), model.config().scale)?;
    create_dir(&a.out)?;
    run.data_dir = Some(a.data.clone());
    run.out_dir = Some(a.out.clone());
    write_snapshot(&a.out, &run)?;
    let mut written = emit_feature_maps(&model, &sample, &a.out.join(&sample.id))?;
    let (err_path, rmse) = emit_error_map(&model, &sample, &a.out)?;
    written.push(err_path);
    for p in &written {
        println!("{}", p.display());
    }
    println!("sample {} rmse_cm {rmse:.4}", sample.id);
    Ok(())
}
