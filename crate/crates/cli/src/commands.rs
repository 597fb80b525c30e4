//! The pipeline subcommands. Each one resolves its key table, writes
//! `<out>/config.resolved`, then runs.

use std::path::{Path, PathBuf};

use maskprior_core::checkpoint;
use maskprior_core::dataset::{prepare, BaseModel, PreparedSample, Split};
use maskprior_core::denoiser::{self, DenoiserParams};
use maskprior_core::discrete::{DiscreteDiffusion, ScheduleKind, TransitionKind};
use maskprior_core::grids::LabelGrid;
use maskprior_core::metrics::{boundary_iou, config_hash, evaluate, miou};
use maskprior_core::refiner::{refine_trajectories, RefineConfig, Strategy};
use maskprior_core::segmentor::{train_base, BaseTrainConfig};
use maskprior_core::synthdata::{load_labels, load_split, save_labels, write_dataset, SceneSpec, SplitSizes};
use maskprior_core::trainer::{run_two_stage, DiffusionTarget, LossKind, TrainConfig, TrainState};

use crate::config::{key, Key, KeyKind::*, Resolved};
use crate::error::{CliError, CliResult};

pub const GEN_DATA: &[Key] = &[
    key("out", "", Value, "output dataset directory"),
    key("spec", "default", Value, "scene preset"),
    key("seed", "0", Value, "global seed"),
    key("count", "2000", Value, "training scenes"),
    key("eval-count", "200", Value, "evaluation scenes"),
];

pub const TRAIN_BASE: &[Key] = &[
    key("data", "", Input, "dataset directory (holds train.tsv)"),
    key("out", "", Value, "output directory"),
    key("classes", "4", Value, "number of classes K"),
    key("iters", "600", Value, "training iterations"),
    key("lr", "0.002", Value, "Adam learning rate"),
    key("batch-size", "8", Value, "mini-batch size"),
    key("seed", "0", Value, "global seed"),
];

/// Keys shared by `train-prior` and `ablate`.
macro_rules! prior_keys {
    ($($extra:expr),* $(,)?) => {
        &[
            key("data", "", Input, "dataset directory (holds train.tsv and eval.tsv)"),
            key("base", "oracle:0.11", BaseModel, "segmentor checkpoint or oracle:<severity>[:<seed>]"),
            key("out", "", Value, "output directory"),
            key("classes", "4", Value, "number of classes K"),
            key("T", "20", Value, "diffusion steps"),
            key("schedule", "linear", Value, "noise schedule: linear|cosine"),
            key("transition", "replace", Value, "transition: replace|mask|hybrid"),
            key("target", "first", Value, "diffusion target: gt|init|first"),
            key("loss", "ce", Value, "training loss: ce|vlb|hybrid"),
            key("stage1-iters", "2000", Value, "single-step stage iterations"),
            key("stage2-iters", "6000", Value, "multi-step stage iterations"),
            key("batch-size", "8", Value, "mini-batch size"),
            key("lr", "0.001", Value, "Adam learning rate"),
            key("lr-halving", "2000", Value, "iterations per learning-rate halving"),
            key("ema-decay", "0.99", Value, "EMA decay"),
            key("cond-dropout", "0.1", Value, "probability of zeroing the features"),
            key("base-channels", "16", Value, "denoiser width"),
            key("seed", "0", Value, "global seed"),
            $($extra,)*
        ]
    };
}

pub const TRAIN_PRIOR: &[Key] = prior_keys![];

pub const REFINE: &[Key] = &[
    key("model", "", Input, "prior checkpoint written by train-prior"),
    key("base", "oracle:0.11", BaseModel, "segmentor checkpoint or oracle:<severity>[:<seed>]"),
    key("input", "", Input, "dataset directory or manifest (.tsv)"),
    key("out", "", Value, "output directory for predicted label maps"),
    key("split", "eval", Value, "split the oracle draws for: train|eval"),
    key("classes", "4", Value, "number of classes K"),
    key("steps", "20", Value, "denoiser evaluations"),
    key("cfg-scale", "0", Value, "guidance scale s"),
    key("strategy", "free", Value, "re-noising: free|posterior"),
    key("seed", "0", Value, "global seed"),
    key("dump-trajectory", "false", Switch, "write every intermediate mask"),
];

pub const EVAL: &[Key] = &[
    key("pred-dir", "", Input, "directory of predicted label maps"),
    key("gt-dir", "", Input, "directory of ground-truth label maps"),
    key("out", "", Value, "output directory for eval.json"),
    key("classes", "4", Value, "number of classes K"),
    key("boundary-d", "2", Value, "boundary band width in pixels"),
];

pub const ABLATE: &[Key] = prior_keys![
    key("kind", "", Positional, "diffusion-target|transition|inference|steps|ema"),
    key("steps", "20", Value, "denoiser evaluations of the n-step column"),
];

fn run_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Run(format!("{}: {e}", path.display()))
}

pub fn gen_data(r: &Resolved) -> CliResult<()> {
    let spec = SceneSpec::preset(r.get_str("spec"))?;
    let sizes = SplitSizes {
        train: r.get("count")?,
        eval: r.get("eval-count")?,
    };
    let out = r.path("out");
    write_dataset(&spec, r.get("seed")?, sizes, &out)?;
    println!("gen-data: {} train + {} eval scenes in {}", sizes.train, sizes.eval, out.display());
    Ok(())
}

pub fn train_base_cmd(r: &Resolved) -> CliResult<()> {
    let k: usize = r.get("classes")?;
    let train = load_split(&r.path("data").join("train.tsv"), k)?;
    let config = BaseTrainConfig {
        iterations: r.get("iters")?,
        batch_size: r.get("batch-size")?,
        lr: r.get("lr")?,
        seed: r.get("seed")?,
    };
    let (mut params, losses) = train_base(&train, k, &config)?;
    let out = r.path("out");
    params.export(&out.join("segmentor.ckpt"))?;
    let log: String = losses.iter().enumerate().map(|(i, l)| format!("{i}\t{l:.6}\n")).collect();
    let log_path = out.join("losses.tsv");
    std::fs::write(&log_path, log).map_err(|e| run_err(&log_path, e))?;
    println!(
        "train-base: {} iterations, final loss {:.4}",
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Training configuration from the prior key table.
pub fn train_config(r: &Resolved) -> CliResult<TrainConfig> {
    let config = TrainConfig {
        steps: r.get("T")?,
        schedule: r.get::<ScheduleKind>("schedule")?,
        transition: r.get::<TransitionKind>("transition")?,
        target: r.get::<DiffusionTarget>("target")?,
        loss: r.get::<LossKind>("loss")?,
        stage1_iters: r.get("stage1-iters")?,
        stage2_iters: r.get("stage2-iters")?,
        batch_size: r.get("batch-size")?,
        lr: r.get("lr")?,
        lr_halving: r.get("lr-halving")?,
        ema_decay: r.get("ema-decay")?,
        cond_dropout: r.get("cond-dropout")?,
        base_channels: r.get("base-channels")?,
        seed: r.get("seed")?,
        ..TrainConfig::default()
    };
    config.validate()?;
    Ok(config)
}

/// Manifest for a dataset directory or an explicit `.tsv` path.
fn manifest(input: &Path, split: &str) -> PathBuf {
    if input.is_dir() {
        input.join(format!("{split}.tsv"))
    } else {
        input.to_path_buf()
    }
}

/// Load a split and run the base model over it.
pub fn prepared(input: &Path, split: Split, base: &BaseModel, k: usize) -> CliResult<Vec<PreparedSample>> {
    let name = match split {
        Split::Train => "train",
        Split::Eval => "eval",
    };
    let samples = load_split(&manifest(input, name), k)?;
    Ok(prepare(&samples, base, split)?)
}

/// Config-block entries recording the diffusion the prior was trained under.
fn diffusion_entries(config: &TrainConfig) -> Vec<(String, String)> {
    vec![
        ("diffusion_steps".into(), config.steps.to_string()),
        ("diffusion_schedule".into(), config.schedule.to_string()),
        ("diffusion_transition".into(), config.transition.to_string()),
    ]
}

/// Train both stages and save `model.ckpt` (EMA weights), `model_live.ckpt`
/// and `train_log.tsv` into `out`.
pub fn train_and_save(config: &TrainConfig, train: &[PreparedSample], out: &Path) -> CliResult<TrainState> {
    let state = run_two_stage(train, config)?;
    save_state(&state, config, out)?;
    Ok(state)
}

pub fn save_state(state: &TrainState, config: &TrainConfig, out: &Path) -> CliResult<()> {
    std::fs::create_dir_all(out).map_err(|e| run_err(out, e))?;
    let entries = diffusion_entries(config);
    state.ema.shadow.save_with(&out.join("model.ckpt"), &entries)?;
    state.params.save_with(&out.join("model_live.ckpt"), &entries)?;
    state.write_log(&out.join("train_log.tsv"))?;
    Ok(())
}

pub fn train_prior(r: &Resolved) -> CliResult<()> {
    let config = train_config(r)?;
    let base = BaseModel::from_spec(r.get_str("base"))?;
    let train = prepared(&r.path("data"), Split::Train, &base, r.get("classes")?)?;
    let state = train_and_save(&config, &train, &r.path("out"))?;
    println!(
        "train-prior: {} iterations, final loss {:.4}",
        state.iteration,
        state.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

/// A saved prior with the diffusion it was trained under.
pub fn load_prior(path: &Path) -> CliResult<(DenoiserParams<f32>, DiscreteDiffusion)> {
    let container = checkpoint::read_file(path, denoiser::CHECKPOINT_MAGIC)?;
    let block = &container.config;
    let steps: usize = block.get("diffusion_steps")?;
    let schedule: ScheduleKind = block.get_str("diffusion_schedule")?.parse()?;
    let transition: TransitionKind = block.get_str("diffusion_transition")?.parse()?;
    let params = DenoiserParams::load(path)?;
    let schedule = maskprior_core::discrete::build_schedule(schedule, steps, transition)?;
    let diffusion = DiscreteDiffusion::new(schedule, params.config().num_classes)?;
    Ok((params, diffusion))
}

pub fn refine_config(r: &Resolved) -> CliResult<RefineConfig> {
    Ok(RefineConfig {
        steps: r.get("steps")?,
        guidance: r.get("cfg-scale")?,
        strategy: r.get::<Strategy>("strategy")?,
        seed: r.get("seed")?,
    })
}

pub fn refine_cmd(r: &Resolved) -> CliResult<()> {
    let (params, diffusion) = load_prior(&r.path("model"))?;
    let base = BaseModel::from_spec(r.get_str("base"))?;
    let split_name = r.get_str("split");
    let split = match split_name {
        "train" => Split::Train,
        "eval" => Split::Eval,
        other => return Err(CliError::Config(format!("split = {other:?} is not train|eval"))),
    };
    let k: usize = r.get("classes")?;
    let input = manifest(&r.path("input"), split_name);
    let entries = maskprior_core::synthdata::read_manifest(&input)?;
    let data = prepared(&input, split, &base, k)?;
    let config = refine_config(r)?;
    let trajectories = refine_trajectories(&data, &params, &diffusion, &config)?;
    let out = r.path("out");
    let dump = r.flag("dump-trajectory")?;
    for ((traj, sample), entry) in trajectories.iter().zip(&data).zip(&entries) {
        let name = entry
            .labels
            .file_name()
            .ok_or_else(|| CliError::Run(format!("manifest entry {} has no file name", entry.labels.display())))?;
        let pred = traj.decode(sample.gt_full.height(), sample.gt_full.width())?;
        save_labels(&pred, &out.join(name))?;
        if dump {
            let stem = Path::new(name).with_extension("");
            traj.dump(&out.join("trajectory").join(stem))?;
        }
    }
    println!("refine: {} masks, {} steps, written to {}", data.len(), config.steps, out.display());
    Ok(())
}

/// Label maps (`*.pgm`) of a directory, sorted by name.
fn label_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| run_err(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| run_err(dir, e)))
        .collect::<CliResult<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn eval_cmd(r: &Resolved) -> CliResult<()> {
    let k: usize = r.get("classes")?;
    let pred_dir = r.path("pred-dir");
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for gt_path in label_files(&r.path("gt-dir"))? {
        let name = gt_path.file_name().expect("listed file");
        let pred_path = pred_dir.join(name);
        if !pred_path.exists() {
            return Err(CliError::MissingFile(format!("no prediction {}", pred_path.display())));
        }
        gts.push(load_labels(&gt_path, k)?);
        preds.push(load_labels(&pred_path, k)?);
    }
    if gts.is_empty() {
        return Err(CliError::Run(format!("no label maps in {}", r.get_str("gt-dir"))));
    }
    let report = evaluate(&preds, &gts, k, r.get("boundary-d")?, config_hash(&r.to_ini()))?;
    let path = r.path("out").join("eval.json");
    let json = serde_json::to_string_pretty(&report).expect("plain report");
    std::fs::write(&path, json + "\n").map_err(|e| run_err(&path, e))?;
    println!("eval: {} images, mIoU {:.4}, bIoU {:.4}", report.n_images, report.miou, report.biou);
    Ok(())
}

/// `(mIoU, bIoU)` of full-resolution predictions.
pub fn score(preds: &[LabelGrid], gts: &[LabelGrid], k: usize, d: usize) -> CliResult<(f64, f64)> {
    Ok((miou(preds, gts, k)?.mean, boundary_iou(preds, gts, k, d)?.mean))
}
