//! Training of the diffusion prior: noise is added to the model's own first
//! prediction rather than to the ground truth, and training runs in two
//! stages (maximal-noise single step, then all timesteps).

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;

use crate::dataset::PreparedSample;
use crate::denoiser::{DenoiserConfig, DenoiserParams, EmaState, Example};
use crate::discrete::{build_schedule, ce_loss_with_grad, DiscreteDiffusion, ScheduleKind, TransitionKind};
use crate::error::{Error, Result};
use crate::grids::{argmax_labels, FeatureGrid, LabelGrid};
use crate::nn::Adam;
use crate::seed::{domain, rng_for, Rng};

/// What gets noised to form the denoiser input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiffusionTarget {
    GroundTruth,
    /// Argmax of the base segmentor's logits.
    InitPrediction,
    /// The live model's own maximal-noise prediction.
    FirstPrediction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Ce,
    Vlb,
    /// `VLB + CE`, unit weights.
    Hybrid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// `t = T` only, ground truth as the noised object.
    SingleStep,
    /// `t ~ U{1..T}` with the configured diffusion target.
    MultiStep,
}

impl FromStr for DiffusionTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt" => Ok(Self::GroundTruth),
            "init" => Ok(Self::InitPrediction),
            "first" => Ok(Self::FirstPrediction),
            _ => Err(Error::Config(format!("unknown diffusion target {s:?}"))),
        }
    }
}

impl fmt::Display for DiffusionTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::GroundTruth => "gt",
            Self::InitPrediction => "init",
            Self::FirstPrediction => "first",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(Self::Ce),
            "vlb" => Ok(Self::Vlb),
            "hybrid" => Ok(Self::Hybrid),
            _ => Err(Error::Config(format!("unknown loss {s:?}"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ce => "ce",
            Self::Vlb => "vlb",
            Self::Hybrid => "hybrid",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub transition: TransitionKind,
    pub target: DiffusionTarget,
    pub loss: LossKind,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_halving: usize,
    pub lr_floor: f64,
    pub ema_decay: f64,
    pub ema_interval: usize,
    /// Probability of zeroing the features of a training example, which
    /// trains the unconditional branch used by guidance.
    pub cond_dropout: f64,
    /// Random horizontal flips.
    pub flip: bool,
    pub log_interval: usize,
    pub seed: u64,
    pub base_channels: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub attention: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            schedule: ScheduleKind::Linear,
            transition: TransitionKind::ReplaceOnly,
            target: DiffusionTarget::FirstPrediction,
            loss: LossKind::Ce,
            stage1_iters: 2000,
            stage2_iters: 6000,
            batch_size: 8,
            lr: 1e-3,
            lr_halving: 2000,
            lr_floor: 1e-6,
            ema_decay: 0.99,
            ema_interval: 1,
            cond_dropout: 0.1,
            flip: true,
            log_interval: 100,
            seed: 0,
            base_channels: 16,
            depth: 2,
            embed_dim: 16,
            attention: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("T must be at least 1".into()));
        }
        if self.batch_size == 0 || self.lr_halving == 0 || self.log_interval == 0 {
            return Err(Error::Config("batch size, halving and log intervals must be positive".into()));
        }
        if !(self.lr > 0.0) || self.lr_floor > self.lr {
            return Err(Error::Config("need 0 < lr and lr floor <= lr".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) || !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Config("EMA decay and condition dropout must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn denoiser_config(&self, num_classes: usize, feature_channels: usize) -> DenoiserConfig {
        DenoiserConfig {
            num_classes,
            feature_channels,
            base_channels: self.base_channels,
            depth: self.depth,
            embed_dim: self.embed_dim,
            attention: vec![self.attention; self.depth + 1],
        }
    }

    pub fn diffusion(&self, num_classes: usize) -> Result<DiscreteDiffusion> {
        DiscreteDiffusion::new(build_schedule(self.schedule, self.steps, self.transition)?, num_classes)
    }
}

/// `lr · 2^-floor(iter / interval)`, clamped at the floor.
pub fn lr_at(iteration: usize, config: &TrainConfig) -> f64 {
    let halvings = (iteration / config.lr_halving).min(1000) as i32;
    (config.lr * 0.5f64.powi(halvings)).max(config.lr_floor)
}

/// Argmax of one maximal-noise denoising pass from a random start.
pub fn first_prediction(
    params: &DenoiserParams<f32>,
    diffusion: &DiscreteDiffusion,
    features: Option<&FeatureGrid>,
    height: usize,
    width: usize,
    rng: &mut Rng,
) -> Result<LabelGrid> {
    let start = diffusion.sample_prior(height, width, rng);
    let logits = params.forward(&start, features, diffusion.steps())?;
    Ok(argmax_labels(&logits))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogLine {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: DenoiserParams<f32>,
    pub ema: EmaState<f32>,
    pub adam: Adam<f32>,
    /// Iterations completed across all stages.
    pub iteration: usize,
    /// Iterations completed in the current stage (drives the LR schedule).
    pub stage_iteration: usize,
    pub losses: Vec<f64>,
    pub log: Vec<LogLine>,
}

impl TrainState {
    pub fn new(config: &TrainConfig, num_classes: usize, feature_channels: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.seed, domain::INIT, 0);
        let mut params = DenoiserParams::init(config.denoiser_config(num_classes, feature_channels), &mut rng)?;
        params.unconditional_branch = config.cond_dropout > 0.0;
        Ok(Self {
            ema: EmaState::new(&params, config.ema_decay, config.ema_interval),
            adam: Adam::new(params.tensors()),
            params,
            iteration: 0,
            stage_iteration: 0,
            losses: Vec::new(),
            log: Vec::new(),
        })
    }

    /// Write the log as `iter<TAB>lr<TAB>loss` lines.
    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for l in &self.log {
            writeln!(out, "{}\t{:e}\t{:.6}", l.iteration, l.lr, l.loss).expect("write to Vec");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

struct Drawn {
    sample: PreparedSample,
    conditioned: bool,
    t: usize,
    noisy: LabelGrid,
}

/// One optimizer step on a random mini-batch. Returns the batch loss.
pub fn train_step(
    state: &mut TrainState,
    data: &[PreparedSample],
    diffusion: &DiscreteDiffusion,
    config: &TrainConfig,
    stage: Stage,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut rng = rng_for(config.seed, domain::TRAIN, state.iteration as u64);
    let big_t = diffusion.steps();
    let mut drawn = Vec::with_capacity(config.batch_size);
    for _ in 0..config.batch_size {
        let raw = &data[rng.random_range(0..data.len())];
        let sample = if config.flip && rng.random_bool(0.5) {
            raw.flipped()
        } else {
            raw.clone()
        };
        let conditioned = !rng.random_bool(config.cond_dropout);
        let (t, x0) = match stage {
            Stage::SingleStep => (big_t, sample.target.clone()),
            Stage::MultiStep => {
                let t = rng.random_range(1..=big_t);
                let x0 = match config.target {
                    DiffusionTarget::GroundTruth => sample.target.clone(),
                    DiffusionTarget::InitPrediction => sample.init_labels(),
                    DiffusionTarget::FirstPrediction => {
                        let (h, w) = (sample.target.height(), sample.target.width());
                        first_prediction(&state.params, diffusion, Some(&sample.features), h, w, &mut rng)?
                    }
                };
                (t, x0)
            }
        };
        let noisy = diffusion.q_sample(&x0, t, &mut rng)?;
        drawn.push(Drawn {
            sample,
            conditioned,
            t,
            noisy,
        });
    }
    let batch: Vec<Example> = drawn
        .iter()
        .map(|d| Example {
            noisy: &d.noisy,
            features: d.conditioned.then_some(&d.sample.features),
            t: d.t,
            target: &d.sample.target,
        })
        .collect();
    let loss_kind = config.loss;
    let (loss, grads) = state.params.batch_gradients_with(&batch, |ex, logits| match loss_kind {
        LossKind::Ce => ce_loss_with_grad(logits, ex.target),
        LossKind::Vlb => diffusion.vlb_loss_with_grad(logits, ex.noisy, ex.target, ex.t),
        LossKind::Hybrid => {
            let (a, ga) = ce_loss_with_grad(logits, ex.target)?;
            let (b, gb) = diffusion.vlb_loss_with_grad(logits, ex.noisy, ex.target, ex.t)?;
            Ok((a + b, ga.iter().zip(&gb).map(|(x, y)| x + y).collect()))
        }
    })?;
    if !loss.is_finite() || !grads.all_finite() {
        return Err(Error::Diverged {
            iteration: state.iteration,
        });
    }
    let lr = lr_at(state.stage_iteration, config);
    state.adam.update(state.params.tensors_mut(), &grads, lr);
    state.ema.step(&state.params)?;
    state.iteration += 1;
    state.stage_iteration += 1;
    state.losses.push(loss);
    if state.stage_iteration % config.log_interval == 0 {
        let window = &state.losses[state.losses.len() - config.log_interval..];
        state.log.push(LogLine {
            iteration: state.iteration,
            lr,
            loss: window.iter().sum::<f64>() / window.len() as f64,
        });
    }
    Ok(loss)
}

/// Run one stage; the learning-rate schedule restarts at the stage start.
pub fn run_stage(
    state: &mut TrainState,
    data: &[PreparedSample],
    config: &TrainConfig,
    stage: Stage,
) -> Result<()> {
    let diffusion = config.diffusion(state.params.config().num_classes)?;
    let iters = match stage {
        Stage::SingleStep => config.stage1_iters,
        Stage::MultiStep => config.stage2_iters,
    };
    state.stage_iteration = 0;
    for _ in 0..iters {
        train_step(state, data, &diffusion, config, stage)?;
    }
    Ok(())
}

/// Stage 1 (t = T) followed by stage 2 (all t) from the stage-1 weights.
pub fn run_two_stage(data: &[PreparedSample], config: &TrainConfig) -> Result<TrainState> {
    let first = data
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty training set".into()))?;
    let mut state = TrainState::new(config, first.target.num_classes(), first.features.channels())?;
    run_stage(&mut state, data, config, Stage::SingleStep)?;
    run_stage(&mut state, data, config, Stage::MultiStep)?;
    Ok(state)
}
