//! Iterative refinement: start from a random mask, predict `x_0`, re-noise
//! the prediction to the next (strided) timestep and repeat; the last
//! prediction is decoded to full resolution.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::PreparedSample;
use crate::denoiser::DenoiserParams;
use crate::discrete::DiscreteDiffusion;
use crate::error::{Error, Result};
use crate::grids::{argmax_labels, decode_full, FeatureGrid, LabelGrid, LogitsGrid};
use crate::seed::{domain, rng_for, Rng};
use crate::synthdata::save_labels;

/// How the next state is drawn from the current `x_0` prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// `x_{t_next} ~ q(x_{t_next} | x0_pred)`, ignoring the current state.
    FreeRenoise,
    /// `x_{t_next} ~ q(x_{t_next} | x_t, x0_pred)`.
    PosteriorRenoise,
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "free" => Ok(Self::FreeRenoise),
            "posterior" => Ok(Self::PosteriorRenoise),
            _ => Err(Error::Config(format!("unknown strategy {s:?}"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FreeRenoise => "free",
            Self::PosteriorRenoise => "posterior",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineConfig {
    /// Number of denoiser evaluations.
    pub steps: usize,
    /// Guidance scale `s`; logits are `(s + 1) l_c - s l_u`.
    pub guidance: f64,
    pub strategy: Strategy,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            guidance: 0.0,
            strategy: Strategy::FreeRenoise,
            seed: 0,
        }
    }
}

/// `n` timesteps from `T` downwards with spacing `floor(T / n)`.
pub fn stride_schedule(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= steps <= T, got {steps} steps for T = {total}"
        )));
    }
    let stride = total / steps;
    Ok((0..steps).map(|i| total - i * stride).collect())
}

/// `(s + 1) l_c - s l_u`, evaluated as `l_c + s (l_c - l_u)` so that equal
/// inputs come back unchanged; `s = 0` returns `l_c` itself.
pub fn cfg_combine(cond: &LogitsGrid, uncond: &LogitsGrid, scale: f64) -> Result<LogitsGrid> {
    if !cond.same_shape(uncond) {
        return Err(Error::Shape("conditional and unconditional logits differ".into()));
    }
    if scale == 0.0 {
        return Ok(cond.clone());
    }
    let values = cond
        .values()
        .iter()
        .zip(uncond.values())
        .map(|(&c, &u)| c + scale * (c - u))
        .collect();
    LogitsGrid::new(cond.height(), cond.width(), cond.channels(), values)
}

/// Sample from the exact posterior between two scheduled timesteps.
pub fn posterior_renoise(
    x_t: &LabelGrid,
    x0_pred: &LabelGrid,
    t: usize,
    t_next: usize,
    diffusion: &DiscreteDiffusion,
    rng: &mut Rng,
) -> Result<LabelGrid> {
    diffusion.sample_posterior_between(x_t, x0_pred, t_next, t, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStep {
    pub timestep: usize,
    pub x0_pred: LabelGrid,
    /// The state fed to the denoiser at this step (the prediction itself for
    /// the final `t = 0` entry).
    pub noised: LabelGrid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    /// Logits of the final denoiser evaluation, 1/4 scale.
    pub logits: LogitsGrid,
}

impl Trajectory {
    /// The refined mask at 1/4 scale.
    pub fn prediction(&self) -> &LabelGrid {
        &self.steps.last().expect("non-empty trajectory").x0_pred
    }

    /// The refined mask decoded to full resolution.
    pub fn decode(&self, height: usize, width: usize) -> Result<LabelGrid> {
        decode_full(&self.logits, height, width)
    }

    /// Write one label file per step and a JSON-lines index.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            step: usize,
            timestep: usize,
            file: &'a str,
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = Vec::new();
        for (i, s) in self.steps.iter().enumerate() {
            let file = format!("step{i:03}_t{:03}.pgm", s.timestep);
            save_labels(&s.x0_pred, &dir.join(&file))?;
            let row = Row {
                step: i,
                timestep: s.timestep,
                file: &file,
            };
            writeln!(index, "{}", serde_json::to_string(&row).expect("plain struct")).expect("write to Vec");
        }
        let path = dir.join("index.jsonl");
        std::fs::write(&path, index).map_err(|e| Error::io(&path, e))
    }
}

fn predict(
    params: &DenoiserParams<f32>,
    x: &LabelGrid,
    features: &FeatureGrid,
    t: usize,
    guidance: f64,
) -> Result<LogitsGrid> {
    let cond = params.forward(x, Some(features), t)?;
    if guidance == 0.0 {
        return Ok(cond);
    }
    let uncond = params.forward(x, None, t)?;
    cfg_combine(&cond, &uncond, guidance)
}

/// Refine one mask conditioned on `features` with (EMA) parameters.
pub fn refine(
    features: &FeatureGrid,
    params: &DenoiserParams<f32>,
    diffusion: &DiscreteDiffusion,
    config: &RefineConfig,
    rng: &mut Rng,
) -> Result<Trajectory> {
    if !(config.guidance >= 0.0) {
        return Err(Error::Config(format!("guidance scale {} must be >= 0", config.guidance)));
    }
    if config.guidance > 0.0 && !params.unconditional_branch {
        return Err(Error::Config(
            "guidance needs a model trained with condition dropout".into(),
        ));
    }
    let schedule = stride_schedule(diffusion.steps(), config.steps)?;
    let mut x = diffusion.sample_prior(features.height(), features.width(), rng);
    let mut steps = Vec::with_capacity(schedule.len() + 1);
    let mut logits = None;
    for (i, &t) in schedule.iter().enumerate() {
        let l = predict(params, &x, features, t, config.guidance)?;
        let x0 = argmax_labels(&l);
        let t_next = schedule.get(i + 1).copied().unwrap_or(0);
        let next = if t_next == 0 {
            None
        } else {
            Some(match config.strategy {
                Strategy::FreeRenoise => diffusion.free_renoise(&x0, t_next, rng)?,
                Strategy::PosteriorRenoise => posterior_renoise(&x, &x0, t, t_next, diffusion, rng)?,
            })
        };
        steps.push(TrajectoryStep {
            timestep: t,
            x0_pred: x0,
            noised: x,
        });
        logits = Some(l);
        if let Some(n) = next {
            x = n;
        } else {
            break;
        }
    }
    let last = steps.last().expect("at least one step").x0_pred.clone();
    steps.push(TrajectoryStep {
        timestep: 0,
        x0_pred: last.clone(),
        noised: last,
    });
    Ok(Trajectory {
        steps,
        logits: logits.expect("at least one step"),
    })
}

/// Refine every sample; sample `i` draws from stream `i` of the refine
/// domain, so results do not depend on scheduling.
pub fn refine_trajectories(
    data: &[PreparedSample],
    params: &DenoiserParams<f32>,
    diffusion: &DiscreteDiffusion,
    config: &RefineConfig,
) -> Result<Vec<Trajectory>> {
    data.par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = rng_for(config.seed, domain::REFINE, i as u64);
            refine(&s.features, params, diffusion, config, &mut rng)
        })
        .collect()
}

/// [`refine_trajectories`] decoded to full resolution.
pub fn refine_all(
    data: &[PreparedSample],
    params: &DenoiserParams<f32>,
    diffusion: &DiscreteDiffusion,
    config: &RefineConfig,
) -> Result<Vec<LabelGrid>> {
    refine_trajectories(data, params, diffusion, config)?
        .iter()
        .zip(data)
        .map(|(traj, s)| traj.decode(s.gt_full.height(), s.gt_full.width()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::discrete::{build_schedule, ScheduleKind, TransitionKind};
    use crate::trainer::first_prediction;
    use rand::SeedableRng;

    fn diffusion(t: usize) -> DiscreteDiffusion {
        DiscreteDiffusion::new(
            build_schedule(ScheduleKind::Linear, t, TransitionKind::ReplaceOnly).unwrap(),
            3,
        )
        .unwrap()
    }

    fn params(seed: u64) -> DenoiserParams<f32> {
        let cfg = DenoiserConfig {
            num_classes: 3,
            feature_channels: 2,
            base_channels: 8,
            depth: 1,
            embed_dim: 4,
            attention: vec![false, false],
        };
        DenoiserParams::init(cfg, &mut Rng::seed_from_u64(seed)).unwrap()
    }

    fn features() -> FeatureGrid {
        FeatureGrid::new(4, 4, 2, (0..32).map(|i| (i % 5) as f32 * 0.3 - 0.5).collect()).unwrap()
    }

    #[test]
    fn stride_examples() {
        assert_eq!(stride_schedule(20, 20).unwrap(), (1..=20).rev().collect::<Vec<_>>());
        assert_eq!(stride_schedule(100, 1).unwrap(), vec![100]);
        assert_eq!(stride_schedule(100, 5).unwrap(), vec![100, 80, 60, 40, 20]);
        assert_eq!(stride_schedule(20, 3).unwrap(), vec![20, 14, 8]);
        assert!(stride_schedule(10, 11).is_err());
        assert!(stride_schedule(10, 0).is_err());
    }

    #[test]
    fn cfg_examples() {
        let c = LogitsGrid::new(1, 2, 2, vec![1.0, -2.0, 0.3, 0.7]).unwrap();
        let u = LogitsGrid::new(1, 2, 2, vec![0.5, 0.5, -1.0, 2.0]).unwrap();
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &c, 3.5).unwrap(), c);
        let one = cfg_combine(&c, &u, 1.0).unwrap();
        for ((&o, &a), &b) in one.values().iter().zip(c.values()).zip(u.values()) {
            assert!((o - (2.0 * a - b)).abs() <= 1e-15 * (2.0 * a - b).abs().max(1.0));
        }
        let other = LogitsGrid::zeros(2, 1, 2);
        assert!(cfg_combine(&c, &other, 1.0).is_err());
    }

    #[test]
    fn trajectory_shape_and_determinism() {
        let d = diffusion(10);
        let p = params(1);
        for strategy in [Strategy::FreeRenoise, Strategy::PosteriorRenoise] {
            let cfg = RefineConfig { steps: 4, strategy, ..RefineConfig::default() };
            let a = refine(&features(), &p, &d, &cfg, &mut Rng::seed_from_u64(3)).unwrap();
            let b = refine(&features(), &p, &d, &cfg, &mut Rng::seed_from_u64(3)).unwrap();
            assert_eq!(a, b);
            let ts: Vec<usize> = a.steps.iter().map(|s| s.timestep).collect();
            assert_eq!(ts, vec![10, 8, 6, 4, 0]);
            assert_eq!(a.prediction(), &argmax_labels(&a.logits));
            assert_eq!(a.decode(16, 16).unwrap().height(), 16);
        }
    }

    #[test]
    fn one_step_matches_first_prediction() {
        let d = diffusion(10);
        let p = params(2);
        let cfg = RefineConfig { steps: 1, ..RefineConfig::default() };
        let traj = refine(&features(), &p, &d, &cfg, &mut Rng::seed_from_u64(9)).unwrap();
        let first = first_prediction(&p, &d, Some(&features()), 4, 4, &mut Rng::seed_from_u64(9)).unwrap();
        assert_eq!(traj.prediction(), &first);
    }

    #[test]
    fn constant_logits_fixed_point() {
        // Zero weights with a biased head: every step predicts argmax(bias).
        let d = diffusion(10);
        let mut p = params(3);
        for t in &mut p.tensors_mut().tensors {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let head_bias = p.tensors().tensors.len() - 1;
        p.tensors_mut().tensors[head_bias].data.copy_from_slice(&[0.1, 0.9, -0.3]);
        let cfg = RefineConfig { steps: 5, ..RefineConfig::default() };
        let traj = refine(&features(), &p, &d, &cfg, &mut Rng::seed_from_u64(4)).unwrap();
        for s in &traj.steps {
            assert!(s.x0_pred.values().iter().all(|&v| v == 1));
        }
    }

    #[test]
    fn guidance_zero_is_identity_and_needs_branch() {
        let d = diffusion(10);
        let mut p = params(5);
        let plain = RefineConfig { steps: 3, ..RefineConfig::default() };
        let a = refine(&features(), &p, &d, &plain, &mut Rng::seed_from_u64(1)).unwrap();
        let guided = RefineConfig { guidance: 1.0, ..plain.clone() };
        assert!(matches!(
            refine(&features(), &p, &d, &guided, &mut Rng::seed_from_u64(1)),
            Err(Error::Config(_))
        ));
        p.unconditional_branch = true;
        let b = refine(&features(), &p, &d, &plain, &mut Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert!(refine(&features(), &p, &d, &guided, &mut Rng::seed_from_u64(1)).is_ok());
    }

    #[test]
    fn posterior_renoise_at_t1_returns_prediction() {
        let d = diffusion(10);
        let x0 = LabelGrid::new(2, 2, 3, vec![0, 1, 2, 1]).unwrap();
        let xt = LabelGrid::new(2, 2, 3, vec![2, 2, 0, 0]).unwrap();
        let out = posterior_renoise(&xt, &x0, 1, 0, &d, &mut Rng::seed_from_u64(2)).unwrap();
        assert_eq!(out, x0);
    }

    #[test]
    fn dump_writes_index() {
        let d = diffusion(4);
        let p = params(6);
        let cfg = RefineConfig { steps: 2, ..RefineConfig::default() };
        let traj = refine(&features(), &p, &d, &cfg, &mut Rng::seed_from_u64(7)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        traj.dump(dir.path()).unwrap();
        let index = std::fs::read_to_string(dir.path().join("index.jsonl")).unwrap();
        let lines: Vec<&str> = index.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[2], r#"{"step":2,"timestep":0,"file":"step002_t000.pgm"}"#);
        assert!(dir.path().join("step000_t004.pgm").exists());
    }
}
