//! `ablate <kind>`: train the variants of one design choice on the same data
//! and budget, refine the evaluation split and tabulate mIoU / boundary IoU.
//!
//! Every trained variant is saved under `<out>/<variant>/` exactly as
//! `train-prior` would save it, so each row can be reproduced by separate
//! `train-prior`, `refine` and `eval` runs.

use std::fmt::Write as _;

use maskprior_core::dataset::{BaseModel, PreparedSample, Split};
use maskprior_core::denoiser::DenoiserParams;
use maskprior_core::discrete::{DiscreteDiffusion, TransitionKind};
use maskprior_core::grids::LabelGrid;
use maskprior_core::metrics::default_boundary_d;
use maskprior_core::refiner::{refine_all, RefineConfig, Strategy};
use maskprior_core::trainer::{run_stage, DiffusionTarget, Stage, TrainConfig, TrainState};

use crate::commands::{prepared, save_state, score, train_config, train_and_save};
use crate::config::Resolved;
use crate::error::{CliError, CliResult};

pub const KINDS: &[&str] = &["diffusion-target", "transition", "inference", "steps", "ema"];

/// A result table; the first column names the variant.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut s = self.header.join("\t") + "\n";
        for (name, values) in &self.rows {
            s.push_str(name);
            for v in values {
                write!(s, "\t{v:.6}").expect("write to String");
            }
            s.push('\n');
        }
        s
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|(n, _)| n.len()).chain([self.header[0].len()]).max().unwrap_or(0);
        let mut s = format!("{:<width$}", self.header[0]);
        for h in &self.header[1..] {
            write!(s, "  {h:>10}").expect("write to String");
        }
        s.push('\n');
        for (name, values) in &self.rows {
            write!(s, "{name:<width$}").expect("write to String");
            for v in values {
                write!(s, "  {v:>10.4}").expect("write to String");
            }
            s.push('\n');
        }
        s
    }
}

struct Bench<'a> {
    eval: &'a [PreparedSample],
    gts: Vec<LabelGrid>,
    k: usize,
    d: usize,
    seed: u64,
}

impl Bench<'_> {
    fn score(
        &self,
        params: &DenoiserParams<f32>,
        diffusion: &DiscreteDiffusion,
        steps: usize,
        strategy: Strategy,
        guidance: f64,
    ) -> CliResult<(f64, f64)> {
        let config = RefineConfig {
            steps,
            guidance,
            strategy,
            seed: self.seed,
        };
        let preds = refine_all(self.eval, params, diffusion, &config)?;
        score(&preds, &self.gts, self.k, self.d)
    }

    /// `[mIoU@1, mIoU@n, bIoU@1, bIoU@n]` with free re-noising.
    fn one_and_n(&self, params: &DenoiserParams<f32>, diffusion: &DiscreteDiffusion, n: usize) -> CliResult<Vec<f64>> {
        let (m1, b1) = self.score(params, diffusion, 1, Strategy::FreeRenoise, 0.0)?;
        let (mn, bn) = self.score(params, diffusion, n, Strategy::FreeRenoise, 0.0)?;
        Ok(vec![m1, mn, b1, bn])
    }
}

pub fn ablate(r: &Resolved) -> CliResult<Table> {
    let kind = r.get_str("kind");
    if !KINDS.contains(&kind) {
        return Err(CliError::Usage(format!(
            "unknown ablation {kind:?}; expected one of {}",
            KINDS.join("|")
        )));
    }
    let config = train_config(r)?;
    let n: usize = r.get("steps")?;
    let k: usize = r.get("classes")?;
    let base = BaseModel::from_spec(r.get_str("base"))?;
    let data = r.path("data");
    let out = r.path("out");
    let train = prepared(&data, Split::Train, &base, k)?;
    let eval = prepared(&data, Split::Eval, &base, k)?;
    let gts: Vec<LabelGrid> = eval.iter().map(|s| s.gt_full.clone()).collect();
    let d = gts
        .first()
        .map(|g| default_boundary_d(g.height(), g.width()))
        .ok_or_else(|| CliError::Run("empty evaluation split".into()))?;
    let bench = Bench {
        eval: &eval,
        gts,
        k,
        d,
        seed: config.seed,
    };
    let one_n = ["variant", "miou@1", &format!("miou@{n}"), "biou@1", &format!("biou@{n}")];
    let mut table = Table::new(&one_n);
    match kind {
        "diffusion-target" => {
            // Stage 1 always noises the ground truth, so it is trained once
            // and shared; each variant then runs its own stage 2.
            let first = train.first().ok_or_else(|| CliError::Run("empty training split".into()))?;
            let mut stage1 = TrainState::new(&config, k, first.features.channels())?;
            run_stage(&mut stage1, &train, &config, Stage::SingleStep)?;
            for target in [
                DiffusionTarget::GroundTruth,
                DiffusionTarget::InitPrediction,
                DiffusionTarget::FirstPrediction,
            ] {
                let c = TrainConfig { target, ..config.clone() };
                let mut state = stage1.clone();
                run_stage(&mut state, &train, &c, Stage::MultiStep)?;
                save_state(&state, &c, &out.join(target.to_string()))?;
                let row = bench.one_and_n(&state.ema.shadow, &c.diffusion(k)?, n)?;
                table.rows.push((target.to_string(), row));
            }
        }
        "transition" => {
            for transition in [TransitionKind::ReplaceOnly, TransitionKind::MaskOnly, TransitionKind::ReplaceMask(0.5)] {
                let c = TrainConfig { transition, ..config.clone() };
                let state = train_and_save(&c, &train, &out.join(transition.to_string()))?;
                let row = bench.one_and_n(&state.ema.shadow, &c.diffusion(k)?, n)?;
                table.rows.push((transition.to_string(), row));
            }
        }
        "inference" => {
            let state = train_and_save(&config, &train, &out.join("model"))?;
            let diffusion = config.diffusion(k)?;
            table = Table::new(&["variant", &format!("miou@{n}"), &format!("biou@{n}")]);
            for strategy in [Strategy::FreeRenoise, Strategy::PosteriorRenoise] {
                for s in [0.0, 0.5, 1.0] {
                    let (m, b) = bench.score(&state.ema.shadow, &diffusion, n, strategy, s)?;
                    table.rows.push((format!("{strategy} s={s}"), vec![m, b]));
                }
            }
        }
        "steps" => {
            let state = train_and_save(&config, &train, &out.join("model"))?;
            let diffusion = config.diffusion(k)?;
            table = Table::new(&["steps", "miou", "biou"]);
            let mut counts = vec![1, 2, 5, 10, config.steps];
            counts.sort_unstable();
            counts.dedup();
            for steps in counts.into_iter().filter(|&s| s <= config.steps) {
                let (m, b) = bench.score(&state.ema.shadow, &diffusion, steps, Strategy::FreeRenoise, 0.0)?;
                table.rows.push((steps.to_string(), vec![m, b]));
            }
        }
        "ema" => {
            let state = train_and_save(&config, &train, &out.join("model"))?;
            let diffusion = config.diffusion(k)?;
            table.rows.push(("ema".into(), bench.one_and_n(&state.ema.shadow, &diffusion, n)?));
            table.rows.push(("live".into(), bench.one_and_n(&state.params, &diffusion, n)?));
        }
        _ => unreachable!("kind checked above"),
    }
    let path = out.join("ablate.tsv");
    std::fs::write(&path, table.to_tsv()).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?;
    print!("{}", table.to_text());
    Ok(table)
}
