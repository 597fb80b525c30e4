//! Categorical diffusion over label grids.
//!
//! The forward process corrupts each pixel independently with
//! `q(x_t | x_{t-1}) = Cat(x_{t-1} Q_t)`. Three corruption families are
//! supported: uniform replacement, absorbing MASK, and a mix of the two
//! sharing one corruption budget per step.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::grids::{CategoricalGrid, LabelGrid, LogitsGrid};
use crate::seed::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TransitionKind {
    ReplaceOnly,
    MaskOnly,
    /// Fraction of each step's corruption budget spent on uniform replacement;
    /// the rest goes to MASK.
    ReplaceMask(f64),
}

impl TransitionKind {
    pub fn uses_mask(&self) -> bool {
        !matches!(self, TransitionKind::ReplaceOnly)
    }

    /// Number of states including MASK when present.
    pub fn num_states(&self, num_classes: usize) -> usize {
        num_classes + usize::from(self.uses_mask())
    }

    fn replace_fraction(&self) -> f64 {
        match *self {
            TransitionKind::ReplaceOnly => 1.0,
            TransitionKind::MaskOnly => 0.0,
            TransitionKind::ReplaceMask(f) => f,
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            _ => Err(Error::Config(format!("unknown schedule {s:?}"))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Cosine => "cosine",
        })
    }
}

/// `replace`, `mask`, `hybrid` (an even split) or `hybrid:<fraction>`.
impl FromStr for TransitionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown transition {s:?}"));
        match s {
            "replace" => Ok(Self::ReplaceOnly),
            "mask" => Ok(Self::MaskOnly),
            "hybrid" => Ok(Self::ReplaceMask(0.5)),
            _ => {
                let f: f64 = s.strip_prefix("hybrid:").ok_or_else(bad)?.parse().map_err(|_| bad())?;
                if (0.0..=1.0).contains(&f) {
                    Ok(Self::ReplaceMask(f))
                } else {
                    Err(bad())
                }
            }
        }
    }
}

impl fmt::Display for TransitionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::ReplaceOnly => f.write_str("replace"),
            Self::MaskOnly => f.write_str("mask"),
            Self::ReplaceMask(r) if r == 0.5 => f.write_str("hybrid"),
            Self::ReplaceMask(r) => write!(f, "hybrid:{r}"),
        }
    }
}

/// Per-step corruption probabilities and cumulative keep probability.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    transition: TransitionKind,
    /// `alpha_bar[t]` for `t` in `0..=T`.
    alpha_bar: Vec<f64>,
    /// Replacement probability beta_t, index `t` (index 0 unused).
    replace: Vec<f64>,
    /// Mask probability gamma_t, index `t` (index 0 unused).
    mask: Vec<f64>,
}

const COSINE_OFFSET: f64 = 0.008;

fn cosine_alpha_bar(t: usize, steps: usize) -> f64 {
    let f = |t: f64| {
        ((t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2)
            .cos()
            .powi(2)
    };
    if t == steps {
        0.0
    } else {
        f(t as f64) / f(0.0)
    }
}

/// Build a schedule with `steps` timesteps. Both kinds reach full corruption
/// (`alpha_bar[T] == 0`).
pub fn build_schedule(
    kind: ScheduleKind,
    steps: usize,
    transition: TransitionKind,
) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
    }
    let alpha_bar: Vec<f64> = (0..=steps)
        .map(|t| match kind {
            ScheduleKind::Linear => 1.0 - t as f64 / steps as f64,
            ScheduleKind::Cosine => cosine_alpha_bar(t, steps),
        })
        .collect();
    let budget: Vec<f64> = (1..=steps)
        .map(|t| (1.0 - alpha_bar[t] / alpha_bar[t - 1]).clamp(0.0, 1.0))
        .collect();
    NoiseSchedule::from_corruption(&budget, transition)
}

impl NoiseSchedule {
    /// Schedule from explicit per-step corruption budgets `c_1..c_T`.
    pub fn from_corruption(budget: &[f64], transition: TransitionKind) -> Result<Self> {
        if budget.is_empty() {
            return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
        }
        if let TransitionKind::ReplaceMask(f) = transition {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidArgument(format!("replace fraction {f}")));
            }
        }
        if budget.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidArgument("corruption outside [0, 1]".into()));
        }
        let f = transition.replace_fraction();
        let mut replace = vec![0.0];
        let mut mask = vec![0.0];
        let mut alpha_bar = vec![1.0];
        for &c in budget {
            replace.push(f * c);
            mask.push((1.0 - f) * c);
            alpha_bar.push(alpha_bar.last().unwrap() * (1.0 - c));
        }
        if let Some(last) = alpha_bar.last_mut() {
            if budget.last() == Some(&1.0) {
                *last = 0.0;
            }
        }
        Ok(Self {
            steps: budget.len(),
            transition,
            alpha_bar,
            replace,
            mask,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
    pub fn transition(&self) -> TransitionKind {
        self.transition
    }
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }
    pub fn beta(&self, t: usize) -> f64 {
        self.replace[t]
    }
    pub fn gamma(&self, t: usize) -> f64 {
        self.mask[t]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::TimestepRange {
                t,
                lo: 1,
                hi: self.steps,
            });
        }
        Ok(())
    }
}

/// Dense row-stochastic matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    size: usize,
    data: Vec<f64>,
}

/// Product `Q_1 Q_2 ... Q_t`.
pub type CumulativeTransition = TransitionMatrix;

impl TransitionMatrix {
    pub fn identity(size: usize) -> Self {
        let mut data = vec![0.0; size * size];
        for i in 0..size {
            data[i * size + i] = 1.0;
        }
        Self { size, data }
    }

    pub fn from_rows(size: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != size * size {
            return Err(Error::Shape(format!("{} entries for {size}x{size}", data.len())));
        }
        Ok(Self { size, data })
    }

    pub fn size(&self) -> usize {
        self.size
    }
    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.data[from * self.size + to]
    }
    pub fn row(&self, from: usize) -> &[f64] {
        &self.data[from * self.size..(from + 1) * self.size]
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn matmul(&self, rhs: &TransitionMatrix) -> TransitionMatrix {
        let n = self.size;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    data[i * n + j] += a * rhs.data[k * n + j];
                }
            }
        }
        TransitionMatrix { size: n, data }
    }

    pub fn max_row_sum_error(&self) -> f64 {
        self.data
            .chunks_exact(self.size)
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Single-step matrix `Q_t`.
pub fn transition_matrix(
    schedule: &NoiseSchedule,
    t: usize,
    num_classes: usize,
) -> Result<TransitionMatrix> {
    schedule.check_step(t)?;
    Ok(step_matrix(
        num_classes,
        schedule.transition,
        schedule.beta(t),
        schedule.gamma(t),
    ))
}

fn step_matrix(k: usize, kind: TransitionKind, beta: f64, gamma: f64) -> TransitionMatrix {
    let n = kind.num_states(k);
    let mut data = vec![0.0; n * n];
    for i in 0..k {
        let row = &mut data[i * n..(i + 1) * n];
        for v in row.iter_mut().take(k) {
            *v = beta / k as f64;
        }
        row[i] += 1.0 - beta - gamma;
        if kind.uses_mask() {
            row[k] = gamma;
        }
    }
    if kind.uses_mask() {
        data[k * n + k] = 1.0;
    }
    TransitionMatrix { size: n, data }
}

/// `Q_1 ... Q_t`; `t = 0` gives the identity.
pub fn cumulative_transition(
    schedule: &NoiseSchedule,
    t: usize,
    num_classes: usize,
) -> Result<CumulativeTransition> {
    if t > schedule.steps {
        return Err(Error::TimestepRange {
            t,
            lo: 0,
            hi: schedule.steps,
        });
    }
    let mut acc = TransitionMatrix::identity(schedule.transition.num_states(num_classes));
    for s in 1..=t {
        acc = acc.matmul(&transition_matrix(schedule, s, num_classes)?);
    }
    Ok(acc)
}

/// A schedule with its single-step and cumulative matrices materialized for
/// every timestep.
#[derive(Clone, Debug)]
pub struct DiscreteDiffusion {
    schedule: NoiseSchedule,
    num_classes: usize,
    /// `steps[t - 1] = Q_t`.
    steps: Vec<TransitionMatrix>,
    /// `cumulative[t] = Q_1 ... Q_t`.
    cumulative: Vec<TransitionMatrix>,
}

fn sample_row(row: &[f64], rng: &mut Rng) -> u16 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j as u16;
        }
    }
    // Rounding left u above the final partial sum: take the last state with mass.
    row.iter().rposition(|&p| p > 0.0).unwrap_or(0) as u16
}

impl DiscreteDiffusion {
    pub fn new(schedule: NoiseSchedule, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        let steps: Vec<_> = (1..=schedule.steps)
            .map(|t| transition_matrix(&schedule, t, num_classes))
            .collect::<Result<_>>()?;
        let mut cumulative = vec![TransitionMatrix::identity(
            schedule.transition.num_states(num_classes),
        )];
        for q in &steps {
            let next = cumulative.last().unwrap().matmul(q);
            cumulative.push(next);
        }
        Ok(Self {
            schedule,
            num_classes,
            steps,
            cumulative,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
    pub fn num_states(&self) -> usize {
        self.schedule.transition.num_states(self.num_classes)
    }
    pub fn steps(&self) -> usize {
        self.schedule.steps
    }

    pub fn step_matrix(&self, t: usize) -> Result<&TransitionMatrix> {
        self.schedule.check_step(t)?;
        Ok(&self.steps[t - 1])
    }

    pub fn cumulative(&self, t: usize) -> Result<&CumulativeTransition> {
        self.cumulative.get(t).ok_or(Error::TimestepRange {
            t,
            lo: 0,
            hi: self.schedule.steps,
        })
    }

    /// `Q_{s+1} ... Q_t`, the transition from timestep `s` to `t`.
    pub fn composite(&self, s: usize, t: usize) -> Result<TransitionMatrix> {
        if s > t || t > self.schedule.steps {
            return Err(Error::InvalidArgument(format!("composite {s} -> {t}")));
        }
        let mut acc = TransitionMatrix::identity(self.num_states());
        for q in &self.steps[s..t] {
            acc = acc.matmul(q);
        }
        Ok(acc)
    }

    fn check_clean(&self, x0: &LabelGrid) -> Result<()> {
        if x0.num_classes() != self.num_classes {
            return Err(Error::Shape(format!(
                "grid has {} classes, process has {}",
                x0.num_classes(),
                self.num_classes
            )));
        }
        if x0.contains_mask() {
            return Err(Error::InvalidArgument("x_0 contains MASK tokens".into()));
        }
        Ok(())
    }

    fn noisy_grid(&self, like: &LabelGrid, values: Vec<u16>) -> LabelGrid {
        if self.schedule.transition.uses_mask() {
            LabelGrid::with_mask(like.height(), like.width(), self.num_classes, values)
        } else {
            LabelGrid::new(like.height(), like.width(), self.num_classes, values)
        }
        .expect("sampled states are in range")
    }

    /// Sample `x_t ~ q(x_t | x_0)` pixelwise.
    pub fn q_sample(&self, x0: &LabelGrid, t: usize, rng: &mut Rng) -> Result<LabelGrid> {
        self.check_clean(x0)?;
        let q = self.cumulative(t)?;
        if t == 0 {
            return Ok(self.noisy_grid(x0, x0.values().to_vec()));
        }
        let values = x0
            .values()
            .iter()
            .map(|&v| sample_row(q.row(v as usize), rng))
            .collect();
        Ok(self.noisy_grid(x0, values))
    }

    /// Free re-noising: draw the next state from `q(x_{t_next} | x0_pred)`,
    /// ignoring the current state.
    pub fn free_renoise(
        &self,
        x0_pred: &LabelGrid,
        t_next: usize,
        rng: &mut Rng,
    ) -> Result<LabelGrid> {
        self.q_sample(x0_pred, t_next, rng)
    }

    /// Draw `x_s ~ q(x_s | x_t, x_0)` pixelwise for `s < t`.
    pub fn sample_posterior_between(
        &self,
        x_t: &LabelGrid,
        x0: &LabelGrid,
        s: usize,
        t: usize,
        rng: &mut Rng,
    ) -> Result<LabelGrid> {
        let post = self.posterior_between(x_t, x0, s, t)?;
        let values = (0..x0.len())
            .map(|p| sample_row(post.pixel(p), rng))
            .collect();
        Ok(self.noisy_grid(x0, values))
    }

    /// Draw the maximal-noise starting state `x_T`.
    pub fn sample_prior(&self, height: usize, width: usize, rng: &mut Rng) -> LabelGrid {
        let row = self.cumulative[self.schedule.steps].row(0);
        let values = (0..height * width).map(|_| sample_row(row, rng)).collect();
        let like = LabelGrid::filled(height, width, self.num_classes, 0).expect("non-empty grid");
        self.noisy_grid(&like, values)
    }

    /// Exact posterior `q(x_{t-1} | x_t, x_0)`.
    pub fn posterior(&self, x_t: &LabelGrid, x0: &LabelGrid, t: usize) -> Result<CategoricalGrid> {
        self.schedule.check_step(t)?;
        self.posterior_between(x_t, x0, t - 1, t)
    }

    /// `q(x_s | x_t, x_0)` for `s < t`, using the composite transition from
    /// `s` to `t`.
    pub fn posterior_between(
        &self,
        x_t: &LabelGrid,
        x0: &LabelGrid,
        s: usize,
        t: usize,
    ) -> Result<CategoricalGrid> {
        self.check_clean(x0)?;
        if !x_t.same_shape(x0) {
            return Err(Error::Shape("x_t and x_0 differ in shape".into()));
        }
        if s >= t || t > self.schedule.steps {
            return Err(Error::TimestepRange {
                t,
                lo: s + 1,
                hi: self.schedule.steps,
            });
        }
        let n = self.num_states();
        let forward = if s + 1 == t {
            self.steps[s].clone()
        } else {
            self.composite(s, t)?
        };
        let q_s = &self.cumulative[s];
        let q_t = &self.cumulative[t];
        let mut probs = vec![0.0; x_t.len() * n];
        for (p, (&xt, &x0v)) in x_t.values().iter().zip(x0.values()).enumerate() {
            let (xt, x0v) = (xt as usize, x0v as usize);
            if xt >= n {
                return Err(Error::ClassRange {
                    value: xt,
                    num_classes: n,
                });
            }
            let denom = q_t.get(x0v, xt);
            if denom <= 0.0 {
                return Err(Error::ImpossibleState { pixel: p });
            }
            let out = &mut probs[p * n..(p + 1) * n];
            for (j, o) in out.iter_mut().enumerate() {
                *o = forward.get(j, xt) * q_s.get(x0v, j) / denom;
            }
        }
        Ok(CategoricalGrid::from_probs(x_t.height(), x_t.width(), n, probs))
    }

    /// Per-pixel `q(x_s | x_t, x0 = k)` for every real class `k`; `None` where
    /// `q(x_t | x0 = k) = 0`.
    fn candidate_posteriors(&self, xt: usize, s: usize) -> Vec<Option<Vec<f64>>> {
        let n = self.num_states();
        let forward = &self.steps[s];
        let q_s = &self.cumulative[s];
        let q_t = &self.cumulative[s + 1];
        (0..self.num_classes)
            .map(|k| {
                let denom = q_t.get(k, xt);
                (denom > 0.0).then(|| {
                    (0..n)
                        .map(|j| forward.get(j, xt) * q_s.get(k, j) / denom)
                        .collect()
                })
            })
            .collect()
    }

    /// `L_T = KL(q(x_T | x_0) || q(x_T))` against the stationary distribution,
    /// averaged over pixels.
    pub fn prior_kl(&self, x0: &LabelGrid) -> Result<f64> {
        self.check_clean(x0)?;
        let q_t = &self.cumulative[self.schedule.steps];
        // Stationary row: what every state converges to from class 0.
        let stationary = q_t.row(0);
        let total: f64 = x0
            .values()
            .iter()
            .map(|&v| kl(q_t.row(v as usize), stationary))
            .sum();
        Ok(total / x0.len() as f64)
    }
}

fn kl(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(&qi, _)| qi > 0.0)
        .map(|(&qi, &pi)| qi * (qi.ln() - pi.ln()))
        .sum()
}

/// Numerically stable softmax of one pixel's logits.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

fn check_pair(logits: &LogitsGrid, x0: &LabelGrid) -> Result<()> {
    if logits.height() != x0.height() || logits.width() != x0.width() {
        return Err(Error::Shape("logits and labels differ in shape".into()));
    }
    if logits.channels() != x0.num_classes() {
        return Err(Error::Shape(format!(
            "{} logit channels for {} classes",
            logits.channels(),
            x0.num_classes()
        )));
    }
    Ok(())
}

/// Mean per-pixel cross entropy `-log softmax(logits)[x0]`.
pub fn ce_loss(logits: &LogitsGrid, x0: &LabelGrid) -> Result<f64> {
    Ok(ce_loss_with_grad(logits, x0)?.0)
}

/// Cross entropy and its gradient with respect to the logits.
pub fn ce_loss_with_grad(logits: &LogitsGrid, x0: &LabelGrid) -> Result<(f64, Vec<f64>)> {
    check_pair(logits, x0)?;
    let n = x0.len() as f64;
    let k = logits.channels();
    let mut grad = vec![0.0; logits.values().len()];
    let mut loss = 0.0;
    for (p, (px, &y)) in logits.pixels().zip(x0.values()).enumerate() {
        let y = y as usize;
        loss += log_sum_exp(px) - px[y];
        let g = &mut grad[p * k..(p + 1) * k];
        for (gi, pi) in g.iter_mut().zip(softmax(px)) {
            *gi = pi / n;
        }
        g[y] -= 1.0 / n;
    }
    Ok((loss / n, grad))
}

impl DiscreteDiffusion {
    /// Model reverse distribution `p(x_{t-1} | x_t)` obtained by averaging the
    /// exact posterior over the model's softmax prediction of `x_0`.
    /// Infeasible candidates (`q(x_t | x0 = k) = 0`) are dropped and the
    /// remaining weights renormalized.
    pub fn model_reverse(&self, logits: &[f64], xt: usize, t: usize) -> Result<Vec<f64>> {
        self.schedule.check_step(t)?;
        let pi = softmax(logits);
        let cands = self.candidate_posteriors(xt, t - 1);
        Ok(reverse_from(&pi, &cands, self.num_states()).0)
    }

    /// The sampled-`t` term of the variational bound (`L_0` at `t = 1`,
    /// `L_{t-1}` otherwise), averaged over pixels.
    pub fn vlb_loss(
        &self,
        logits: &LogitsGrid,
        x_t: &LabelGrid,
        x0: &LabelGrid,
        t: usize,
    ) -> Result<f64> {
        Ok(self.vlb_loss_with_grad(logits, x_t, x0, t)?.0)
    }

    pub fn vlb_loss_with_grad(
        &self,
        logits: &LogitsGrid,
        x_t: &LabelGrid,
        x0: &LabelGrid,
        t: usize,
    ) -> Result<(f64, Vec<f64>)> {
        check_pair(logits, x0)?;
        if !x_t.same_shape(x0) {
            return Err(Error::Shape("x_t and x_0 differ in shape".into()));
        }
        let truth = self.posterior(x_t, x0, t)?;
        let k = self.num_classes;
        let n = self.num_states();
        let npix = x0.len() as f64;
        let mut grad = vec![0.0; logits.values().len()];
        let mut loss = 0.0;
        for (p, px) in logits.pixels().enumerate() {
            let xt = x_t.values()[p] as usize;
            let pi = softmax(px);
            let cands = self.candidate_posteriors(xt, t - 1);
            let (model, r, z) = reverse_from(&pi, &cands, n);
            // dL/dpi_k
            let mut g_pi = vec![0.0; k];
            if t == 1 {
                let y = x0.values()[p] as usize;
                loss += -model[y].ln();
                for (kk, g) in g_pi.iter_mut().enumerate() {
                    let a = cands[kk].as_ref().map_or(0.0, |c| c[y]);
                    let f = if cands[kk].is_some() { 1.0 } else { 0.0 };
                    *g = -a / r[y] + f / z;
                }
            } else {
                let q = truth.pixel(p);
                loss += kl(q, &model);
                for (kk, g) in g_pi.iter_mut().enumerate() {
                    let Some(c) = &cands[kk] else { continue };
                    let s: f64 = (0..n)
                        .filter(|&j| q[j] > 0.0)
                        .map(|j| q[j] * c[j] / r[j])
                        .sum();
                    *g = -s + 1.0;
                }
            }
            let mean: f64 = pi.iter().zip(&g_pi).map(|(a, b)| a * b).sum();
            for (i, gz) in grad[p * k..(p + 1) * k].iter_mut().enumerate() {
                *gz = pi[i] * (g_pi[i] - mean) / npix;
            }
        }
        Ok((loss / npix, grad))
    }
}

/// Returns `(p, r, z)` with `r = sum_k pi_k post_k` and `p = r / z`, where
/// `z` is the softmax mass on feasible candidates.
fn reverse_from(pi: &[f64], cands: &[Option<Vec<f64>>], n: usize) -> (Vec<f64>, Vec<f64>, f64) {
    let mut r = vec![0.0; n];
    let mut z = 0.0;
    for (w, c) in pi.iter().zip(cands) {
        if let Some(c) = c {
            z += w;
            for (rj, cj) in r.iter_mut().zip(c) {
                *rj += w * cj;
            }
        }
    }
    let p = r.iter().map(|v| v / z).collect();
    (p, r, z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> Rng {
        Rng::seed_from_u64(seed)
    }

    #[test]
    fn kind_names_roundtrip() {
        for k in [
            TransitionKind::ReplaceOnly,
            TransitionKind::MaskOnly,
            TransitionKind::ReplaceMask(0.5),
            TransitionKind::ReplaceMask(0.25),
        ] {
            assert_eq!(k.to_string().parse::<TransitionKind>().unwrap(), k);
        }
        assert!("hybrid:1.5".parse::<TransitionKind>().is_err());
        assert!("uniform".parse::<TransitionKind>().is_err());
        for k in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            assert_eq!(k.to_string().parse::<ScheduleKind>().unwrap(), k);
        }
    }

    /// Q_t written out from its definition, independent of `step_matrix`.
    fn oracle_step(k: usize, kind: TransitionKind, beta: f64, gamma: f64) -> Vec<Vec<f64>> {
        let n = kind.num_states(k);
        let mut m = vec![vec![0.0; n]; n];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if i == k {
                    if j == k { 1.0 } else { 0.0 }
                } else if j == k {
                    gamma
                } else {
                    let stay = if i == j { 1.0 - beta - gamma } else { 0.0 };
                    stay + beta / k as f64
                };
            }
        }
        m
    }

    fn oracle_chain(k: usize, sched: &NoiseSchedule, t: usize) -> Vec<Vec<f64>> {
        let kind = sched.transition();
        let n = kind.num_states(k);
        let mut acc: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        for s in 1..=t {
            let q = oracle_step(k, kind, sched.beta(s), sched.gamma(s));
            let mut next = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    next[i][j] = (0..n).map(|m| acc[i][m] * q[m][j]).sum();
                }
            }
            acc = next;
        }
        acc
    }

    fn random_schedule(steps: usize, kind: TransitionKind, seed: u64) -> NoiseSchedule {
        let mut r = rng(seed);
        let budget: Vec<f64> = (0..steps).map(|_| r.random_range(0.05..0.6)).collect();
        NoiseSchedule::from_corruption(&budget, kind).unwrap()
    }

    #[test]
    fn linear_schedule_values() {
        let s = build_schedule(ScheduleKind::Linear, 10, TransitionKind::ReplaceOnly).unwrap();
        assert!((s.alpha_bar(5) - 0.5).abs() < 1e-15);
        assert_eq!(s.alpha_bar(10), 0.0);
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=10 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.beta(t) + s.gamma(t) <= 1.0);
        }
        let one = build_schedule(ScheduleKind::Linear, 1, TransitionKind::ReplaceOnly).unwrap();
        assert_eq!(one.beta(1), 1.0);
        assert!(build_schedule(ScheduleKind::Linear, 0, TransitionKind::ReplaceOnly).is_err());
    }

    #[test]
    fn cosine_schedule_matches_closed_form() {
        let s = build_schedule(ScheduleKind::Cosine, 100, TransitionKind::ReplaceOnly).unwrap();
        let f = |t: f64| (((t / 100.0 + 0.008) / 1.008) * std::f64::consts::PI / 2.0).cos().powi(2);
        for t in [1usize, 10, 37, 50, 99] {
            let expect = f(t as f64) / f(0.0);
            assert!((s.alpha_bar(t) - expect).abs() < 1e-12, "t={t}");
        }
        assert!((s.alpha_bar(50) - 0.4937).abs() < 1e-3);
        assert_eq!(s.alpha_bar(100), 0.0);
        for t in 1..=100 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn replace_only_extremes() {
        let zero = NoiseSchedule::from_corruption(&[0.0], TransitionKind::ReplaceOnly).unwrap();
        assert_eq!(transition_matrix(&zero, 1, 4).unwrap(), TransitionMatrix::identity(4));
        let full = NoiseSchedule::from_corruption(&[1.0], TransitionKind::ReplaceOnly).unwrap();
        let q = transition_matrix(&full, 1, 4).unwrap();
        assert!(q.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(transition_matrix(&full, 2, 4).is_err());
        assert!(transition_matrix(&full, 0, 4).is_err());
    }

    #[test]
    fn step_matrices_match_definition() {
        for kind in [
            TransitionKind::ReplaceOnly,
            TransitionKind::MaskOnly,
            TransitionKind::ReplaceMask(0.5),
            TransitionKind::ReplaceMask(0.2),
        ] {
            let s = random_schedule(4, kind, 5);
            for t in 1..=4 {
                let q = transition_matrix(&s, t, 3).unwrap();
                let o = oracle_step(3, kind, s.beta(t), s.gamma(t));
                for (i, row) in o.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        assert!((q.get(i, j) - v).abs() < 1e-15);
                    }
                }
                assert!(q.max_row_sum_error() < 1e-12);
            }
        }
    }

    #[test]
    fn mask_only_monte_carlo() {
        let s = NoiseSchedule::from_corruption(&[0.3], TransitionKind::MaskOnly).unwrap();
        let proc = DiscreteDiffusion::new(s, 3).unwrap();
        let q = proc.step_matrix(1).unwrap().clone();
        let trials = 100_000usize;
        let mut r = rng(1);
        for start in 0..3u16 {
            let x0 = LabelGrid::filled(1, trials, 3, start).unwrap();
            let xt = proc.q_sample(&x0, 1, &mut r).unwrap();
            let mut counts = [0usize; 4];
            for &v in xt.values() {
                counts[v as usize] += 1;
            }
            for j in 0..4 {
                let p = q.get(start as usize, j);
                let sd = (trials as f64 * p * (1.0 - p)).sqrt();
                assert!((counts[j] as f64 - trials as f64 * p).abs() <= 3.0 * sd + 1e-9);
            }
            // Never moves to another real class.
            assert!(xt.values().iter().all(|&v| v == start || v == 3));
        }
    }

    #[test]
    fn cumulative_matches_chain_oracle() {
        for kind in [
            TransitionKind::ReplaceOnly,
            TransitionKind::MaskOnly,
            TransitionKind::ReplaceMask(0.5),
        ] {
            for k in 2..=5 {
                for steps in [1usize, 3, 10] {
                    let s = random_schedule(steps, kind, (k * 31 + steps) as u64);
                    for t in 0..=steps {
                        let c = cumulative_transition(&s, t, k).unwrap();
                        let o = oracle_chain(k, &s, t);
                        for (i, row) in o.iter().enumerate() {
                            for (j, v) in row.iter().enumerate() {
                                assert!((c.get(i, j) - v).abs() < 1e-10);
                            }
                        }
                        assert!(c.max_row_sum_error() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn cumulative_endpoints() {
        let s = build_schedule(ScheduleKind::Linear, 10, TransitionKind::ReplaceOnly).unwrap();
        assert_eq!(cumulative_transition(&s, 0, 4).unwrap(), TransitionMatrix::identity(4));
        let full = cumulative_transition(&s, 10, 4).unwrap();
        assert!(full.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
        assert!(cumulative_transition(&s, 11, 4).is_err());
    }

    #[test]
    fn q_sample_examples() {
        let s = build_schedule(ScheduleKind::Linear, 10, TransitionKind::ReplaceOnly).unwrap();
        let proc = DiscreteDiffusion::new(s, 4).unwrap();
        let mut r = rng(2);
        let x0 = LabelGrid::new(2, 2, 4, vec![0, 1, 2, 3]).unwrap();
        assert_eq!(proc.q_sample(&x0, 0, &mut r).unwrap(), x0);

        let n = 100_000;
        let x0 = LabelGrid::filled(1, n, 4, 2).unwrap();
        let xt = proc.q_sample(&x0, 10, &mut r).unwrap();
        let mut counts = [0usize; 4];
        xt.values().iter().for_each(|&v| counts[v as usize] += 1);
        let sd = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * 0.25).abs() <= 3.0 * sd);
        }
        assert!(!xt.contains_mask());
    }

    #[test]
    fn two_state_chain_keeps_three_quarters() {
        // K = 2 with cumulative replace probability 0.5: enumerate the two
        // outcomes of the replacement draw by hand: keep (0.5) or resample
        // uniformly and land on the same class (0.5 * 0.5).
        let s = NoiseSchedule::from_corruption(&[0.5], TransitionKind::ReplaceOnly).unwrap();
        let proc = DiscreteDiffusion::new(s, 2).unwrap();
        assert!((proc.cumulative(1).unwrap().get(0, 0) - 0.75).abs() < 1e-15);
        let n = 100_000;
        let x0 = LabelGrid::filled(1, n, 2, 1).unwrap();
        let xt = proc.q_sample(&x0, 1, &mut rng(3)).unwrap();
        let same = xt.values().iter().filter(|&&v| v == 1).count() as f64;
        let sd = (n as f64 * 0.75 * 0.25).sqrt();
        assert!((same - 0.75 * n as f64).abs() <= 3.0 * sd);
    }

    #[test]
    fn posterior_examples() {
        let s = build_schedule(ScheduleKind::Linear, 5, TransitionKind::ReplaceOnly).unwrap();
        let proc = DiscreteDiffusion::new(s, 3).unwrap();
        let x0 = LabelGrid::new(1, 3, 3, vec![0, 1, 2]).unwrap();
        let xt = LabelGrid::new(1, 3, 3, vec![2, 1, 0]).unwrap();
        let post = proc.posterior(&xt, &x0, 1).unwrap();
        for p in 0..3 {
            let mut expect = [0.0; 3];
            expect[x0.values()[p] as usize] = 1.0;
            assert_eq!(post.pixel(p), &expect);
        }
        let ident = NoiseSchedule::from_corruption(&[0.4, 0.0], TransitionKind::ReplaceOnly).unwrap();
        let proc = DiscreteDiffusion::new(ident, 3).unwrap();
        let post = proc.posterior(&xt, &x0, 2).unwrap();
        for p in 0..3 {
            let mut expect = [0.0; 3];
            expect[xt.values()[p] as usize] = 1.0;
            for j in 0..3 {
                assert!((post.pixel(p)[j] - expect[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn posterior_matches_bayes_enumeration() {
        for kind in [TransitionKind::ReplaceOnly, TransitionKind::ReplaceMask(0.5)] {
            let k = 3;
            let steps = 6;
            let s = random_schedule(steps, kind, 17);
            let proc = DiscreteDiffusion::new(s.clone(), k).unwrap();
            let n = kind.num_states(k);
            for t in 1..=steps {
                let step = oracle_step(k, kind, s.beta(t), s.gamma(t));
                let prev = oracle_chain(k, &s, t - 1);
                for x0v in 0..k {
                    for xtv in 0..n {
                        // Bayes: q(x_t | x_{t-1}) q(x_{t-1} | x_0) / q(x_t | x_0)
                        let joint: Vec<f64> =
                            (0..n).map(|j| step[j][xtv] * prev[x0v][j]).collect();
                        let evidence: f64 = joint.iter().sum();
                        let x0g = LabelGrid::new(1, 1, k, vec![x0v as u16]).unwrap();
                        let xtg = if kind.uses_mask() {
                            LabelGrid::with_mask(1, 1, k, vec![xtv as u16]).unwrap()
                        } else {
                            LabelGrid::new(1, 1, k, vec![xtv as u16]).unwrap()
                        };
                        let post = proc.posterior(&xtg, &x0g, t);
                        if evidence == 0.0 {
                            assert!(matches!(post, Err(Error::ImpossibleState { .. })));
                            continue;
                        }
                        let post = post.unwrap();
                        for j in 0..n {
                            assert!((post.pixel(0)[j] - joint[j] / evidence).abs() < 1e-12);
                        }
                        assert!(post.max_normalization_error() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn chapman_kolmogorov() {
        for kind in [TransitionKind::ReplaceOnly, TransitionKind::MaskOnly, TransitionKind::ReplaceMask(0.3)] {
            for k in 2..=4 {
                let s = random_schedule(5, kind, k as u64);
                let proc = DiscreteDiffusion::new(s, k).unwrap();
                let n = proc.num_states();
                for t in 1..=5 {
                    for x0v in 0..k {
                        let x0 = LabelGrid::new(1, 1, k, vec![x0v as u16]).unwrap();
                        let mut marg = vec![0.0; n];
                        for xtv in 0..n {
                            let w = proc.cumulative(t).unwrap().get(x0v, xtv);
                            if w == 0.0 {
                                continue;
                            }
                            let xt = LabelGrid::with_mask(1, 1, k, vec![xtv as u16]).unwrap();
                            let post = proc.posterior(&xt, &x0, t).unwrap();
                            for j in 0..n {
                                marg[j] += w * post.pixel(0)[j];
                            }
                        }
                        let target = proc.cumulative(t - 1).unwrap().row(x0v);
                        for j in 0..n {
                            assert!((marg[j] - target[j]).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn posterior_between_strided_matches_bayes() {
        let s = random_schedule(6, TransitionKind::ReplaceOnly, 9);
        let proc = DiscreteDiffusion::new(s.clone(), 3).unwrap();
        let (lo, hi) = (2, 5);
        let from_lo = oracle_chain(3, &s, lo);
        let from_0_hi = oracle_chain(3, &s, hi);
        // composite lo -> hi by brute force
        let mut comp = vec![vec![0.0; 3]; 3];
        for (i, row) in comp.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                // q(x_hi = j | x_lo = i) via Bayes on chains: sum over paths
                let mut acc: Vec<f64> = (0..3).map(|m| if m == i { 1.0 } else { 0.0 }).collect();
                for t in lo + 1..=hi {
                    let q = oracle_step(3, s.transition(), s.beta(t), s.gamma(t));
                    acc = (0..3).map(|b| (0..3).map(|a| acc[a] * q[a][b]).sum()).collect();
                }
                *v = acc[j];
            }
        }
        for x0v in 0..3u16 {
            for xtv in 0..3u16 {
                let x0 = LabelGrid::new(1, 1, 3, vec![x0v]).unwrap();
                let xt = LabelGrid::new(1, 1, 3, vec![xtv]).unwrap();
                let post = proc.posterior_between(&xt, &x0, lo, hi).unwrap();
                let ev = from_0_hi[x0v as usize][xtv as usize];
                for j in 0..3 {
                    let e = comp[j][xtv as usize] * from_lo[x0v as usize][j] / ev;
                    assert!((post.pixel(0)[j] - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mask_only_never_swaps_real_classes_and_replace_never_masks() {
        let mut r = rng(4);
        let x0 = LabelGrid::new(1, 6, 3, vec![0, 1, 2, 0, 1, 2]).unwrap();
        let m = DiscreteDiffusion::new(
            build_schedule(ScheduleKind::Linear, 8, TransitionKind::MaskOnly).unwrap(),
            3,
        )
        .unwrap();
        let ro = DiscreteDiffusion::new(
            build_schedule(ScheduleKind::Linear, 8, TransitionKind::ReplaceOnly).unwrap(),
            3,
        )
        .unwrap();
        for t in 0..=8 {
            for _ in 0..50 {
                let xm = m.q_sample(&x0, t, &mut r).unwrap();
                for (a, b) in xm.values().iter().zip(x0.values()) {
                    assert!(a == b || *a == 3);
                }
                assert!(!ro.q_sample(&x0, t, &mut r).unwrap().contains_mask());
            }
        }
        let prior = m.sample_prior(2, 3, &mut r);
        assert!(prior.values().iter().all(|&v| v == 3));
    }

    #[test]
    fn ce_loss_examples() {
        let x0 = LabelGrid::new(1, 3, 4, vec![0, 3, 1]).unwrap();
        let confident = crate::grids::one_hot_logits(&x0, 20.0);
        assert!(ce_loss(&confident, &x0).unwrap() < 1e-8);
        let uniform = LogitsGrid::zeros(1, 3, 4);
        assert!((ce_loss(&uniform, &x0).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((4f64.ln() - 1.386294).abs() < 1e-6);

        let mut r = rng(8);
        let vals: Vec<f64> = (0..12).map(|_| r.random_range(-2.0..2.0)).collect();
        let l = LogitsGrid::new(1, 3, 4, vals.clone()).unwrap();
        let mut expect = 0.0;
        for p in 0..3 {
            let px = &vals[p * 4..p * 4 + 4];
            let denom: f64 = px.iter().map(|v| v.exp()).sum();
            expect += -(px[x0.values()[p] as usize].exp() / denom).ln();
        }
        assert!((ce_loss(&l, &x0).unwrap() - expect / 3.0).abs() < 1e-12);
    }

    fn finite_diff<F: Fn(&LogitsGrid) -> f64>(l: &LogitsGrid, f: F) -> Vec<f64> {
        let h = 1e-6;
        (0..l.values().len())
            .map(|i| {
                let mut a = l.values().to_vec();
                let mut b = l.values().to_vec();
                a[i] += h;
                b[i] -= h;
                let la = LogitsGrid::new(l.height(), l.width(), l.channels(), a).unwrap();
                let lb = LogitsGrid::new(l.height(), l.width(), l.channels(), b).unwrap();
                (f(&la) - f(&lb)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut r = rng(12);
        let x0 = LabelGrid::new(2, 2, 3, vec![0, 2, 1, 1]).unwrap();
        let l = LogitsGrid::new(2, 2, 3, (0..12).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
        let (_, g) = ce_loss_with_grad(&l, &x0).unwrap();
        let fd = finite_diff(&l, |l| ce_loss(l, &x0).unwrap());
        for (a, b) in g.iter().zip(fd) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn vlb_zero_for_matched_model() {
        let s = build_schedule(ScheduleKind::Linear, 6, TransitionKind::ReplaceOnly).unwrap();
        let proc = DiscreteDiffusion::new(s, 3).unwrap();
        let x0 = LabelGrid::new(1, 3, 3, vec![0, 1, 2]).unwrap();
        let mut r = rng(5);
        for t in 2..=6 {
            let xt = proc.q_sample(&x0, t, &mut r).unwrap();
            let l = crate::grids::one_hot_logits(&x0, 60.0);
            assert!(proc.vlb_loss(&l, &xt, &x0, t).unwrap().abs() < 1e-12);
        }
        assert!(proc.prior_kl(&x0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn vlb_matches_enumeration_oracle() {
        let k = 3;
        let steps = 5;
        let s = random_schedule(steps, TransitionKind::ReplaceOnly, 23);
        let proc = DiscreteDiffusion::new(s.clone(), k).unwrap();
        let mut r = rng(6);
        for t in 1..=steps {
            for x0v in 0..k {
                for xtv in 0..k {
                    let logits: Vec<f64> = (0..k).map(|_| r.random_range(-2.0..2.0)).collect();
                    let z: f64 = logits.iter().map(|v| v.exp()).sum();
                    let pi: Vec<f64> = logits.iter().map(|v| v.exp() / z).collect();
                    let step = oracle_step(k, s.transition(), s.beta(t), s.gamma(t));
                    let prev = oracle_chain(k, &s, t - 1);
                    let bayes = |x0c: usize| -> Vec<f64> {
                        let joint: Vec<f64> = (0..k).map(|j| step[j][xtv] * prev[x0c][j]).collect();
                        let e: f64 = joint.iter().sum();
                        joint.iter().map(|v| v / e).collect()
                    };
                    let model: Vec<f64> = (0..k)
                        .map(|j| (0..k).map(|c| pi[c] * bayes(c)[j]).sum())
                        .collect();
                    let expect = if t == 1 {
                        -model[x0v].ln()
                    } else {
                        let q = bayes(x0v);
                        (0..k).filter(|&j| q[j] > 0.0).map(|j| q[j] * (q[j] / model[j]).ln()).sum()
                    };
                    let lg = LogitsGrid::new(1, 1, k, logits).unwrap();
                    let x0 = LabelGrid::new(1, 1, k, vec![x0v as u16]).unwrap();
                    let xt = LabelGrid::new(1, 1, k, vec![xtv as u16]).unwrap();
                    let got = proc.vlb_loss(&lg, &xt, &x0, t).unwrap();
                    assert!((got - expect).abs() < 1e-12, "t={t} got {got} expect {expect}");
                    assert!(got >= -1e-15);
                }
            }
        }
    }

    #[test]
    fn vlb_gradient_matches_finite_differences() {
        for kind in [TransitionKind::ReplaceOnly, TransitionKind::ReplaceMask(0.5)] {
            let s = random_schedule(4, kind, 31);
            let proc = DiscreteDiffusion::new(s, 3).unwrap();
            let mut r = rng(13);
            let x0 = LabelGrid::new(1, 4, 3, vec![0, 1, 2, 1]).unwrap();
            for t in 1..=4 {
                let xt = proc.q_sample(&x0, t, &mut r).unwrap();
                let l = LogitsGrid::new(1, 4, 3, (0..12).map(|_| r.random_range(-2.0..2.0)).collect())
                    .unwrap();
                let (_, g) = proc.vlb_loss_with_grad(&l, &xt, &x0, t).unwrap();
                let fd = finite_diff(&l, |l| proc.vlb_loss(l, &xt, &x0, t).unwrap());
                for (a, b) in g.iter().zip(fd) {
                    assert!((a - b).abs() < 1e-6, "t={t}: {a} vs {b}");
                }
            }
        }
    }
}
