//! Stage-one base segmentation: a deliberately small convnet that maps an
//! image to 1/4-scale features and class logits, and a corruption oracle
//! that fabricates predictions of controlled quality from ground truth.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint::{self, ConfigBlock, Container};
use crate::discrete::ce_loss_with_grad;
use crate::error::{Error, Result};
use crate::grids::{encode_quarter, FeatureGrid, ImageGrid, LabelGrid, LogitsGrid, CODEC_FACTOR};
use crate::nn::{self, Act, Adam, ParamSet};
use crate::seed::{domain, rng_for, Rng};
use crate::synthdata::SamplePair;

pub const CHECKPOINT_MAGIC: &[u8] = b"DDPSSEG";

/// Default feature width handed to the denoiser.
pub const DEFAULT_FEATURE_CHANNELS: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentorConfig {
    pub num_classes: usize,
    pub feature_channels: usize,
    pub residual_blocks: usize,
}

impl SegmentorConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            feature_channels: DEFAULT_FEATURE_CHANNELS,
            residual_blocks: 2,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.feature_channels == 0 {
            return Err(Error::Config("segmentor needs K >= 2 and C >= 1".into()));
        }
        Ok(())
    }
}

const PATCH: usize = CODEC_FACTOR;
const PATCH_INPUTS: usize = PATCH * PATCH * 3;

/// Weights of the base segmentor: a stride-4 patch stem, residual 3x3
/// blocks and a 1x1 classifier. Once frozen, gradient updates are refused.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentorParams {
    config: SegmentorConfig,
    tensors: ParamSet<f32>,
    frozen: bool,
}

struct BlockTape {
    input: Act<f32>,
    h1: Act<f32>,
    a2: Act<f32>,
}

struct Tape {
    patches: Act<f32>,
    blocks: Vec<BlockTape>,
    features: Act<f32>,
}

impl SegmentorParams {
    fn layout(config: &SegmentorConfig) -> ParamSet<f32> {
        let c = config.feature_channels;
        let mut ps = ParamSet::new();
        ps.push("stem.weight", &[PATCH_INPUTS, c]);
        ps.push("stem.bias", &[c]);
        for b in 0..config.residual_blocks {
            ps.push(format!("block{b}.conv1.weight"), &[9, c, c]);
            ps.push(format!("block{b}.conv1.bias"), &[c]);
            ps.push(format!("block{b}.conv2.weight"), &[9, c, c]);
            ps.push(format!("block{b}.conv2.bias"), &[c]);
        }
        ps.push("head.weight", &[c, config.num_classes]);
        ps.push("head.bias", &[config.num_classes]);
        ps
    }

    pub fn zeros(config: SegmentorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            tensors: Self::layout(&config),
            config,
            frozen: false,
        })
    }

    /// Variance `1/fan_in` weights; the second conv of each residual block
    /// starts small so blocks begin near the identity.
    pub fn init(config: SegmentorConfig, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        for t in &mut p.tensors.tensors {
            if t.name.ends_with(".bias") {
                continue;
            }
            let fan_in: usize = t.shape[..t.shape.len() - 1].iter().product();
            let mut std = 1.0 / (fan_in as f64).sqrt();
            if t.name.ends_with("conv2.weight") {
                std *= 0.1;
            }
            nn::normal_fill(&mut t.data, std, rng);
        }
        Ok(p)
    }

    pub fn config(&self) -> &SegmentorConfig {
        &self.config
    }

    pub fn tensors(&self) -> &ParamSet<f32> {
        &self.tensors
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    fn t(&self, i: usize) -> &[f32] {
        self.tensors.get(i)
    }

    fn patchify(image: &ImageGrid) -> Result<Act<f32>> {
        let (h, w) = (image.height(), image.width());
        if h % PATCH != 0 || w % PATCH != 0 {
            return Err(Error::NotDivisible {
                height: h,
                width: w,
                factor: PATCH,
            });
        }
        let (qh, qw) = (h / PATCH, w / PATCH);
        let mut out = Act::zeros(qh, qw, PATCH_INPUTS);
        let px = image.values();
        for qy in 0..qh {
            for qx in 0..qw {
                let cell = &mut out.data[(qy * qw + qx) * PATCH_INPUTS..(qy * qw + qx + 1) * PATCH_INPUTS];
                for dy in 0..PATCH {
                    for dx in 0..PATCH {
                        let src = ((qy * PATCH + dy) * w + qx * PATCH + dx) * 3;
                        let dst = (dy * PATCH + dx) * 3;
                        cell[dst..dst + 3].copy_from_slice(&px[src..src + 3]);
                    }
                }
            }
        }
        Ok(out)
    }

    fn forward_tape(&self, image: &ImageGrid) -> Result<(Act<f32>, Tape)> {
        let patches = Self::patchify(image)?;
        let mut x = nn::conv1x1(&patches, self.t(0), self.t(1));
        let mut blocks = Vec::with_capacity(self.config.residual_blocks);
        for b in 0..self.config.residual_blocks {
            let base = 2 + 4 * b;
            let a1 = nn::silu(&x);
            let h1 = nn::conv3x3(&a1, self.t(base), self.t(base + 1));
            let a2 = nn::silu(&h1);
            let mut out = nn::conv3x3(&a2, self.t(base + 2), self.t(base + 3));
            out.add_assign(&x);
            blocks.push(BlockTape { input: x, h1, a2 });
            x = out;
        }
        let head = 2 + 4 * self.config.residual_blocks;
        let logits = nn::conv1x1(&x, self.t(head), self.t(head + 1));
        Ok((
            logits,
            Tape {
                patches,
                blocks,
                features: x,
            },
        ))
    }

    fn backward(&self, tape: &Tape, dlogits: &Act<f32>) -> ParamSet<f32> {
        let mut g = self.tensors.zeros_like();
        let head = 2 + 4 * self.config.residual_blocks;
        let mut dx = {
            let (dw, db) = two_mut(&mut g, head, head + 1);
            nn::conv1x1_backward(&tape.features, self.t(head), dlogits, dw, db, true).expect("dx requested")
        };
        for b in (0..self.config.residual_blocks).rev() {
            let base = 2 + 4 * b;
            let bt = &tape.blocks[b];
            let da2 = {
                let (dw, db) = two_mut(&mut g, base + 2, base + 3);
                nn::conv3x3_backward(&bt.a2, self.t(base + 2), &dx, dw, db, true).expect("dx requested")
            };
            let dh1 = nn::silu_backward(&bt.h1, &da2);
            let a1 = nn::silu(&bt.input);
            let da1 = {
                let (dw, db) = two_mut(&mut g, base, base + 1);
                nn::conv3x3_backward(&a1, self.t(base), &dh1, dw, db, true).expect("dx requested")
            };
            dx.add_assign(&nn::silu_backward(&bt.input, &da1));
        }
        let (dw, db) = two_mut(&mut g, 0, 1);
        nn::conv1x1_backward(&tape.patches, self.t(0), &dx, dw, db, false);
        g
    }

    /// Loss and gradient of the mean cross-entropy against the 1/4-scale
    /// encoding of `labels`.
    pub fn gradient(&self, image: &ImageGrid, labels: &LabelGrid) -> Result<(f64, ParamSet<f32>)> {
        let target = encode_quarter(labels)?;
        let (logits, tape) = self.forward_tape(image)?;
        let lg = to_logits(&logits)?;
        let (loss, dl) = ce_loss_with_grad(&lg, &target)?;
        let dout = Act {
            data: dl.into_iter().map(|v| v as f32).collect(),
            ..logits
        };
        Ok((loss, self.backward(&tape, &dout)))
    }

    /// Apply one optimizer step; refused once the parameters are frozen.
    pub fn apply_gradients(&mut self, adam: &mut Adam<f32>, grads: &ParamSet<f32>, lr: f64) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        adam.update(&mut self.tensors, grads, lr);
        Ok(())
    }

    fn config_block(&self) -> ConfigBlock {
        ConfigBlock {
            entries: vec![
                ("num_classes".into(), self.config.num_classes.to_string()),
                ("feature_channels".into(), self.config.feature_channels.to_string()),
                ("residual_blocks".into(), self.config.residual_blocks.to_string()),
            ],
        }
    }

    /// Freeze and write the checkpoint.
    pub fn export(&mut self, path: &Path) -> Result<()> {
        self.freeze();
        checkpoint::write_file(path, CHECKPOINT_MAGIC, &self.config_block(), &self.tensors)
    }

    /// Load a checkpoint; loaded parameters are always frozen.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(checkpoint::read_file(path, CHECKPOINT_MAGIC)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(checkpoint::decode(CHECKPOINT_MAGIC, bytes)?)
    }

    fn from_container(c: Container) -> Result<Self> {
        let config = SegmentorConfig {
            num_classes: c.config.get("num_classes")?,
            feature_channels: c.config.get("feature_channels")?,
            residual_blocks: c.config.get("residual_blocks")?,
        };
        let mut p = Self::zeros(config)?;
        if !p.tensors.same_layout(&c.tensors) {
            return Err(Error::Format("segmentor tensors do not match config".into()));
        }
        p.tensors = c.tensors;
        p.frozen = true;
        Ok(p)
    }
}

fn two_mut(g: &mut ParamSet<f32>, a: usize, b: usize) -> (&mut [f32], &mut [f32]) {
    debug_assert!(a < b);
    let (lo, hi) = g.tensors.split_at_mut(b);
    (&mut lo[a].data, &mut hi[0].data)
}

fn to_logits(a: &Act<f32>) -> Result<LogitsGrid> {
    LogitsGrid::new(a.h, a.w, a.c, a.data.iter().map(|&v| v as f64).collect())
}

/// Features (pre-classifier activations) and logits, both at 1/4 scale.
pub fn base_forward(image: &ImageGrid, params: &SegmentorParams) -> Result<(FeatureGrid, LogitsGrid)> {
    let (logits, tape) = params.forward_tape(image)?;
    let f = tape.features;
    Ok((FeatureGrid::new(f.h, f.w, f.c, f.data)?, to_logits(&logits)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 600,
            batch_size: 8,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// Train a fresh segmentor with Adam on random mini-batches. Returns the
/// parameters (not yet frozen) and the per-iteration loss.
pub fn train_base(
    dataset: &[SamplePair],
    num_classes: usize,
    config: &BaseTrainConfig,
) -> Result<(SegmentorParams, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rng = rng_for(config.seed, domain::BASE_TRAIN, 0);
    let mut params = SegmentorParams::init(SegmentorConfig::new(num_classes), &mut rng)?;
    let mut adam = Adam::new(&params.tensors);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let mut total = params.tensors.zeros_like();
        let mut loss = 0.0;
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let s = &dataset[order[cursor]];
            cursor += 1;
            let (l, g) = params.gradient(&s.image, &s.labels)?;
            loss += l;
            total.add_assign(&g);
        }
        let n = config.batch_size as f64;
        loss /= n;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration });
        }
        total.scale(1.0 / n as f32);
        params.apply_gradients(&mut adam, &total, config.lr)?;
        losses.push(loss);
    }
    Ok((params, losses))
}

/// Tunables of the corruption oracle.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleConfig {
    /// Total feature channels; the first K carry the one-hot prediction.
    pub feature_channels: usize,
    /// Logit gap between the predicted class and the rest.
    pub margin: f64,
    /// Standard deviation of the non-informative feature channels.
    pub feature_noise: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            feature_channels: DEFAULT_FEATURE_CHANNELS,
            margin: 4.0,
            feature_noise: 1.0,
        }
    }
}

fn neighbours(p: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (y, x) = (p / w, p % w);
    [
        (y > 0).then(|| p - w),
        (y + 1 < h).then(|| p + w),
        (x > 0).then(|| p - 1),
        (x + 1 < w).then(|| p + 1),
    ]
    .into_iter()
    .flatten()
}

fn fill_box(vals: &mut [u16], h: usize, w: usize, cy: usize, cx: usize, r: usize, class: u16) {
    for y in cy.saturating_sub(r)..(cy + r + 1).min(h) {
        for x in cx.saturating_sub(r)..(cx + r + 1).min(w) {
            vals[y * w + x] = class;
        }
    }
}

/// Damage a label map with the error types a weak segmentor makes: whole
/// objects confused with another class, hollow interiors, spurious blobs,
/// jagged boundaries and, at high severity, pixel-level noise. Severity 0
/// returns `gt`; severity 1 returns i.i.d. uniform labels.
pub fn corrupt_labels(gt: &LabelGrid, severity: f64, rng: &mut Rng) -> Result<LabelGrid> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::InvalidArgument(format!("severity {severity} outside [0, 1]")));
    }
    if gt.contains_mask() {
        return Err(Error::InvalidArgument("ground truth contains MASK".into()));
    }
    let (h, w, k) = (gt.height(), gt.width(), gt.num_classes());
    let s = severity;
    let mut vals = gt.values().to_vec();
    if s > 0.0 {
        let comps = crate::synthdata::components(gt);
        for (class, comp) in &comps {
            if *class == 0 {
                continue;
            }
            // Inter-class ambiguity: the whole object takes another label.
            if rng.random_bool(0.3 * s) {
                let other = (*class as usize + rng.random_range(1..k)) % k;
                for &p in comp {
                    vals[p] = other as u16;
                }
            }
            // Hollow interiors: holes punched into sufficiently large objects.
            if comp.len() >= 9 {
                for _ in 0..3 {
                    if rng.random_bool(s) {
                        let p = comp[rng.random_range(0..comp.len())];
                        let r = rng.random_range(0..=1 + (s * 1.5) as usize);
                        fill_box(&mut vals, h, w, p / w, p % w, r, 0);
                    }
                }
            }
        }
        // Spurious blobs anywhere in the scene.
        for _ in 0..4 {
            if rng.random_bool(0.5 * s) {
                let p = rng.random_range(0..h * w);
                let r = rng.random_range(0..=1);
                let class = rng.random_range(1..k) as u16;
                fill_box(&mut vals, h, w, p / w, p % w, r, class);
            }
        }
        // Jagged boundaries: boundary pixels bleed into a neighbour's class.
        let snapshot = vals.clone();
        for p in 0..h * w {
            let differing: Vec<u16> = neighbours(p, h, w)
                .map(|q| snapshot[q])
                .filter(|&c| c != snapshot[p])
                .collect();
            if !differing.is_empty() && rng.random_bool(0.5 * s) {
                vals[p] = differing[rng.random_range(0..differing.len())];
            }
        }
        // Pixel noise, reaching pure chance at severity 1.
        let p_random = s * s;
        for v in &mut vals {
            if rng.random_bool(p_random) {
                *v = rng.random_range(0..k) as u16;
            }
        }
    }
    LabelGrid::new(h, w, k, vals)
}

/// Fabricate base-segmentor outputs from 1/4-scale ground truth: logits
/// whose argmax is `corrupt_labels(gt, severity)` and features carrying its
/// one-hot encoding followed by noise channels.
pub fn corrupt_oracle(
    gt: &LabelGrid,
    severity: f64,
    config: &OracleConfig,
    rng: &mut Rng,
) -> Result<(FeatureGrid, LogitsGrid)> {
    let k = gt.num_classes();
    if config.feature_channels < k {
        return Err(Error::Config(format!(
            "oracle needs at least {k} feature channels, got {}",
            config.feature_channels
        )));
    }
    let pred = corrupt_labels(gt, severity, rng)?;
    let m = config.margin;
    let mut logits = Vec::with_capacity(pred.len() * k);
    for &c in pred.values() {
        for j in 0..k {
            // Jitter stays below half the margin, so the argmax is `pred`.
            let jitter = rng.random_range(-0.45..0.45) * m;
            logits.push(if j == c as usize { m + jitter } else { jitter });
        }
    }
    let c = config.feature_channels;
    let mut features = Vec::with_capacity(pred.len() * c);
    for &p in pred.values() {
        for j in 0..c {
            if j < k {
                features.push(if j == p as usize { 1.0 } else { 0.0 });
            } else {
                let z: f64 = StandardNormal.sample(rng);
                features.push((z * config.feature_noise) as f32);
            }
        }
    }
    Ok((
        FeatureGrid::new(pred.height(), pred.width(), c, features)?,
        LogitsGrid::new(pred.height(), pred.width(), k, logits)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::argmax_labels;
    use rand::SeedableRng;

    fn image(h: usize, w: usize, seed: u64) -> ImageGrid {
        let mut r = Rng::seed_from_u64(seed);
        ImageGrid::new(h, w, (0..h * w * 3).map(|_| r.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn shapes_and_zero_weights() {
        let p = SegmentorParams::zeros(SegmentorConfig::new(4)).unwrap();
        let (f, l) = base_forward(&image(16, 8, 1), &p).unwrap();
        assert_eq!((f.height(), f.width(), f.channels()), (4, 2, 32));
        assert_eq!((l.height(), l.width(), l.channels()), (4, 2, 4));
        assert!(f.values().iter().all(|&v| v == 0.0));
        assert!(l.values().iter().all(|&v| v == 0.0));
        assert!(base_forward(&image(6, 8, 1), &p).is_err());
    }

    #[test]
    fn deterministic_forward() {
        let p = SegmentorParams::init(SegmentorConfig::new(3), &mut Rng::seed_from_u64(2)).unwrap();
        let img = image(8, 8, 3);
        assert_eq!(base_forward(&img, &p).unwrap(), base_forward(&img, &p).unwrap());
    }

    #[test]
    fn logits_are_classifier_of_features() {
        let p = SegmentorParams::init(SegmentorConfig::new(3), &mut Rng::seed_from_u64(4)).unwrap();
        let (f, l) = base_forward(&image(8, 8, 5), &p).unwrap();
        let head = 2 + 4 * p.config.residual_blocks;
        let act = Act { h: f.height(), w: f.width(), c: f.channels(), data: f.values().to_vec() };
        let again = nn::conv1x1(&act, p.t(head), p.t(head + 1));
        assert_eq!(to_logits(&again).unwrap(), l);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = SegmentorConfig { num_classes: 3, feature_channels: 4, residual_blocks: 1 };
        let p = SegmentorParams::init(cfg, &mut Rng::seed_from_u64(6)).unwrap();
        let img = image(8, 8, 7);
        let mut r = Rng::seed_from_u64(8);
        let labels = LabelGrid::new(8, 8, 3, (0..64).map(|_| r.random_range(0..3)).collect()).unwrap();
        let (_, g) = p.gradient(&img, &labels).unwrap();
        let target = encode_quarter(&labels).unwrap();
        let loss = |p: &SegmentorParams| {
            let (_, l) = base_forward(&img, p).unwrap();
            crate::discrete::ce_loss(&l, &target).unwrap()
        };
        // Spot-check a few entries of every tensor in f32.
        for ti in 0..p.tensors.tensors.len() {
            for i in [0, p.tensors.tensors[ti].data.len() / 2] {
                let h = 1e-2f32;
                let mut a = p.clone();
                a.tensors.tensors[ti].data[i] += h;
                let mut b = p.clone();
                b.tensors.tensors[ti].data[i] -= h;
                let numeric = (loss(&a) - loss(&b)) / (2.0 * h as f64);
                let analytic = g.tensors[ti].data[i] as f64;
                assert!(
                    (numeric - analytic).abs() <= 2e-3 + 2e-2 * analytic.abs(),
                    "{} [{i}]: {analytic} vs {numeric}",
                    p.tensors.tensors[ti].name
                );
            }
        }
    }

    #[test]
    fn frozen_params_refuse_updates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.ckpt");
        let mut p = SegmentorParams::init(SegmentorConfig::new(4), &mut Rng::seed_from_u64(9)).unwrap();
        let mut adam = Adam::new(&p.tensors);
        let g = p.tensors.zeros_like();
        p.apply_gradients(&mut adam, &g, 1e-3).unwrap();
        p.export(&path).unwrap();
        assert!(matches!(p.apply_gradients(&mut adam, &g, 1e-3), Err(Error::Frozen)));
        let mut q = SegmentorParams::load(&path).unwrap();
        assert!(q.is_frozen());
        assert_eq!(q.tensors, p.tensors);
        assert!(matches!(q.apply_gradients(&mut adam, &g, 1e-3), Err(Error::Frozen)));
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..7], b"DDPSSEG");
        assert!(crate::denoiser::DenoiserParams::from_bytes(&bytes).is_err());
    }

    fn square_gt() -> LabelGrid {
        let mut g = LabelGrid::filled(16, 16, 4, 0).unwrap();
        for y in 3..11 {
            for x in 4..12 {
                g.set(y, x, if y < 5 { 2 } else { 1 });
            }
        }
        g
    }

    #[test]
    fn oracle_severity_zero_is_exact() {
        let gt = square_gt();
        let (f, l) = corrupt_oracle(&gt, 0.0, &OracleConfig::default(), &mut Rng::seed_from_u64(1)).unwrap();
        assert_eq!(argmax_labels(&l), gt);
        assert_eq!(f.channels(), 32);
        for p in 0..gt.len() {
            let px = &f.values()[p * 32..p * 32 + 4];
            assert_eq!(px[gt.values()[p] as usize], 1.0);
            assert_eq!(px.iter().sum::<f32>(), 1.0);
        }
    }

    #[test]
    fn oracle_argmax_is_corrupted_labels() {
        let gt = square_gt();
        for s in [0.3, 0.7, 1.0] {
            let cfg = OracleConfig::default();
            let (_, l) = corrupt_oracle(&gt, s, &cfg, &mut Rng::seed_from_u64(3)).unwrap();
            let pred = corrupt_labels(&gt, s, &mut Rng::seed_from_u64(3)).unwrap();
            assert_eq!(argmax_labels(&l), pred);
            assert!(!pred.contains_mask());
        }
        assert!(corrupt_labels(&gt, 1.5, &mut Rng::seed_from_u64(1)).is_err());
    }
}
