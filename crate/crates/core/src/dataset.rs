//! Glue between scenes and the diffusion prior: runs the frozen base model
//! (a trained segmentor or the corruption oracle) once per sample and keeps
//! the conditioning features, initial logits and codec-encoded targets.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grids::{argmax_labels, decode_full, encode_quarter, FeatureGrid, LabelGrid, LogitsGrid};
use crate::metrics::ConfusionMatrix;
use crate::seed::{domain, rng_for};
use crate::segmentor::{base_forward, corrupt_oracle, OracleConfig, SegmentorParams};
use crate::synthdata::SamplePair;

/// Dataset split; oracle draws are keyed by split so train and eval
/// corruptions never share a random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn stream_base(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Eval => 1 << 32,
        }
    }
}

/// Source of conditioning features and initial predictions.
#[derive(Clone, Debug, PartialEq)]
pub enum BaseModel {
    Trained(SegmentorParams),
    Oracle {
        severity: f64,
        seed: u64,
        config: OracleConfig,
    },
}

impl BaseModel {
    /// Parse `oracle:<severity>[:<seed>]` or a segmentor checkpoint path.
    pub fn from_spec(spec: &str) -> Result<Self> {
        if let Some(rest) = spec.strip_prefix("oracle:") {
            let mut parts = rest.split(':');
            let severity: f64 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Config(format!("bad oracle severity in {spec:?}")))?;
            let seed: u64 = match parts.next() {
                Some(s) => s
                    .parse()
                    .map_err(|_| Error::Config(format!("bad oracle seed in {spec:?}")))?,
                None => 0,
            };
            if parts.next().is_some() || !(0.0..=1.0).contains(&severity) {
                return Err(Error::Config(format!("bad oracle spec {spec:?}")));
            }
            return Ok(BaseModel::Oracle {
                severity,
                seed,
                config: OracleConfig::default(),
            });
        }
        Ok(BaseModel::Trained(SegmentorParams::load(Path::new(spec))?))
    }

    pub fn feature_channels(&self) -> usize {
        match self {
            BaseModel::Trained(p) => p.config().feature_channels,
            BaseModel::Oracle { config, .. } => config.feature_channels,
        }
    }

    /// Features and 1/4-scale logits for sample `index` of `split`.
    pub fn predict(&self, sample: &SamplePair, split: Split, index: u64) -> Result<(FeatureGrid, LogitsGrid)> {
        match self {
            BaseModel::Trained(p) => base_forward(&sample.image, p),
            BaseModel::Oracle { severity, seed, config } => {
                let gt = encode_quarter(&sample.labels)?;
                let mut rng = rng_for(*seed, domain::ORACLE, split.stream_base() + index);
                corrupt_oracle(&gt, *severity, config, &mut rng)
            }
        }
    }
}

/// One sample ready for prior training or refinement.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub features: FeatureGrid,
    pub init_logits: LogitsGrid,
    /// Ground truth at 1/4 scale (the codec encoding).
    pub target: LabelGrid,
    pub gt_full: LabelGrid,
}

impl PreparedSample {
    /// Argmax of the base logits at 1/4 scale.
    pub fn init_labels(&self) -> LabelGrid {
        argmax_labels(&self.init_logits)
    }

    /// The base prediction decoded to full resolution.
    pub fn init_full(&self) -> Result<LabelGrid> {
        decode_full(&self.init_logits, self.gt_full.height(), self.gt_full.width())
    }

    /// Horizontally mirrored copy (features, logits and labels together).
    pub fn flipped(&self) -> PreparedSample {
        let k = self.init_logits.channels();
        let (h, w) = (self.init_logits.height(), self.init_logits.width());
        let mut logits = Vec::with_capacity(h * w * k);
        for y in 0..h {
            for x in (0..w).rev() {
                logits.extend_from_slice(self.init_logits.pixel(y * w + x));
            }
        }
        PreparedSample {
            features: self.features.flip_horizontal(),
            init_logits: LogitsGrid::new(h, w, k, logits).expect("mirrored finite logits"),
            target: self.target.flip_horizontal(),
            gt_full: self.gt_full.flip_horizontal(),
        }
    }
}

pub fn prepare(samples: &[SamplePair], base: &BaseModel, split: Split) -> Result<Vec<PreparedSample>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let (features, init_logits) = base.predict(s, split, i as u64)?;
            Ok(PreparedSample {
                features,
                init_logits,
                target: encode_quarter(&s.labels)?,
                gt_full: s.labels.clone(),
            })
        })
        .collect()
}

/// Dataset-level mIoU of full-resolution predictions.
pub fn dataset_miou(preds: &[LabelGrid], gts: &[LabelGrid]) -> Result<f64> {
    let k = gts.first().map(|g| g.num_classes()).unwrap_or(2);
    let mut cm = ConfusionMatrix::new(k);
    for (p, g) in preds.iter().zip(gts) {
        cm.add(p, g)?;
    }
    Ok(cm.miou())
}

/// mIoU of the base predictions decoded to full resolution.
pub fn initial_miou(prepared: &[PreparedSample]) -> Result<f64> {
    let preds = prepared.iter().map(|p| p.init_full()).collect::<Result<Vec<_>>>()?;
    let gts: Vec<LabelGrid> = prepared.iter().map(|p| p.gt_full.clone()).collect();
    dataset_miou(&preds, &gts)
}

/// Find the oracle severity whose initial mIoU on `samples` is closest to
/// `target`, by bisection (the mIoU falls with severity).
pub fn calibrate_severity(samples: &[SamplePair], target: f64, seed: u64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples to calibrate on".into()));
    }
    let score = |severity: f64| -> Result<f64> {
        let base = BaseModel::Oracle {
            severity,
            seed,
            config: OracleConfig::default(),
        };
        initial_miou(&prepare(samples, &base, Split::Train)?)
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..14 {
        let mid = 0.5 * (lo + hi);
        if score(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
