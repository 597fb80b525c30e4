//! Mean IoU and boundary IoU over a set of label maps.
//!
//! Both metrics accumulate integer counts over every image before dividing,
//! so splitting an evaluation set and merging the accumulators gives the
//! same result as evaluating the concatenation. Classes absent from both
//! predictions and ground truth are excluded from the means.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grids::LabelGrid;

fn check_pair(pred: &LabelGrid, gt: &LabelGrid, num_classes: usize) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    for &v in pred.values().iter().chain(gt.values()) {
        if v as usize >= num_classes {
            return Err(Error::ClassRange {
                value: v as usize,
                num_classes,
            });
        }
    }
    Ok(())
}

/// `counts[true * K + pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn add(&mut self, pred: &LabelGrid, gt: &LabelGrid) -> Result<()> {
        check_pair(pred, gt, self.num_classes)?;
        for (&p, &g) in pred.values().iter().zip(gt.values()) {
            self.counts[g as usize * self.num_classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Shape("confusion matrices differ in K".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `TP / (TP + FP + FN)` per class; `None` when the class appears in
    /// neither predictions nor ground truth.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let k = self.num_classes;
        (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..k).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..k).map(|t| self.get(t, c)).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> f64 {
        mean_present(&self.per_class_iou())
    }
}

fn mean_present(per_class: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouResult {
    pub mean: f64,
    pub per_class: Vec<Option<f64>>,
}

pub fn miou(preds: &[LabelGrid], gts: &[LabelGrid], num_classes: usize) -> Result<IouResult> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (p, g) in preds.iter().zip(gts) {
        cm.add(p, g)?;
    }
    let per_class = cm.per_class_iou();
    Ok(IouResult {
        mean: mean_present(&per_class),
        per_class,
    })
}

/// One 3x3 erosion; pixels outside the image count as outside the mask.
fn erode(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let interior = y > 0 && x > 0 && y + 1 < h && x + 1 < w;
            out[y * w + x] = interior
                && (y - 1..=y + 1).all(|yy| (x - 1..=x + 1).all(|xx| mask[yy * w + xx]));
        }
    }
    out
}

/// Pixels of `mask` within chessboard distance `d` of its complement:
/// the mask minus its `d`-fold erosion.
pub fn inner_band(mask: &[bool], h: usize, w: usize, d: usize) -> Vec<bool> {
    let mut eroded = mask.to_vec();
    for _ in 0..d {
        eroded = erode(&eroded, h, w);
    }
    mask.iter().zip(&eroded).map(|(&m, &e)| m && !e).collect()
}

/// Band distance for an image: 2% of its diagonal, at least one pixel.
pub fn default_boundary_d(height: usize, width: usize) -> usize {
    let diag = ((height * height + width * width) as f64).sqrt();
    ((0.02 * diag).round() as usize).max(1)
}

/// Accumulates per-class boundary-band intersections and unions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoundaryAccumulator {
    num_classes: usize,
    d: usize,
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
    present: Vec<bool>,
}

impl BoundaryAccumulator {
    pub fn new(num_classes: usize, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument("boundary distance must be at least 1".into()));
        }
        Ok(Self {
            num_classes,
            d,
            intersection: vec![0; num_classes],
            union: vec![0; num_classes],
            present: vec![false; num_classes],
        })
    }

    pub fn add(&mut self, pred: &LabelGrid, gt: &LabelGrid) -> Result<()> {
        check_pair(pred, gt, self.num_classes)?;
        let (h, w) = (gt.height(), gt.width());
        for c in 0..self.num_classes {
            let pm: Vec<bool> = pred.values().iter().map(|&v| v as usize == c).collect();
            let gm: Vec<bool> = gt.values().iter().map(|&v| v as usize == c).collect();
            if !pm.iter().any(|&b| b) && !gm.iter().any(|&b| b) {
                continue;
            }
            self.present[c] = true;
            let pb = inner_band(&pm, h, w, self.d);
            let gb = inner_band(&gm, h, w, self.d);
            for (&a, &b) in pb.iter().zip(&gb) {
                self.intersection[c] += u64::from(a && b);
                self.union[c] += u64::from(a || b);
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &BoundaryAccumulator) -> Result<()> {
        if other.num_classes != self.num_classes || other.d != self.d {
            return Err(Error::Shape("boundary accumulators differ in K or d".into()));
        }
        for c in 0..self.num_classes {
            self.intersection[c] += other.intersection[c];
            self.union[c] += other.union[c];
            self.present[c] |= other.present[c];
        }
        Ok(())
    }

    pub fn per_class(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| {
                (self.present[c] && self.union[c] > 0)
                    .then(|| self.intersection[c] as f64 / self.union[c] as f64)
            })
            .collect()
    }

    pub fn mean(&self) -> f64 {
        mean_present(&self.per_class())
    }
}

pub fn boundary_iou(preds: &[LabelGrid], gts: &[LabelGrid], num_classes: usize, d: usize) -> Result<IouResult> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    let mut acc = BoundaryAccumulator::new(num_classes, d)?;
    for (p, g) in preds.iter().zip(gts) {
        acc.add(p, g)?;
    }
    let per_class = acc.per_class();
    Ok(IouResult {
        mean: mean_present(&per_class),
        per_class,
    })
}

/// Evaluation report written as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: f64,
    pub biou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub per_class_biou: Vec<Option<f64>>,
    pub n_images: usize,
    pub config_hash: String,
}

/// Evaluate predictions against ground truth with band distance `d`.
pub fn evaluate(
    preds: &[LabelGrid],
    gts: &[LabelGrid],
    num_classes: usize,
    d: usize,
    config_hash: String,
) -> Result<EvalReport> {
    let m = miou(preds, gts, num_classes)?;
    let b = boundary_iou(preds, gts, num_classes, d)?;
    Ok(EvalReport {
        miou: m.mean,
        biou: b.mean,
        per_class_iou: m.per_class,
        per_class_biou: b.per_class,
        n_images: preds.len(),
        config_hash,
    })
}

/// Hex SHA-256 of a resolved configuration text.
pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
