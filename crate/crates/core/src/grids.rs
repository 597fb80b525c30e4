//! Grid types shared by every stage, plus the resize mask codec.
//!
//! All multi-channel grids are stored channel-last: the value of channel `c`
//! at `(y, x)` lives at `(y * width + x) * channels + c`.

use crate::error::{Error, Result};

/// Downsampling factor between full-resolution masks and the diffusion state.
pub const CODEC_FACTOR: usize = 4;

/// Per-pixel class ids. `mask_id()` (== `num_classes`) is the reserved MASK token.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelGrid {
    height: usize,
    width: usize,
    num_classes: usize,
    allow_mask: bool,
    values: Vec<u16>,
}

impl LabelGrid {
    pub fn new(height: usize, width: usize, num_classes: usize, values: Vec<u16>) -> Result<Self> {
        Self::build(height, width, num_classes, false, values)
    }

    /// A grid that may contain the MASK token.
    pub fn with_mask(
        height: usize,
        width: usize,
        num_classes: usize,
        values: Vec<u16>,
    ) -> Result<Self> {
        Self::build(height, width, num_classes, true, values)
    }

    fn build(
        height: usize,
        width: usize,
        num_classes: usize,
        allow_mask: bool,
        values: Vec<u16>,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty grid {height}x{width}")));
        }
        if num_classes == 0 || num_classes >= u16::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "num_classes = {num_classes}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} grid",
                values.len()
            )));
        }
        let limit = if allow_mask { num_classes + 1 } else { num_classes };
        if let Some(&bad) = values.iter().find(|&&v| v as usize >= limit) {
            return Err(Error::ClassRange {
                value: bad as usize,
                num_classes,
            });
        }
        Ok(Self {
            height,
            width,
            num_classes,
            allow_mask,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, num_classes: usize, class: u16) -> Result<Self> {
        Self::new(height, width, num_classes, vec![class; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    pub fn allows_mask(&self) -> bool {
        self.allow_mask
    }
    pub fn mask_id(&self) -> u16 {
        self.num_classes as u16
    }
    pub fn values(&self) -> &[u16] {
        &self.values
    }
    pub fn into_values(self) -> Vec<u16> {
        self.values
    }
    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.values[y * self.width + x]
    }
    pub fn set(&mut self, y: usize, x: usize, v: u16) {
        let limit = self.num_classes + usize::from(self.allow_mask);
        assert!((v as usize) < limit, "class {v} out of range");
        self.values[y * self.width + x] = v;
    }
    pub fn contains_mask(&self) -> bool {
        let m = self.mask_id();
        self.values.iter().any(|&v| v == m)
    }

    pub fn same_shape(&self, other: &LabelGrid) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> LabelGrid {
        let mut values = self.values.clone();
        for row in values.chunks_exact_mut(self.width) {
            row.reverse();
        }
        LabelGrid { values, ..self.clone() }
    }
}

/// Real-valued per-pixel logits over `channels` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitsGrid {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl LogitsGrid {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "empty logits {height}x{width}x{channels}"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values for {height}x{width}x{channels} logits",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite logit".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            values: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.values[index * self.channels..(index + 1) * self.channels]
    }
    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.channels)
    }
    pub fn same_shape(&self, other: &LogitsGrid) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

/// Per-pixel categorical distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalGrid {
    height: usize,
    width: usize,
    channels: usize,
    probs: Vec<f64>,
}

impl CategoricalGrid {
    pub(crate) fn from_probs(height: usize, width: usize, channels: usize, probs: Vec<f64>) -> Self {
        debug_assert_eq!(probs.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            probs,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.probs[index * self.channels..(index + 1) * self.channels]
    }

    /// Largest per-pixel deviation of the probability mass from 1.
    pub fn max_normalization_error(&self) -> f64 {
        self.probs
            .chunks_exact(self.channels)
            .map(|p| (p.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Conditioning features from the base segmentor, at diffusion resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values for {height}x{width}x{channels} features",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite feature".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            values: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn flip_horizontal(&self) -> FeatureGrid {
        let mut values = Vec::with_capacity(self.values.len());
        for row in self.values.chunks_exact(self.width * self.channels) {
            for px in row.chunks_exact(self.channels).rev() {
                values.extend_from_slice(px);
            }
        }
        FeatureGrid { values, ..*self }
    }
}

/// RGB image with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty image {height}x{width}")));
        }
        if values.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} RGB image",
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("image value outside [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn flip_horizontal(&self) -> ImageGrid {
        let mut values = Vec::with_capacity(self.values.len());
        for row in self.values.chunks_exact(self.width * 3) {
            for px in row.chunks_exact(3).rev() {
                values.extend_from_slice(px);
            }
        }
        ImageGrid { values, ..*self }
    }
}

/// Delta distribution on each pixel's label.
pub fn to_one_hot(labels: &LabelGrid) -> CategoricalGrid {
    let k = labels.num_classes() + usize::from(labels.allows_mask());
    let mut probs = vec![0.0; labels.len() * k];
    for (p, &v) in labels.values().iter().enumerate() {
        probs[p * k + v as usize] = 1.0;
    }
    CategoricalGrid::from_probs(labels.height(), labels.width(), k, probs)
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-pixel argmax over the logit channels.
pub fn argmax_labels(logits: &LogitsGrid) -> LabelGrid {
    let values = logits.pixels().map(|px| argmax(px) as u16).collect();
    LabelGrid {
        height: logits.height(),
        width: logits.width(),
        num_classes: logits.channels(),
        allow_mask: false,
        values,
    }
}

/// Nearest-neighbour downsample to 1/4 scale, taking the top-left pixel of
/// each 4x4 block.
pub fn encode_quarter(labels: &LabelGrid) -> Result<LabelGrid> {
    let (h, w) = (labels.height(), labels.width());
    if h % CODEC_FACTOR != 0 || w % CODEC_FACTOR != 0 {
        return Err(Error::NotDivisible {
            height: h,
            width: w,
            factor: CODEC_FACTOR,
        });
    }
    let (qh, qw) = (h / CODEC_FACTOR, w / CODEC_FACTOR);
    let mut values = Vec::with_capacity(qh * qw);
    for y in 0..qh {
        for x in 0..qw {
            values.push(labels.get(y * CODEC_FACTOR, x * CODEC_FACTOR));
        }
    }
    Ok(LabelGrid {
        height: qh,
        width: qw,
        values,
        ..labels.clone()
    })
}

/// Source sample positions and weights for one axis of a half-pixel-centre
/// bilinear resize from `src` to `src * factor` samples.
fn bilinear_taps(src: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let scale = 1.0 / factor as f64;
    (0..src * factor)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = if i0 + 1 < src { i0 + 1 } else { i0 };
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear upsample by `factor` per channel (align-corners false).
pub fn upsample_bilinear(logits: &LogitsGrid, factor: usize) -> LogitsGrid {
    let (h, w, c) = (logits.height(), logits.width(), logits.channels());
    let ys = bilinear_taps(h, factor);
    let xs = bilinear_taps(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; oh * ow * c];
    let src = logits.values();
    for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
            let o = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            let corners = [
                ((y0 * w + x0) * c, (1.0 - ly) * (1.0 - lx)),
                ((y0 * w + x1) * c, (1.0 - ly) * lx),
                ((y1 * w + x0) * c, ly * (1.0 - lx)),
                ((y1 * w + x1) * c, ly * lx),
            ];
            for (base, weight) in corners {
                for (ch, dst) in o.iter_mut().enumerate() {
                    *dst += weight * src[base + ch];
                }
            }
        }
    }
    LogitsGrid {
        height: oh,
        width: ow,
        channels: c,
        values: out,
    }
}

/// Upsample logits to full resolution and take the per-pixel argmax.
pub fn decode_full(logits: &LogitsGrid, target_h: usize, target_w: usize) -> Result<LabelGrid> {
    if target_h != logits.height() * CODEC_FACTOR || target_w != logits.width() * CODEC_FACTOR {
        return Err(Error::Shape(format!(
            "cannot decode {}x{} logits to {target_h}x{target_w}",
            logits.height(),
            logits.width()
        )));
    }
    Ok(argmax_labels(&upsample_bilinear(logits, CODEC_FACTOR)))
}

/// Logits that put `margin` on each pixel's label and 0 elsewhere.
pub fn one_hot_logits(labels: &LabelGrid, margin: f64) -> LogitsGrid {
    let k = labels.num_classes();
    let mut values = vec![0.0; labels.len() * k];
    for (p, &v) in labels.values().iter().enumerate() {
        values[p * k + v as usize] = margin;
    }
    LogitsGrid {
        height: labels.height(),
        width: labels.width(),
        channels: k,
        values,
    }
}
