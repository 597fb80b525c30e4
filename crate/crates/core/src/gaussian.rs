//! Gaussian diffusion and the analog-bits codec.
//!
//! Labels are written as binary numbers, each bit mapped to `+scale` or
//! `-scale`, and diffused as real values. Decoding thresholds each channel at
//! zero.

use crate::error::{Error, Result};
use crate::grids::LabelGrid;

/// Default input scaling for analog bits.
pub const DEFAULT_BIT_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSchedule {
    /// `betas[t - 1]` is the step variance at timestep `t`.
    betas: Vec<f64>,
    /// `alpha_bar[t]` for `t` in `0..=T`, with `alpha_bar[0] = 1`.
    alpha_bar: Vec<f64>,
}

impl GaussianSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidArgument("betas must lie in (0, 1)".into()));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len() + 1);
        alpha_bar.push(1.0);
        for b in &betas {
            alpha_bar.push(alpha_bar.last().unwrap() * (1.0 - b));
        }
        Ok(Self { betas, alpha_bar })
    }

    /// Linear betas between the usual 1e-4 and 0.02 endpoints for a
    /// 1000-step process, rescaled by `1000 / T`.
    pub fn linear(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
        }
        let scale = 1000.0 / steps as f64;
        let (start, end) = (scale * 1e-4, (scale * 0.02).min(0.999));
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    start
                } else {
                    start + (end - start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }
    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }
}

/// Real-valued bit planes, one channel per bit, most significant first.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalogBitsGrid {
    height: usize,
    width: usize,
    channels: usize,
    scale: f64,
    values: Vec<f64>,
}

impl AnalogBitsGrid {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        scale: f64,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values for {height}x{width}x{channels} bits",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            scale,
            values,
        })
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
    pub fn scale(&self) -> f64 {
        self.scale
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn with_values(&self, values: Vec<f64>) -> Self {
        Self {
            values,
            ..self.clone()
        }
    }
}

/// Bits needed to represent classes `0..num_classes`.
pub fn bits_for(num_classes: usize) -> usize {
    let mut bits = 1;
    while (1usize << bits) < num_classes {
        bits += 1;
    }
    bits
}

pub fn bit_encode(labels: &LabelGrid, num_classes: usize, scale: f64) -> Result<AnalogBitsGrid> {
    let bits = bits_for(num_classes);
    let mut values = Vec::with_capacity(labels.len() * bits);
    for &v in labels.values() {
        if (v as usize) >= (1 << bits) || (v as usize) >= num_classes {
            return Err(Error::ClassRange {
                value: v as usize,
                num_classes,
            });
        }
        for b in (0..bits).rev() {
            values.push(if (v >> b) & 1 == 1 { scale } else { -scale });
        }
    }
    AnalogBitsGrid::new(labels.height(), labels.width(), bits, scale, values)
}

/// Threshold at zero (strictly positive is a 1 bit) and clamp to `K - 1`.
pub fn bit_decode(analog: &AnalogBitsGrid, num_classes: usize) -> Result<LabelGrid> {
    let values = analog
        .values()
        .chunks_exact(analog.channels())
        .map(|px| {
            let raw = px
                .iter()
                .fold(0usize, |acc, &v| (acc << 1) | usize::from(v > 0.0));
            raw.min(num_classes - 1) as u16
        })
        .collect();
    LabelGrid::new(analog.height(), analog.width(), num_classes, values)
}

/// `sqrt(alpha_bar) x0 + sqrt(1 - alpha_bar) eps` elementwise.
pub fn jump_noise(x0: &AnalogBitsGrid, alpha_bar: f64, eps: &[f64]) -> Result<AnalogBitsGrid> {
    if eps.len() != x0.values().len() {
        return Err(Error::Shape("noise shape differs from x0".into()));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(x0.with_values(
        x0.values()
            .iter()
            .zip(eps)
            .map(|(&x, &e)| a * x + b * e)
            .collect(),
    ))
}

/// Sample `x_t ~ q(x_t | x_0)` given standard normal noise `eps`.
pub fn gaussian_q_sample(
    x0: &AnalogBitsGrid,
    t: usize,
    schedule: &GaussianSchedule,
    eps: &[f64],
) -> Result<AnalogBitsGrid> {
    if t > schedule.steps() {
        return Err(Error::TimestepRange {
            t,
            lo: 0,
            hi: schedule.steps(),
        });
    }
    jump_noise(x0, schedule.alpha_bar(t), eps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub variance: f64,
}

pub fn posterior_coefficients(schedule: &GaussianSchedule, t: usize) -> (f64, f64, f64) {
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t - 1);
    let beta = schedule.beta(t);
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
    let ct = schedule.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    let var = (1.0 - ab_prev) / (1.0 - ab_t) * beta;
    (c0, ct, var)
}

/// `q(x_{t-1} | x_t, x_0)`.
pub fn gaussian_posterior(
    x_t: &[f64],
    x0: &[f64],
    t: usize,
    schedule: &GaussianSchedule,
) -> Result<GaussianPosterior> {
    if t == 0 || t > schedule.steps() {
        return Err(Error::TimestepRange {
            t,
            lo: 1,
            hi: schedule.steps(),
        });
    }
    if x_t.len() != x0.len() {
        return Err(Error::Shape("x_t and x_0 differ in length".into()));
    }
    let (c0, ct, variance) = posterior_coefficients(schedule, t);
    Ok(GaussianPosterior {
        mean: x0.iter().zip(x_t).map(|(a, b)| c0 * a + ct * b).collect(),
        variance,
    })
}

/// Mean squared error between predicted and true noise.
pub fn l_simple(eps_pred: &[f64], eps: &[f64]) -> Result<f64> {
    if eps_pred.len() != eps.len() || eps.is_empty() {
        return Err(Error::Shape("noise tensors differ in length".into()));
    }
    Ok(eps_pred
        .iter()
        .zip(eps)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / eps.len() as f64)
}
