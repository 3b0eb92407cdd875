//! Forward-diffusion corruption of image features.
//!
//! Per-step noise rates follow a sigmoid ramp over `[-6, 6]` scaled into
//! `(1e-5, 5e-3)`. The corrupted image at step `k` is
//! `sqrt(ab_k) * v + sqrt(1 - ab_k) * eps`.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::rng;

const RATE_MIN: f64 = 1e-5;
const RATE_MAX: f64 = 0.5e-2;
const RAMP_LO: f64 = -6.0;
const RAMP_HI: f64 = 6.0;

/// How the cumulative signal level is formed from the per-step rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleInterpretation {
    /// `ab_k = Π_{i<=k} (1 - rate_i)`: rates are per-step noise variances.
    #[default]
    OneMinus,
    /// `ab_k = Π_{i<=k} rate_i`. Underflows to zero after a handful of steps.
    Literal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    per_step: Vec<f64>,
    alpha_bar: Vec<f64>,
    interpretation: ScheduleInterpretation,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Default schedule (`one_minus` interpretation).
pub fn build_schedule(num_steps: usize) -> Result<NoiseSchedule> {
    NoiseSchedule::new(num_steps, ScheduleInterpretation::OneMinus)
}

impl NoiseSchedule {
    pub fn new(num_steps: usize, interpretation: ScheduleInterpretation) -> Result<Self> {
        if num_steps < 1 {
            return Err(LabError::invalid("noise schedule needs at least one step"));
        }
        let per_step: Vec<f64> = (0..num_steps)
            .map(|i| {
                let l = if num_steps == 1 {
                    RAMP_LO
                } else {
                    RAMP_LO + (RAMP_HI - RAMP_LO) * i as f64 / (num_steps - 1) as f64
                };
                sigmoid(l) * (RATE_MAX - RATE_MIN) + RATE_MIN
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(num_steps);
        let mut acc = 1.0;
        for &r in &per_step {
            acc *= match interpretation {
                ScheduleInterpretation::OneMinus => 1.0 - r,
                ScheduleInterpretation::Literal => r,
            };
            alpha_bar.push(acc);
        }
        Ok(Self {
            per_step,
            alpha_bar,
            interpretation,
        })
    }

    /// Builds a schedule from explicit cumulative levels. Intended for probing
    /// the corruption formula at chosen signal levels.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() || alpha_bar.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(LabError::invalid("alpha_bar entries must lie in [0, 1]"));
        }
        Ok(Self {
            per_step: vec![f64::NAN; alpha_bar.len()],
            alpha_bar,
            interpretation: ScheduleInterpretation::OneMinus,
        })
    }

    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    pub fn per_step(&self) -> &[f64] {
        &self.per_step
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn interpretation(&self) -> ScheduleInterpretation {
        self.interpretation
    }

    pub fn alpha_bar_at(&self, k: usize) -> Result<f64> {
        self.alpha_bar.get(k).copied().ok_or_else(|| {
            LabError::invalid(format!("noise step {k} outside schedule of {}", self.len()))
        })
    }

    /// Corrupts `image` at step `k` with caller-supplied standard normal noise.
    pub fn corrupt(&self, image: &[f64], k: usize, noise: &[f64]) -> Result<BlurredImage> {
        if noise.len() != image.len() {
            return Err(LabError::invalid(format!(
                "noise dimension {} does not match image dimension {}",
                noise.len(),
                image.len()
            )));
        }
        let ab = self.alpha_bar_at(k)?;
        let (signal, spread) = (ab.sqrt(), (1.0 - ab).sqrt());
        let values = image
            .iter()
            .zip(noise)
            .map(|(v, e)| signal * v + spread * e)
            .collect();
        Ok(BlurredImage { values, step: k })
    }
}

/// A corrupted copy of an image together with the step that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurredImage {
    pub values: Vec<f64>,
    pub step: usize,
}

/// Standard normal noise keyed by `(run seed, pair id, training step)`.
pub fn noise_vector(run_seed: u64, pair_id: u64, step: u64, dim: usize) -> Vec<f64> {
    let mut r = rng::stream(&[rng::tag::NOISE, run_seed, pair_id, step]);
    rng::standard_normal_vec(&mut r, dim)
}
