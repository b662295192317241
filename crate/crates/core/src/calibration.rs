//! Data-driven perturbation budgets.
//!
//! Each training image contributes an angular deviation of its stain matrix
//! from the corpus mean and a pair of concentration ratios. The budgets are
//! empirical quantiles of these statistics at level `1 - delta + eps_n`,
//! where `eps_n` is the two-sided DKW band width split across the two
//! budgets by a union bound.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CasaError, Result};
use crate::linalg::angle_between;
use crate::stain::{ConcentrationMap, StainMatrix};

/// Percentile used for the per-image concentration statistic.
pub const CONCENTRATION_QUANTILE: f64 = 0.99;

/// Stain statistics of one calibration image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageStainStats {
    pub image_id: String,
    /// Angle (radians) between this image's stain matrix and the corpus mean.
    pub alpha: f64,
    /// Per-channel ratio of this image's 99th percentile concentration to
    /// the corpus average.
    pub r: [f64; 2],
}

impl ImageStainStats {
    /// Worst-channel concentration deviation `max_k |r_k - 1|`.
    pub fn concentration_deviation(&self) -> f64 {
        (self.r[0] - 1.0).abs().max((self.r[1] - 1.0).abs())
    }
}

/// Calibrated budgets together with the metadata that produced them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StainBudget {
    #[serde(rename = "tau_w_rad")]
    pub tau_w: f64,
    pub tau_h: f64,
    pub n: usize,
    pub delta: f64,
    pub beta: f64,
    pub epsilon_n: f64,
    pub quantile_level: f64,
}

impl StainBudget {
    /// A budget set by hand rather than calibrated (`n = 0`).
    pub fn fixed(tau_w: f64, tau_h: f64) -> Result<Self> {
        let budget = Self { tau_w, tau_h, n: 0, delta: 0.0, beta: 0.0, epsilon_n: 0.0, quantile_level: 1.0 };
        budget.validate()?;
        Ok(budget)
    }

    pub fn zero() -> Self {
        Self::fixed(0.0, 0.0).expect("zero budget is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=std::f64::consts::PI).contains(&self.tau_w) {
            return Err(CasaError::InvalidConfig(format!("tau_w {} outside [0, pi]", self.tau_w)));
        }
        if !(self.tau_h.is_finite() && self.tau_h >= 0.0) {
            return Err(CasaError::InvalidConfig(format!("tau_h {} must be non-negative", self.tau_h)));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.tau_w == 0.0 && self.tau_h == 0.0
    }
}

/// Mean computed from sorted values as `min + mean(v - min)`, which is
/// independent of input order and exact when all values are equal.
fn order_free_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let base = values[0];
    base + values.iter().map(|v| v - base).sum::<f64>() / values.len() as f64
}

/// Column-wise mean of stain matrices, each mean column renormalized.
pub fn mean_stain_matrix(matrices: &[StainMatrix]) -> Result<StainMatrix> {
    if matrices.is_empty() {
        return Err(CasaError::EmptyInput("stain matrices"));
    }
    let mut cols = [Vector3::zeros(); 2];
    for (k, col) in cols.iter_mut().enumerate() {
        for c in 0..3 {
            let mut vals: Vec<f64> = matrices.iter().map(|m| m.column(k)[c]).collect();
            col[c] = order_free_mean(&mut vals);
        }
    }
    for col in &cols {
        if col.norm() < 1e-6 {
            return Err(CasaError::DegenerateMean(col.norm()));
        }
    }
    StainMatrix::new(cols[0].normalize(), cols[1].normalize())
}

/// Larger of the two per-column angles between `w` and `w_bar`.
pub fn angular_deviation(w: &StainMatrix, w_bar: &StainMatrix) -> f64 {
    (0..2)
        .map(|k| angle_between(w.column(k), w_bar.column(k)))
        .fold(0.0, f64::max)
}

/// Order statistic `ceil(level * n)` (1-indexed) of an already sorted slice.
fn order_statistic(sorted: &[f64], level: f64) -> f64 {
    let n = sorted.len();
    // The small offset keeps levels like 0.95 * 100 from rounding up a rank.
    let rank = (level * n as f64 - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    sorted[rank - 1]
}

/// Per-channel 99th percentile of a concentration map.
pub fn concentration_q99(h: &ConcentrationMap) -> Result<[f64; 2]> {
    if h.is_empty() {
        return Err(CasaError::EmptyMap);
    }
    Ok(std::array::from_fn(|k| {
        let mut v = h.channel(k).to_vec();
        v.sort_by(f64::total_cmp);
        order_statistic(&v, CONCENTRATION_QUANTILE)
    }))
}

/// `r_k = q99(h_k) / corpus_q99_k` for each stain channel.
pub fn concentration_ratio(h: &ConcentrationMap, corpus_q99: [f64; 2]) -> Result<[f64; 2]> {
    if corpus_q99.iter().any(|&q| !(q > 0.0 && q.is_finite())) {
        return Err(CasaError::InvalidConfig(format!("corpus q99 {corpus_q99:?} must be positive")));
    }
    let q = concentration_q99(h)?;
    Ok([q[0] / corpus_q99[0], q[1] / corpus_q99[1]])
}

/// DKW band width with the failure probability split over two budgets:
/// `sqrt(ln(4 / beta) / (2 n))`.
pub fn dkw_epsilon(n: usize, beta: f64) -> Result<f64> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(CasaError::InvalidBeta(beta));
    }
    if n == 0 {
        return Err(CasaError::EmptyInput("sample count"));
    }
    Ok(((4.0 / beta).ln() / (2.0 * n as f64)).sqrt())
}

/// `min(1, 1 - delta + eps_n)`.
pub fn quantile_level(n: usize, delta: f64, beta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(CasaError::InvalidProbability { name: "delta", value: delta });
    }
    Ok((1.0 - delta + dkw_epsilon(n, beta)?).min(1.0))
}

/// The `ceil(level * n)`-th smallest sample (1-indexed, no interpolation).
/// `level = 0` gives the minimum.
pub fn empirical_quantile(samples: &[f64], level: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(CasaError::EmptyInput("quantile samples"));
    }
    if !(0.0..=1.0).contains(&level) {
        return Err(CasaError::InvalidProbability { name: "level", value: level });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(order_statistic(&sorted, level))
}

/// Per-image statistics for a corpus of decomposed images.
///
/// `ids` defaults to the image index when absent.
pub fn corpus_stats(
    matrices: &[StainMatrix],
    maps: &[ConcentrationMap],
    ids: Option<&[String]>,
) -> Result<Vec<ImageStainStats>> {
    if matrices.len() != maps.len() {
        return Err(CasaError::DimensionMismatch { expected: matrices.len(), actual: maps.len() });
    }
    if let Some(ids) = ids {
        if ids.len() != matrices.len() {
            return Err(CasaError::DimensionMismatch { expected: matrices.len(), actual: ids.len() });
        }
    }
    let w_bar = mean_stain_matrix(matrices)?;
    let q99s = maps.par_iter().map(concentration_q99).collect::<Result<Vec<_>>>()?;
    let corpus_q99: [f64; 2] = std::array::from_fn(|k| {
        let mut v: Vec<f64> = q99s.iter().map(|q| q[k]).collect();
        order_free_mean(&mut v)
    });
    if corpus_q99.iter().any(|&q| q <= 0.0) {
        return Err(CasaError::InvalidConfig("corpus has no stain in one channel".into()));
    }
    Ok(matrices
        .iter()
        .zip(&q99s)
        .enumerate()
        .map(|(i, (w, q))| ImageStainStats {
            image_id: ids.map_or_else(|| i.to_string(), |ids| ids[i].clone()),
            alpha: angular_deviation(w, &w_bar),
            r: [q[0] / corpus_q99[0], q[1] / corpus_q99[1]],
        })
        .collect())
}

/// Turns per-image statistics into budgets.
pub fn budget_from_stats(stats: &[ImageStainStats], delta: f64, beta: f64) -> Result<StainBudget> {
    if stats.is_empty() {
        return Err(CasaError::EmptyInput("calibration statistics"));
    }
    let n = stats.len();
    let epsilon_n = dkw_epsilon(n, beta)?;
    let level = quantile_level(n, delta, beta)?;
    let alphas: Vec<f64> = stats.iter().map(|s| s.alpha).collect();
    let deviations: Vec<f64> = stats.iter().map(ImageStainStats::concentration_deviation).collect();
    let budget = StainBudget {
        tau_w: empirical_quantile(&alphas, level)?,
        tau_h: empirical_quantile(&deviations, level)?,
        n,
        delta,
        beta,
        epsilon_n,
        quantile_level: level,
    };
    budget.validate()?;
    Ok(budget)
}

/// Calibrates `(tau_w, tau_h)` from decomposed training images.
pub fn calibrate(matrices: &[StainMatrix], maps: &[ConcentrationMap], delta: f64, beta: f64) -> Result<StainBudget> {
    if matrices.len() < 2 {
        return Err(CasaError::InvalidConfig(format!("need at least 2 images, got {}", matrices.len())));
    }
    // Validate probabilities before doing any per-image work.
    quantile_level(matrices.len(), delta, beta)?;
    let stats = corpus_stats(matrices, maps, None)?;
    budget_from_stats(&stats, delta, beta)
}
