use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Denominator guard in [`blend`].
pub const BLEND_EPS: f64 = 1e-12;

/// `α = ζᵗʳᵃⁿˢ / (ζᵗʳᵃⁿˢ + ζˢᵗᵃᵗ + ε)`.
pub fn blend(zeta_stat: f64, zeta_trans: f64) -> Result<f64> {
    if !(zeta_stat > 0.0) || !(zeta_trans > 0.0) || !zeta_stat.is_finite() || !zeta_trans.is_finite() {
        return Err(Error::contract(format!(
            "uncertainties must be positive and finite, got ζˢᵗᵃᵗ = {zeta_stat}, ζᵗʳᵃⁿˢ = {zeta_trans}"
        )));
    }
    Ok((zeta_trans / (zeta_trans + zeta_stat + BLEND_EPS)).clamp(0.0, 1.0))
}

/// `prior + gain · (measurement − prior)`, exact at `gain ∈ {0, 1}` and
/// kept inside the interval spanned by its two inputs.
fn correct(prior: f64, measurement: f64, gain: f64) -> f64 {
    if gain == 0.0 {
        return prior;
    }
    if gain == 1.0 {
        return measurement;
    }
    let x = prior + gain * (measurement - prior);
    x.clamp(prior.min(measurement), prior.max(measurement))
}

fn check(stat: &[f64], trans: &[f64], alpha: f64) -> Result<()> {
    if stat.len() != trans.len() {
        return Err(Error::contract(format!(
            "branch predictions differ in length ({} vs {})",
            stat.len(),
            trans.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::contract(format!("α = {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// `α·stat + (1 − α)·trans`, elementwise.
pub fn fuse(stat: &[f64], trans: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check(stat, trans, alpha)?;
    let gain = 1.0 - alpha;
    Ok(stat.iter().zip(trans).map(|(&s, &t)| correct(s, t, gain)).collect())
}

/// The same fusion written as a Kalman correction of the stationary prior by
/// the transient "measurement" with gain `Kₜ = 1 − α`.
pub fn kalman_form(stat: &[f64], trans: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check(stat, trans, alpha)?;
    let k_t = 1.0 - alpha;
    Ok(stat
        .iter()
        .zip(trans)
        .map(|(&prior, &measurement)| correct(prior, measurement, k_t))
        .collect())
}

/// Horizon forecast with per-slice blending diagnostics. Physical units
/// (Hz) for predictions; uncertainties are in normalized squared units.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendedForecast {
    pub fused: Vec<f64>,
    pub stat: Vec<f64>,
    pub trans: Vec<f64>,
    /// One entry per horizon slice.
    pub alpha: Vec<f64>,
    pub zeta_stat: Vec<f64>,
    pub zeta_trans: Vec<f64>,
    /// Per lookback transition `j → j+1`.
    pub lookback_zeta_stat: Vec<f64>,
    pub lookback_zeta_trans: Vec<f64>,
}

impl BlendedForecast {
    pub fn mean_alpha(&self) -> f64 {
        crate::series::mean(&self.alpha)
    }

    /// `slice_index,alpha,zeta_stat,zeta_trans`
    pub fn slices_csv(&self) -> String {
        let mut out = String::from("slice_index,alpha,zeta_stat,zeta_trans\n");
        for j in 0..self.alpha.len() {
            out.push_str(&format!("{j},{},{},{}\n", self.alpha[j], self.zeta_stat[j], self.zeta_trans[j]));
        }
        out
    }

    /// `sample_index,fused,stat,trans[,truth]`
    pub fn samples_csv(&self, truth: Option<&[f64]>) -> String {
        let mut out = String::from(if truth.is_some() {
            "sample_index,fused,stat,trans,truth\n"
        } else {
            "sample_index,fused,stat,trans\n"
        });
        for i in 0..self.fused.len() {
            out.push_str(&format!("{i},{},{},{}", self.fused[i], self.stat[i], self.trans[i]));
            if let Some(t) = truth {
                out.push_str(&format!(",{}", t[i]));
            }
            out.push('\n');
        }
        out
    }
}

/// Normalization of `min(ζˢᵗᵃᵗ, ζᵗʳᵃⁿˢ)` measured on training windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalyCalibration {
    /// Median of the training minimum uncertainty.
    pub floor: f64,
    /// Distance from the median to the 99th percentile.
    pub spread: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnomalyConfig {
    pub threshold: f64,
    /// Slices in a row above threshold before a flag is raised.
    pub consecutive: usize,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        Self {
            threshold: 0.03,
            consecutive: 2,
        }
    }
}

impl AnomalyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.threshold.is_nan() || self.consecutive == 0 {
            return Err(Error::config("anomaly threshold must be a number and consecutive ≥ 1"));
        }
        Ok(())
    }
}

/// `max(0, (min(ζˢᵗᵃᵗ, ζᵗʳᵃⁿˢ) − floor) / spread)`: large only when both
/// branches are unsure.
pub fn anomaly_score(zeta_stat: f64, zeta_trans: f64, calibration: &AnomalyCalibration) -> Result<f64> {
    if !(zeta_stat > 0.0) || !(zeta_trans > 0.0) {
        return Err(Error::contract("uncertainties must be positive"));
    }
    if !(calibration.spread > 0.0) {
        return Err(Error::contract("calibration spread must be positive"));
    }
    Ok(((zeta_stat.min(zeta_trans) - calibration.floor) / calibration.spread).max(0.0))
}

/// `flags[i]` is set once `scores[i]` closes a run of at least
/// `consecutive` scores above the threshold.
pub fn anomaly_flags(scores: &[f64], config: &AnomalyConfig) -> Vec<bool> {
    let mut run = 0;
    scores
        .iter()
        .map(|&s| {
            run = if s > config.threshold { run + 1 } else { 0 };
            run >= config.consecutive
        })
        .collect()
}
