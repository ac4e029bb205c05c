use std::path::Path;

use kind_core::cavity::RegimeDatasetConfig;
use kind_core::kind::{AnomalyConfig, KindConfig};
use kind_core::training::TrainConfig;
use kind_core::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumSection {
    /// Smallest integrated-rms rise reported as a step, as a fraction of the
    /// total.
    pub min_fraction: f64,
    /// Rises within this distance of a peak count as one step, Hz.
    pub merge_hz: f64,
}

impl Default for SpectrumSection {
    fn default() -> Self {
        Self {
            min_fraction: 0.05,
            merge_hz: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KalmanSection {
    /// Known drive `u = |V_T|²` fed to the filter on every sample.
    pub drive: f64,
}

impl Default for KalmanSection {
    fn default() -> Self {
        Self { drive: 1.0 }
    }
}

/// Injected regime for `simulate --novel`.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NovelSection {
    pub onset_s: f64,
    pub duration_s: f64,
    pub surge: f64,
}

impl Default for NovelSection {
    fn default() -> Self {
        Self {
            onset_s: 1.0,
            duration_s: 3.0,
            surge: 2.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: RegimeDatasetConfig,
    pub novel: NovelSection,
    pub spectrum: SpectrumSection,
    pub kalman: KalmanSection,
    pub model: KindConfig,
    pub train: TrainConfig,
    pub anomaly: AnomalyConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg: RunConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.anomaly.validate()?;
        let s = &self.spectrum;
        if !(s.min_fraction > 0.0 && s.min_fraction < 1.0) || !(s.merge_hz >= 0.0) {
            return Err(Error::Config("spectrum.min_fraction must lie in (0, 1) and merge_hz be non-negative".into()));
        }
        if !(self.kalman.drive.is_finite()) {
            return Err(Error::Config("kalman.drive must be finite".into()));
        }
        let n = &self.novel;
        if !(n.onset_s >= 0.0 && n.onset_s < n.duration_s) || !(n.surge >= 0.0) {
            return Err(Error::Config("novel regime needs 0 ≤ onset_s < duration_s and surge ≥ 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_sections_fill_defaults() {
        let cfg: RunConfig = toml::from_str("[train]\nstat_epochs = 2\n[anomaly]\nthreshold = inf\n").unwrap();
        assert_eq!(cfg.train.stat_epochs, 2);
        assert_eq!(cfg.train.trans_epochs, TrainConfig::default().trans_epochs);
        assert!(cfg.anomaly.threshold.is_infinite());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[spectrum]\nmin_frac = 0.1\n").is_err());
    }

    #[test]
    fn invalid_values_fail_validation() {
        let mut cfg = RunConfig::default();
        cfg.spectrum.min_fraction = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.train.batch = 0;
        assert!(cfg.validate().is_err());
    }
}
