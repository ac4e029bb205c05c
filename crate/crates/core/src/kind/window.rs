use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lookback `T`, horizon `H` and slice length `τ`, all in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub slice_len: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            lookback: 96,
            horizon: 48,
            slice_len: 16,
        }
    }
}

impl WindowConfig {
    pub fn new(lookback: usize, horizon: usize, slice_len: usize) -> Result<Self> {
        let cfg = Self {
            lookback,
            horizon,
            slice_len,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.slice_len == 0 {
            return Err(Error::config("slice length must be positive"));
        }
        if self.lookback != 2 * self.horizon {
            return Err(Error::config(format!(
                "lookback {} must be twice the horizon {}",
                self.lookback, self.horizon
            )));
        }
        if self.lookback % self.slice_len != 0 || self.horizon % self.slice_len != 0 {
            return Err(Error::config(format!(
                "slice length {} must divide lookback {} and horizon {}",
                self.slice_len, self.lookback, self.horizon
            )));
        }
        if self.slice_count() < 2 {
            return Err(Error::config("lookback must contain at least two slices"));
        }
        Ok(())
    }

    /// `m = T / τ`.
    pub fn slice_count(&self) -> usize {
        self.lookback / self.slice_len
    }

    pub fn horizon_slices(&self) -> usize {
        self.horizon / self.slice_len
    }

    pub fn total_slices(&self) -> usize {
        self.slice_count() + self.horizon_slices()
    }

    pub fn span(&self) -> usize {
        self.lookback + self.horizon
    }
}

/// Cut a lookback window into `m` contiguous slices in temporal order.
pub fn slice_window(lookback: &[f64], cfg: &WindowConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    if lookback.len() != cfg.lookback {
        return Err(Error::contract(format!(
            "lookback has {} samples, expected {}",
            lookback.len(),
            cfg.lookback
        )));
    }
    Ok(lookback.chunks(cfg.slice_len).map(<[f64]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_has_six_slices() {
        let cfg = WindowConfig::default();
        assert_eq!(cfg.slice_count(), 6);
        assert_eq!(cfg.horizon_slices(), 3);
        let x: Vec<f64> = (0..96).map(f64::from).collect();
        let s = slice_window(&x, &cfg).unwrap();
        assert_eq!(s.len(), 6);
        assert_eq!(s.concat(), x);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(WindowConfig::new(16, 8, 16).is_err());
        assert!(WindowConfig::new(96, 40, 16).is_err());
        assert!(WindowConfig::new(96, 48, 0).is_err());
        assert!(slice_window(&[0.0; 95], &WindowConfig::default()).is_err());
    }
}
