//! Uniformly sampled detuning series and the CSV interchange format.
//!
//! CSV layout: header `time_s,detuning_hz` or `time_s,detuning_hz,regime`,
//! one row per sample, regime one of `stat` / `trans`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    Stationary,
    Transient,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Stationary => "stat",
            Regime::Transient => "trans",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "stat" => Ok(Regime::Stationary),
            "trans" => Ok(Regime::Transient),
            other => Err(Error::Parse(format!("unknown regime label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub sample_rate: f64,
    pub values: Vec<f64>,
    pub labels: Option<Vec<Regime>>,
}

impl TimeSeries {
    pub fn new(sample_rate: f64, values: Vec<f64>) -> Result<Self> {
        let ts = Self {
            sample_rate,
            values,
            labels: None,
        };
        ts.validate()?;
        Ok(ts)
    }

    pub fn with_labels(sample_rate: f64, values: Vec<f64>, labels: Vec<Regime>) -> Result<Self> {
        let ts = Self {
            sample_rate,
            values,
            labels: Some(labels),
        };
        ts.validate()?;
        Ok(ts)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(Error::contract("sample rate must be positive"));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite sample at index {i}")));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.values.len() {
                return Err(Error::contract("labels and values differ in length"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate
    }

    pub fn label(&self, i: usize) -> Option<Regime> {
        self.labels.as_ref().map(|l| l[i])
    }

    /// Samples carrying `regime`, concatenated in time order.
    pub fn select(&self, regime: Regime) -> Vec<f64> {
        match &self.labels {
            Some(l) => self
                .values
                .iter()
                .zip(l)
                .filter(|(_, r)| **r == regime)
                .map(|(v, _)| *v)
                .collect(),
            None => Vec::new(),
        }
    }

    /// Contiguous `[start, end)` runs of the given regime.
    pub fn runs(&self, regime: Regime) -> Vec<(usize, usize)> {
        let Some(l) = &self.labels else { return Vec::new() };
        let mut out = Vec::new();
        let mut start = None;
        for (i, r) in l.iter().enumerate() {
            match (start, *r == regime) {
                (None, true) => start = Some(i),
                (Some(s), false) => {
                    out.push((s, i));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            out.push((s, l.len()));
        }
        out
    }

    pub fn longest_run(&self, regime: Regime) -> Option<(usize, usize)> {
        self.runs(regime).into_iter().max_by_key(|(s, e)| (e - s, usize::MAX - s))
    }

    pub fn segment(&self, start: usize, end: usize) -> TimeSeries {
        TimeSeries {
            sample_rate: self.sample_rate,
            values: self.values[start..end].to_vec(),
            labels: self.labels.as_ref().map(|l| l[start..end].to_vec()),
        }
    }

    pub fn rms(&self) -> f64 {
        rms(&self.values)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 24);
        out.push_str(if self.labels.is_some() {
            "time_s,detuning_hz,regime\n"
        } else {
            "time_s,detuning_hz\n"
        });
        for (i, v) in self.values.iter().enumerate() {
            let t = i as f64 / self.sample_rate;
            match &self.labels {
                Some(l) => {
                    let _ = writeln!(out, "{t},{v},{}", l[i].as_str());
                }
                None => {
                    let _ = writeln!(out, "{t},{v}");
                }
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty CSV".into()))?;
        let labelled = match header.trim() {
            "time_s,detuning_hz" => false,
            "time_s,detuning_hz,regime" => true,
            other => return Err(Error::Parse(format!("unexpected header {other:?}"))),
        };
        let mut times = Vec::new();
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for (row, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            let want = if labelled { 3 } else { 2 };
            if fields.len() != want {
                return Err(Error::Parse(format!("row {row}: expected {want} fields")));
            }
            let num = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("row {row}: bad number {s:?}")))
            };
            times.push(num(fields[0])?);
            values.push(num(fields[1])?);
            if labelled {
                labels.push(Regime::parse(fields[2])?);
            }
        }
        if values.is_empty() {
            return Err(Error::Parse("CSV has no samples".into()));
        }
        let sample_rate = infer_rate(&times)?;
        let ts = Self {
            sample_rate,
            values,
            labels: labelled.then_some(labels),
        };
        ts.validate()?;
        Ok(ts)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

fn infer_rate(times: &[f64]) -> Result<f64> {
    if times.len() < 2 {
        // A single sample carries no rate information.
        return Ok(1.0);
    }
    let span = times[times.len() - 1] - times[0];
    if !(span > 0.0) {
        return Err(Error::Parse("time column must increase".into()));
    }
    let rate = (times.len() - 1) as f64 / span;
    let rounded = rate.round();
    Ok(if (rate - rounded).abs() <= 1e-6 * rate { rounded } else { rate })
}

pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_with_labels() {
        let ts = TimeSeries::with_labels(
            1000.0,
            vec![0.1, -2.5, 1e-12, 3.0],
            vec![Regime::Stationary, Regime::Stationary, Regime::Transient, Regime::Stationary],
        )
        .unwrap();
        let back = TimeSeries::from_csv(&ts.to_csv()).unwrap();
        assert_eq!(back, ts);
    }

    #[test]
    fn rejects_unknown_header_and_empty() {
        assert!(TimeSeries::from_csv("").is_err());
        assert!(TimeSeries::from_csv("a,b\n1,2\n").is_err());
        assert!(TimeSeries::from_csv("time_s,detuning_hz\n").is_err());
    }

    #[test]
    fn runs_are_contiguous() {
        use Regime::*;
        let ts = TimeSeries::with_labels(1.0, vec![0.0; 6], vec![Stationary, Transient, Transient, Stationary, Transient, Transient])
            .unwrap();
        assert_eq!(ts.runs(Transient), vec![(1, 3), (4, 6)]);
        assert_eq!(ts.runs(Stationary), vec![(0, 1), (3, 4)]);
        assert_eq!(ts.longest_run(Transient), Some((1, 3)));
    }
}
