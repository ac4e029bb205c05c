//! Amplitude spectra, integrated rms curves and mode-step detection.
//!
//! Spectra are one-sided and amplitude-normalized: a sine of amplitude `A`
//! on a bin centre reports `A` at that bin (DC and Nyquist bins are not
//! doubled). Inputs whose length is not a power of two are zero-padded to
//! the next power of two; the normalization uses the unpadded window sum, so
//! amplitudes stay calibrated, but rms integration is only exact without
//! padding.

use std::fmt::Write as _;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Window {
    #[default]
    Rectangular,
    Hann,
}

impl Window {
    fn weights(self, n: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; n],
            Window::Hann => (0..n)
                .map(|i| 0.5 * (1.0 - (std::f64::consts::TAU * i as f64 / n as f64).cos()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub frequencies: Vec<f64>,
    pub magnitudes: Vec<f64>,
    /// Mean-square contribution of each bin; sums (over non-DC bins) to the
    /// windowed estimate of the signal's variance.
    pub power: Vec<f64>,
    pub sample_rate: f64,
    /// FFT length after padding.
    pub window_length: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegratedRmsCurve {
    pub frequencies: Vec<f64>,
    pub cumulative_rms: Vec<f64>,
}

impl IntegratedRmsCurve {
    pub fn final_value(&self) -> f64 {
        self.cumulative_rms.last().copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub frequency: f64,
    pub jump: f64,
}

/// One-sided amplitude spectrum of `x` sampled at `sample_rate`.
pub fn fft(x: &[f64], sample_rate: f64, window: Window) -> Result<Spectrum> {
    if x.is_empty() {
        return Err(Error::contract("fft of an empty segment"));
    }
    let len = x.len();
    let n = len.next_power_of_two();
    let w = window.weights(len);
    let wsum: f64 = w.iter().sum();
    let wsq: f64 = w.iter().map(|v| v * v).sum();
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .zip(&w)
        .map(|(v, wi)| Complex::new(v * wi, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(n)
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);

    let half = n / 2;
    let mut frequencies = Vec::with_capacity(half + 1);
    let mut magnitudes = Vec::with_capacity(half + 1);
    let mut power = Vec::with_capacity(half + 1);
    for (k, c) in buf.iter().take(half + 1).enumerate() {
        let edge = k == 0 || k == half;
        let mag = c.norm();
        frequencies.push(k as f64 * sample_rate / n as f64);
        magnitudes.push(if edge { mag / wsum } else { 2.0 * mag / wsum });
        // n = 1 has a single bin that is both DC and Nyquist.
        let weight = if edge { 1.0 } else { 2.0 };
        power.push(weight * mag * mag / (n as f64 * wsq));
    }
    Ok(Spectrum {
        frequencies,
        magnitudes,
        power,
        sample_rate,
        window_length: n,
    })
}

/// Cumulative rms over frequency, DC excluded.
pub fn integrated_rms(spectrum: &Spectrum) -> IntegratedRmsCurve {
    let mut acc = 0.0;
    let cumulative_rms = spectrum
        .power
        .iter()
        .enumerate()
        .map(|(k, p)| {
            if k > 0 {
                acc += p;
            }
            acc.sqrt()
        })
        .collect();
    IntegratedRmsCurve {
        frequencies: spectrum.frequencies.clone(),
        cumulative_rms,
    }
}

/// Frequencies where the integrated rms curve rises by more than
/// `min_fraction` of its final value, with rises within ±2 bins of a local
/// peak merged into one step.
pub fn detect_steps(curve: &IntegratedRmsCurve, min_fraction: f64) -> Result<Vec<Step>> {
    let bin = match curve.frequencies.as_slice() {
        [_, f1, ..] => *f1,
        _ => 0.0,
    };
    detect_steps_within(curve, min_fraction, 2.5 * bin)
}

/// As [`detect_steps`], merging rises within `merge_hz` of each peak. Peaks
/// are visited from the largest per-bin rise downwards; each claims the
/// unclaimed bins in its window, so a spectrally broadened mode counts as a
/// single step.
pub fn detect_steps_within(curve: &IntegratedRmsCurve, min_fraction: f64, merge_hz: f64) -> Result<Vec<Step>> {
    if !(min_fraction > 0.0 && min_fraction < 1.0) {
        return Err(Error::contract("min_fraction must lie in (0, 1)"));
    }
    if !(merge_hz >= 0.0) {
        return Err(Error::contract("merge width must be non-negative"));
    }
    let c = &curve.cumulative_rms;
    let f = &curve.frequencies;
    let n = c.len();
    let fin = curve.final_value();
    if n < 2 || fin <= 0.0 {
        return Ok(Vec::new());
    }
    let inc: Vec<f64> = (0..n).map(|k| if k == 0 { 0.0 } else { (c[k] - c[k - 1]).max(0.0) }).collect();
    let threshold = min_fraction * fin;
    let mut order: Vec<usize> = (1..n).collect();
    order.sort_by(|&a, &b| inc[b].total_cmp(&inc[a]).then(a.cmp(&b)));
    let mut claimed = vec![false; n];
    let mut steps = Vec::new();
    for &peak in &order {
        if claimed[peak] {
            continue;
        }
        if inc[peak] <= 0.0 {
            break;
        }
        let mut jump = 0.0;
        let mut k = peak;
        while k >= 1 && f[peak] - f[k] <= merge_hz {
            if !claimed[k] {
                jump += inc[k];
                claimed[k] = true;
            }
            k -= 1;
        }
        let mut k = peak + 1;
        while k < n && f[k] - f[peak] <= merge_hz {
            if !claimed[k] {
                jump += inc[k];
                claimed[k] = true;
            }
            k += 1;
        }
        if jump > threshold {
            steps.push(Step {
                frequency: f[peak],
                jump,
            });
        }
    }
    steps.sort_by(|a, b| a.frequency.total_cmp(&b.frequency));
    Ok(steps)
}

/// Hann-windowed, mean-removed spectrum of a segment: the display and
/// step-detection path.
pub fn analyze_segment(x: &[f64], sample_rate: f64) -> Result<(Spectrum, IntegratedRmsCurve)> {
    if x.is_empty() {
        return Err(Error::contract("empty segment"));
    }
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let centred: Vec<f64> = x.iter().map(|v| v - m).collect();
    let s = fft(&centred, sample_rate, Window::Hann)?;
    let c = integrated_rms(&s);
    Ok((s, c))
}

pub fn spectrum_csv(s: &Spectrum) -> String {
    let mut out = String::from("freq_hz,magnitude\n");
    for (f, m) in s.frequencies.iter().zip(&s.magnitudes) {
        let _ = writeln!(out, "{f},{m}");
    }
    out
}

pub fn curve_csv(c: &IntegratedRmsCurve) -> String {
    let mut out = String::from("freq_hz,cum_rms_hz\n");
    for (f, m) in c.frequencies.iter().zip(&c.cumulative_rms) {
        let _ = writeln!(out, "{f},{m}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    #[test]
    fn constant_series_lands_in_dc() {
        let s = fft(&[2.5; 64], 64.0, Window::Rectangular).unwrap();
        assert!((s.magnitudes[0] - 2.5).abs() < 1e-12);
        assert!(s.magnitudes[1..].iter().all(|m| m.abs() < 1e-12));
    }

    #[test]
    fn bin_centred_sine_reports_its_amplitude() {
        let n = 256;
        let x: Vec<f64> = (0..n).map(|i| 2.0 * (TAU * 10.0 * i as f64 / n as f64).sin()).collect();
        let s = fft(&x, n as f64, Window::Rectangular).unwrap();
        assert!((s.magnitudes[10] - 2.0).abs() < 1e-9);
        assert_eq!(s.frequencies[10], 10.0);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(fft(&[], 1.0, Window::Hann).is_err());
    }

    #[test]
    fn sine_curve_steps_to_rms() {
        let n = 512;
        let a = 3.0;
        let x: Vec<f64> = (0..n).map(|i| a * (TAU * 20.0 * i as f64 / n as f64).cos()).collect();
        let c = integrated_rms(&fft(&x, n as f64, Window::Rectangular).unwrap());
        assert!(c.cumulative_rms[19].abs() < 1e-9);
        assert!((c.cumulative_rms[20] - a / 2f64.sqrt()).abs() < 1e-9);
        let steps = detect_steps(&c, 0.1).unwrap();
        assert_eq!(steps.len(), 1);
        assert_eq!(steps[0].frequency, 20.0);
    }

    #[test]
    fn zero_input_gives_zero_curve() {
        let c = integrated_rms(&fft(&[0.0; 128], 1.0, Window::Rectangular).unwrap());
        assert!(c.cumulative_rms.iter().all(|&v| v == 0.0));
        assert!(detect_steps(&c, 0.1).unwrap().is_empty());
    }

    #[test]
    fn min_fraction_bounds() {
        let c = IntegratedRmsCurve {
            frequencies: vec![0.0, 1.0],
            cumulative_rms: vec![0.0, 1.0],
        };
        assert!(detect_steps(&c, 0.0).is_err());
        assert!(detect_steps(&c, 1.0).is_err());
    }
}
