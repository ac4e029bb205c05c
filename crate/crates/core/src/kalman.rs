//! Classical Kalman filter over a bank of discretized mechanical modes.
//!
//! The filter works in Hz: each mode contributes a `[position, velocity]`
//! block, the measurement is the sum of positions, and the known drive
//! `u = |V_T|²` enters each block through the static Lorentz gain `−kₙ u`.
//! Transitions are exact matrix exponentials of the continuous oscillator;
//! the drive uses a zero-order hold.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Matrix2, RowDVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{mean, rms, Regime, TimeSeries};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeParams {
    /// rad/s
    pub omega: f64,
    pub q: f64,
    /// Hz per normalized V²
    pub k: f64,
}

impl ModeParams {
    pub fn new(freq_hz: f64, q: f64, k: f64) -> Self {
        Self {
            omega: std::f64::consts::TAU * freq_hz,
            q,
            k,
        }
    }
}

/// Filter design: 100 Hz / Q 1000 / k 1.0, 40 Hz / Q 400 /
/// k −1.0, 10 Hz / Q 100 / k 0.1.
pub fn design_modes() -> Vec<ModeParams> {
    vec![
        ModeParams::new(100.0, 1000.0, 1.0),
        ModeParams::new(40.0, 400.0, -1.0),
        ModeParams::new(10.0, 100.0, 0.1),
    ]
}

/// Exact transition block `exp(M·dt)` of `M = [[0, 1], [−ω², −ω/Q]]`.
pub fn discretize_mode(omega: f64, q: f64, dt: f64) -> Result<Matrix2<f64>> {
    if !(omega > 0.0) || !(q > 0.0) || !(dt > 0.0) {
        return Err(Error::config("discretize_mode needs positive ω, Q and dt"));
    }
    if q <= 0.5 {
        return Err(Error::UnsupportedRegime(format!("Q = {q} is not underdamped")));
    }
    let sigma = if q.is_infinite() { 0.0 } else { omega / (2.0 * q) };
    let wd = (omega * omega - sigma * sigma).sqrt();
    let (s, c) = (wd * dt).sin_cos();
    let e = (-sigma * dt).exp();
    let sw = s / wd;
    Ok(Matrix2::new(
        e * (c + sigma * sw),
        e * sw,
        -e * omega * omega * sw,
        e * (c - sigma * sw),
    ))
}

/// Zero-order-hold input column for drive `u`: `M⁻¹(Φ − I)·[0, −kω²]`.
fn drive_column(p: &ModeParams, phi: &Matrix2<f64>) -> Vector2<f64> {
    let w2 = p.omega * p.omega;
    let damping = if p.q.is_infinite() { 0.0 } else { p.omega / p.q };
    // M⁻¹ = (1/ω²)·[[−ω/Q, −1], [ω², 0]]
    let m_inv = Matrix2::new(-damping / w2, -1.0 / w2, 1.0, 0.0);
    let bc = Vector2::new(0.0, -p.k * w2);
    m_inv * ((phi - Matrix2::identity()) * bc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceModel {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub h: RowDVector<f64>,
    pub dt: f64,
    pub mode_params: Vec<ModeParams>,
}

impl StateSpaceModel {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    /// Copy with the coupling of mode `idx` negated in the drive map only.
    pub fn with_inverted_coupling(&self, idx: usize) -> Result<Self> {
        let mut params = self.mode_params.clone();
        let p = params
            .get_mut(idx)
            .ok_or_else(|| Error::contract(format!("no mode {idx}")))?;
        p.k = -p.k;
        assemble_model(&params, self.dt)
    }
}

pub fn assemble_model(mode_params: &[ModeParams], dt: f64) -> Result<StateSpaceModel> {
    if mode_params.is_empty() {
        return Err(Error::contract("model needs at least one mode"));
    }
    let n = 2 * mode_params.len();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DVector::zeros(n);
    let mut h = RowDVector::zeros(n);
    for (i, p) in mode_params.iter().enumerate() {
        let phi = discretize_mode(p.omega, p.q, dt)?;
        a.fixed_view_mut::<2, 2>(2 * i, 2 * i).copy_from(&phi);
        b.fixed_rows_mut::<2>(2 * i).copy_from(&drive_column(p, &phi));
        h[2 * i] = 1.0;
    }
    Ok(StateSpaceModel {
        a,
        b,
        h,
        dt,
        mode_params: mode_params.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Process noise `Q = q_scale · I`.
    pub q_scale: f64,
    /// Measurement noise variance `R`.
    pub r_scale: f64,
}

impl NoiseConfig {
    pub fn new(q_scale: f64, r_scale: f64) -> Result<Self> {
        let n = Self { q_scale, r_scale };
        n.validate()?;
        Ok(n)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q_scale >= 0.0) || !(self.r_scale > 0.0) {
            return Err(Error::config("need q_scale ≥ 0 and r_scale > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub x_hat: DVector<f64>,
    pub p: DMatrix<f64>,
}

impl KalmanState {
    /// `x̂ = 0`, `P = I`.
    pub fn initial(dim: usize) -> Self {
        Self {
            x_hat: DVector::zeros(dim),
            p: DMatrix::identity(dim, dim),
        }
    }
}

/// `x̂⁻ = A x̂ + B u`, `P⁻ = A P Aᵀ + Q`.
pub fn predict(state: &KalmanState, model: &StateSpaceModel, noise: &NoiseConfig, drive: f64) -> KalmanState {
    let x_hat = &model.a * &state.x_hat + &model.b * drive;
    let mut p = &model.a * &state.p * model.a.transpose();
    for i in 0..p.nrows() {
        p[(i, i)] += noise.q_scale;
    }
    KalmanState { x_hat, p }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Update {
    pub state: KalmanState,
    pub innovation: f64,
    /// Innovation variance `H P⁻ Hᵀ + R`.
    pub innovation_var: f64,
    pub gain: DVector<f64>,
}

/// Measurement update with Joseph-form covariance.
pub fn update(prior: &KalmanState, model: &StateSpaceModel, noise: &NoiseConfig, z: f64) -> Result<Update> {
    if !z.is_finite() {
        return Err(Error::MeasurementRejected(format!("measurement {z} is not finite")));
    }
    let ph = &prior.p * model.h.transpose();
    let s = (&model.h * &ph)[(0, 0)] + noise.r_scale;
    let gain = ph / s;
    let innovation = z - (&model.h * &prior.x_hat)[(0, 0)];
    let x_hat = &prior.x_hat + &gain * innovation;
    let n = prior.p.nrows();
    let ikh = DMatrix::identity(n, n) - &gain * &model.h;
    let mut p = &ikh * &prior.p * ikh.transpose() + (&gain * gain.transpose()) * noise.r_scale;
    // Remove rounding asymmetry.
    let pt = p.transpose();
    p = (p + pt) * 0.5;
    Ok(Update {
        state: KalmanState { x_hat, p },
        innovation,
        innovation_var: s,
        gain,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterRun {
    /// Posterior measurement estimate `H x̂ₜ`.
    pub estimate: TimeSeries,
    /// `zₜ − H x̂ₜ⁻`.
    pub innovations: TimeSeries,
    pub innovation_vars: Vec<f64>,
    pub final_state: KalmanState,
}

/// Sequential predict/update over every sample of `series`. `drive[t]` is
/// the known input held over the interval `(t, t+1]`; `None` means zero.
pub fn run_filter(
    series: &TimeSeries,
    model: &StateSpaceModel,
    noise: &NoiseConfig,
    drive: Option<&[f64]>,
    init: Option<KalmanState>,
) -> Result<FilterRun> {
    noise.validate()?;
    if ((series.dt() - model.dt) / model.dt).abs() > 1e-9 {
        return Err(Error::contract(format!(
            "series sample period {} differs from model dt {}",
            series.dt(),
            model.dt
        )));
    }
    if let Some(d) = drive {
        if d.len() < series.len() {
            return Err(Error::contract("drive series shorter than measurements"));
        }
    }
    let mut state = init.unwrap_or_else(|| KalmanState::initial(model.state_dim()));
    let mut est = Vec::with_capacity(series.len());
    let mut inn = Vec::with_capacity(series.len());
    let mut vars = Vec::with_capacity(series.len());
    for (t, &z) in series.values.iter().enumerate() {
        if t > 0 {
            let u = drive.map_or(0.0, |d| d[t - 1]);
            state = predict(&state, model, noise, u);
        }
        let up = update(&state, model, noise, z)?;
        inn.push(up.innovation);
        vars.push(up.innovation_var);
        state = up.state;
        est.push((&model.h * &state.x_hat)[(0, 0)]);
    }
    Ok(FilterRun {
        estimate: TimeSeries {
            sample_rate: series.sample_rate,
            values: est,
            labels: series.labels.clone(),
        },
        innovations: TimeSeries {
            sample_rate: series.sample_rate,
            values: inn,
            labels: series.labels.clone(),
        },
        innovation_vars: vars,
        final_state: state,
    })
}

/// One filter configuration of the covariance / coupling-sign sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepConfig {
    pub noise: NoiseConfig,
    pub invert_k1: bool,
}

impl SweepConfig {
    pub fn name(&self) -> String {
        format!(
            "Q={}_R={}{}",
            self.noise.q_scale,
            self.noise.r_scale,
            if self.invert_k1 { "_inv" } else { "" }
        )
    }
}

/// The four sweep configurations: (Q=1.0, R=0.1) and (Q=0.1, R=1.0), each
/// with the nominal and the inverted 100 Hz coupling sign.
pub fn fig4_configs() -> Vec<SweepConfig> {
    let mut out = Vec::new();
    for (q, r) in [(1.0, 0.1), (0.1, 1.0)] {
        for invert_k1 in [false, true] {
            out.push(SweepConfig {
                noise: NoiseConfig { q_scale: q, r_scale: r },
                invert_k1,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub config: SweepConfig,
    pub regime: Regime,
    pub rms_error: f64,
    pub innovation_rms: f64,
    /// Mean error over the final 20% of the segment, or 0 when that mean is
    /// statistically indistinguishable from zero.
    pub drift_offset: f64,
    pub mean_error_final20: f64,
    pub mean_error_final40: f64,
    /// Segment measurement, estimate (for overlay plots).
    pub measured: Vec<f64>,
    pub estimate: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn row(&self, q: f64, r: f64, invert_k1: bool, regime: Regime) -> Option<&SweepRow> {
        self.rows.iter().find(|row| {
            row.config.noise.q_scale == q && row.config.noise.r_scale == r && row.config.invert_k1 == invert_k1 && row.regime == regime
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("config,regime,rms_error_hz,innovation_rms,drift_offset_hz\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.config.name(),
                r.regime.as_str(),
                r.rms_error,
                r.innovation_rms,
                r.drift_offset
            );
        }
        out
    }
}

fn tail_mean(x: &[f64], fraction: f64) -> f64 {
    let n = ((x.len() as f64) * fraction).round().max(1.0) as usize;
    mean(&x[x.len() - n.min(x.len())..])
}

/// Whether the mean of `x` differs from zero by more than three standard
/// errors, estimated from ten block means (robust to autocorrelation).
fn mean_is_significant(x: &[f64]) -> bool {
    const BLOCKS: usize = 10;
    if x.len() < 2 * BLOCKS {
        return false;
    }
    let bl = x.len() / BLOCKS;
    let means: Vec<f64> = (0..BLOCKS).map(|b| mean(&x[b * bl..(b + 1) * bl])).collect();
    let m = mean(&means);
    let var = means.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (BLOCKS - 1) as f64;
    let se = (var / BLOCKS as f64).sqrt();
    m.abs() > 3.0 * se
}

/// Run each configuration over the longest stationary and the longest
/// transient run of `dataset` (fresh filter per run). Errors are
/// `estimate − measurement`.
pub fn fig4_experiment(
    dataset: &TimeSeries,
    drive: Option<&[f64]>,
    nominal: &[ModeParams],
    configs: &[SweepConfig],
) -> Result<SweepReport> {
    if dataset.labels.is_none() {
        return Err(Error::contract("sweep needs a labelled dataset"));
    }
    let model = assemble_model(nominal, dataset.dt())?;
    let inverted = model.with_inverted_coupling(0)?;
    let mut rows = Vec::new();
    for cfg in configs {
        let m = if cfg.invert_k1 { &inverted } else { &model };
        for regime in [Regime::Stationary, Regime::Transient] {
            let Some((s, e)) = dataset.longest_run(regime) else { continue };
            let seg = dataset.segment(s, e);
            let run = run_filter(&seg, m, &cfg.noise, drive.map(|d| &d[s..e]), None)?;
            let err: Vec<f64> = run.estimate.values.iter().zip(&seg.values).map(|(a, b)| a - b).collect();
            let tail = &err[err.len() - (err.len() / 5).max(1)..];
            let f20 = tail_mean(&err, 0.2);
            rows.push(SweepRow {
                config: *cfg,
                regime,
                rms_error: rms(&err),
                innovation_rms: rms(&run.innovations.values),
                drift_offset: if mean_is_significant(tail) { f20 } else { 0.0 },
                mean_error_final20: f20,
                mean_error_final40: tail_mean(&err, 0.4),
                measured: seg.values.clone(),
                estimate: run.estimate.values,
            });
        }
    }
    Ok(SweepReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overdamped_is_unsupported() {
        assert!(matches!(discretize_mode(1.0, 0.5, 1e-3), Err(Error::UnsupportedRegime(_))));
        assert!(discretize_mode(1.0, 0.51, 1e-3).is_ok());
    }

    #[test]
    fn single_mode_model_is_its_block() {
        let p = ModeParams::new(40.0, 400.0, -1.0);
        let m = assemble_model(&[p], 1e-3).unwrap();
        let blk = discretize_mode(p.omega, p.q, 1e-3).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(m.a[(i, j)], blk[(i, j)]);
            }
        }
    }

    #[test]
    fn design_dimensions_and_readout() {
        let m = assemble_model(&design_modes(), 1e-3).unwrap();
        assert_eq!(m.a.shape(), (6, 6));
        assert_eq!(m.h.len(), 6);
        let x = DVector::from_vec(vec![1.0, 0.0, 2.0, 0.0, 3.0, 0.0]);
        assert_eq!((&m.h * x)[(0, 0)], 6.0);
        assert!(assemble_model(&[], 1e-3).is_err());
    }

    #[test]
    fn non_finite_measurement_rejected() {
        let m = assemble_model(&design_modes(), 1e-3).unwrap();
        let s = KalmanState::initial(6);
        let n = NoiseConfig::new(1.0, 0.1).unwrap();
        assert!(matches!(update(&s, &m, &n, f64::NAN), Err(Error::MeasurementRejected(_))));
    }

    #[test]
    fn static_drive_gain() {
        // Constant drive drives each block to position −k·u.
        let p = ModeParams::new(10.0, 5.0, 0.7);
        let m = assemble_model(&[p], 1e-3).unwrap();
        let mut x = DVector::zeros(2);
        for _ in 0..20_000 {
            x = &m.a * x + &m.b * 2.0;
        }
        assert!((x[0] + 1.4).abs() < 1e-9);
    }
}
