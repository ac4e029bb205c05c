//! Coupled electromagnetic / mechanical cavity simulation.
//!
//! The RF envelope obeys
//!
//! ```text
//! d/dt [V_T,I]   [-ω½  -Δω] [V_T,I]       [V_F,I]
//!      [V_T,Q] = [ Δω  -ω½] [V_T,Q] + ω½ [V_F,Q]
//! ```
//!
//! and each mechanical mode is a damped oscillator driven by the stored
//! field (Lorentz force) and by external disturbances:
//!
//! ```text
//! Δω̈ₙ + (ωₙ/Qₙ) Δω̇ₙ + ωₙ² Δωₙ = −2π kₙ ωₙ² |V_T|² + fₙ(t)
//! ```
//!
//! Fields are normalized to the steady-state field magnitude, so with a unit
//! forward field and no detuning `|V_T|² = 1`. Mode states `Δωₙ` are in rad/s;
//! couplings `kₙ` are in Hz per normalized V², hence the `2π` above: the
//! static Lorentz detuning of a mode is `−kₙ |V_T|²` Hz. External forces
//! `fₙ` are in rad/s² and enter the acceleration equation directly.
//!
//! The simulator integrates the full coupled state with classical RK4 at an
//! internal rate (default 50 kHz) and decimates to the output sample rate.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::series::{Regime, TimeSeries};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CavityConfig {
    /// Carrier frequency, Hz.
    pub f0: f64,
    pub q_loaded: f64,
    /// Accelerating gradient, MV/m. Informational: fields are normalized.
    pub gradient: f64,
    /// Output sample rate, Hz.
    pub sample_rate: f64,
}

impl Default for CavityConfig {
    fn default() -> Self {
        Self {
            f0: 1.3e9,
            q_loaded: 4e6,
            gradient: 9.5,
            sample_rate: 1000.0,
        }
    }
}

impl CavityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.f0 > 0.0) || !(self.q_loaded > 0.0) || !(self.sample_rate > 0.0) {
            return Err(Error::config("f0, q_loaded and sample_rate must be positive"));
        }
        Ok(())
    }
}

/// Half-bandwidth `ω½ = 2π f0 / (2 Q_L)` in rad/s.
pub fn half_bandwidth(config: &CavityConfig) -> Result<f64> {
    config.validate()?;
    Ok(TAU * config.f0 / (2.0 * config.q_loaded))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RfState {
    pub vt_i: f64,
    pub vt_q: f64,
    pub vf_i: f64,
    pub vf_q: f64,
}

impl RfState {
    pub fn field_sq(&self) -> f64 {
        self.vt_i * self.vt_i + self.vt_q * self.vt_q
    }
}

#[inline]
fn rf_deriv(vt: [f64; 2], vf: [f64; 2], detuning: f64, half_bw: f64) -> [f64; 2] {
    [
        -half_bw * vt[0] - detuning * vt[1] + half_bw * vf[0],
        detuning * vt[0] - half_bw * vt[1] + half_bw * vf[1],
    ]
}

/// One RK4 step of the RF envelope with detuning and forward field held
/// constant over the step.
pub fn rf_step(state: RfState, detuning: f64, dt: f64, half_bw: f64) -> Result<RfState> {
    if !(dt > 0.0) || !(dt * half_bw < 0.5) {
        return Err(Error::config(format!(
            "RF step dt={dt} with half-bandwidth {half_bw} violates dt·ω½ < 0.5"
        )));
    }
    let vf = [state.vf_i, state.vf_q];
    let f = |v: [f64; 2]| rf_deriv(v, vf, detuning, half_bw);
    let v0 = [state.vt_i, state.vt_q];
    let k1 = f(v0);
    let k2 = f([v0[0] + 0.5 * dt * k1[0], v0[1] + 0.5 * dt * k1[1]]);
    let k3 = f([v0[0] + 0.5 * dt * k2[0], v0[1] + 0.5 * dt * k2[1]]);
    let k4 = f([v0[0] + dt * k3[0], v0[1] + dt * k3[1]]);
    Ok(RfState {
        vt_i: v0[0] + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        vt_q: v0[1] + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        ..state
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanicalMode {
    /// Angular frequency, rad/s.
    pub omega_n: f64,
    /// Quality factor; `f64::INFINITY` gives an undamped mode.
    pub q_n: f64,
    /// Lorentz coupling, Hz per normalized V². Sign carries direction.
    pub k_n: f64,
    /// Detuning contribution Δωₙ, rad/s.
    pub pos: f64,
    /// dΔωₙ/dt, rad/s².
    pub vel: f64,
}

impl MechanicalMode {
    pub fn new(freq_hz: f64, q_n: f64, k_n: f64) -> Self {
        Self {
            omega_n: TAU * freq_hz,
            q_n,
            k_n,
            pos: 0.0,
            vel: 0.0,
        }
    }

    pub fn freq_hz(&self) -> f64 {
        self.omega_n / TAU
    }

    /// Static Lorentz-force equilibrium for a constant `field_sq`.
    pub fn at_static_equilibrium(mut self, field_sq: f64) -> Self {
        self.pos = -TAU * self.k_n * field_sq;
        self.vel = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega_n > 0.0) || !(self.q_n > 0.0) || !self.k_n.is_finite() {
            return Err(Error::config("mode needs omega_n > 0, q_n > 0 and finite k_n"));
        }
        Ok(())
    }

    #[inline]
    fn damping(&self) -> f64 {
        if self.q_n.is_infinite() {
            0.0
        } else {
            self.omega_n / self.q_n
        }
    }

    #[inline]
    fn accel(&self, pos: f64, vel: f64, field_sq: f64, ext_force: f64) -> f64 {
        let w2 = self.omega_n * self.omega_n;
        -self.damping() * vel - w2 * pos - TAU * self.k_n * w2 * field_sq + ext_force
    }
}

/// One RK4 step of a mechanical mode with field and external force held
/// constant over the step.
pub fn mode_step(mode: MechanicalMode, field_sq: f64, ext_force: f64, dt: f64) -> Result<MechanicalMode> {
    if !(dt > 0.0) || !(dt * mode.omega_n < 0.5) {
        return Err(Error::config(format!(
            "mode step dt={dt} with ωₙ={} violates dt·ωₙ < 0.5",
            mode.omega_n
        )));
    }
    let f = |p: f64, v: f64| (v, mode.accel(p, v, field_sq, ext_force));
    let (p0, v0) = (mode.pos, mode.vel);
    let k1 = f(p0, v0);
    let k2 = f(p0 + 0.5 * dt * k1.0, v0 + 0.5 * dt * k1.1);
    let k3 = f(p0 + 0.5 * dt * k2.0, v0 + 0.5 * dt * k2.1);
    let k4 = f(p0 + dt * k3.0, v0 + dt * k3.1);
    Ok(MechanicalMode {
        pos: p0 + dt / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
        vel: v0 + dt / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
        ..mode
    })
}

/// Total detuning Δω = Σ Δωₙ, rad/s.
pub fn total_detuning(modes: &[MechanicalMode]) -> f64 {
    modes.iter().map(|m| m.pos).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Envelope {
    Constant,
    /// `½(1 − cos(2π (t − start)/duration))` over the event.
    RaisedCosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DisturbanceKind {
    /// `amplitude · envelope · sin(2π f t + phase)`.
    Sinusoid { freq_hz: f64, phase: f64, envelope: Envelope },
    /// Velocity increment of `amplitude` rad/s applied at `start`.
    Impulse,
    /// Constant force `amplitude` over the event.
    Step,
    /// Gaussian force with standard deviation `amplitude`, held constant
    /// over each output sample period.
    Noise { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disturbance {
    pub kind: DisturbanceKind,
    pub mode: usize,
    /// rad/s² for forces, rad/s for impulses.
    pub amplitude: f64,
    pub start: f64,
    pub duration: f64,
    /// Whether this event's activity window counts as transient regime.
    pub marks_transient: bool,
}

impl Disturbance {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceProfile {
    events: Vec<Disturbance>,
}

impl DisturbanceProfile {
    pub fn new(mut events: Vec<Disturbance>) -> Result<Self> {
        if let Some(e) = events.iter().find(|e| !(e.duration >= 0.0) || !e.start.is_finite()) {
            return Err(Error::config(format!("disturbance with invalid timing: {e:?}")));
        }
        events.sort_by(|a, b| a.start.total_cmp(&b.start));
        Ok(Self { events })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn events(&self) -> &[Disturbance] {
        &self.events
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Drive {
    Off,
    /// Constant forward field along the in-phase axis.
    Constant { amplitude: f64 },
}

impl Drive {
    fn forward(&self) -> [f64; 2] {
        match self {
            Drive::Off => [0.0, 0.0],
            Drive::Constant { amplitude } => [*amplitude, 0.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Internal integration rate, Hz; must be an integer multiple of the
    /// output sample rate.
    pub internal_rate: f64,
    /// Time after a transient-marking event's end still labelled transient
    /// (ring-down of the excited modes), s.
    pub label_margin: f64,
    /// Start the RF field at its zero-detuning steady state instead of zero.
    pub rf_steady_start: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            internal_rate: 50_000.0,
            label_margin: 0.0,
            rf_steady_start: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    /// Total detuning in Hz with regime labels.
    pub series: TimeSeries,
    /// `|V_T|²` at each output sample.
    pub field_sq: Vec<f64>,
}

struct ForceTable<'a> {
    events: &'a [Disturbance],
    noise: Vec<Vec<f64>>,
    sample_rate: f64,
}

impl<'a> ForceTable<'a> {
    fn new(events: &'a [Disturbance], sample_rate: f64) -> Self {
        let noise = events
            .iter()
            .map(|e| match e.kind {
                DisturbanceKind::Noise { seed } => {
                    let n = (e.duration * sample_rate).ceil() as usize + 1;
                    let mut r: Rng = rng::seeded(seed);
                    (0..n).map(|_| e.amplitude * rng::normal(&mut r)).collect()
                }
                _ => Vec::new(),
            })
            .collect();
        Self {
            events,
            noise,
            sample_rate,
        }
    }

    /// Force on each mode at stage time `t` of the step starting at
    /// `t_step`. Piecewise-constant sources are indexed by the step start so
    /// that their switching points coincide with step boundaries.
    fn eval(&self, active: &[usize], t_step: f64, t: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|f| *f = 0.0);
        let eps = 1e-12;
        for &idx in active {
            let e = &self.events[idx];
            if e.mode >= out.len() {
                continue;
            }
            let active = |tt: f64| tt >= e.start - eps && tt < e.end() - eps;
            let f = match e.kind {
                DisturbanceKind::Sinusoid { freq_hz, phase, envelope } => {
                    if !(t >= e.start && t <= e.end()) {
                        continue;
                    }
                    let env = match envelope {
                        Envelope::Constant => 1.0,
                        Envelope::RaisedCosine => {
                            if e.duration > 0.0 {
                                0.5 * (1.0 - (TAU * (t - e.start) / e.duration).cos())
                            } else {
                                0.0
                            }
                        }
                    };
                    e.amplitude * env * (TAU * freq_hz * t + phase).sin()
                }
                DisturbanceKind::Step => {
                    if !active(t_step) {
                        continue;
                    }
                    e.amplitude
                }
                DisturbanceKind::Noise { .. } => {
                    if !active(t_step) {
                        continue;
                    }
                    let h = ((t_step - e.start) * self.sample_rate + eps).floor().max(0.0) as usize;
                    self.noise[idx].get(h).copied().unwrap_or(0.0)
                }
                DisturbanceKind::Impulse => continue,
            };
            out[e.mode] += f;
        }
    }
}

/// Integrate the coupled RF / mechanical system for `duration` seconds.
/// Returns detuning in Hz at the configured sample rate, labelled transient
/// wherever a transient-marking disturbance is active (plus the label
/// margin).
pub fn simulate(
    config: &CavityConfig,
    modes: &[MechanicalMode],
    drive: Drive,
    disturbances: &DisturbanceProfile,
    duration: f64,
    options: &SimOptions,
) -> Result<Simulation> {
    config.validate()?;
    for m in modes {
        m.validate()?;
    }
    let ratio = options.internal_rate / config.sample_rate;
    let sub = ratio.round();
    if !(sub >= 1.0) || (ratio - sub).abs() > 1e-9 * ratio {
        return Err(Error::config(format!(
            "internal rate {} is not an integer multiple of sample rate {}",
            options.internal_rate, config.sample_rate
        )));
    }
    let sub = sub as usize;
    let dt = 1.0 / options.internal_rate;
    let half_bw = half_bandwidth(config)?;
    if dt * half_bw >= 0.5 {
        return Err(Error::config("internal step too coarse for the RF half-bandwidth"));
    }
    if let Some(m) = modes.iter().find(|m| dt * m.omega_n >= 0.5) {
        return Err(Error::config(format!("internal step too coarse for mode at {} Hz", m.freq_hz())));
    }

    let n_out = (duration * config.sample_rate).round() as usize;
    let vf = drive.forward();
    let mut rf = if options.rf_steady_start {
        [vf[0], vf[1]]
    } else {
        [0.0, 0.0]
    };
    let nm = modes.len();
    let mut pos: Vec<f64> = modes.iter().map(|m| m.pos).collect();
    let mut vel: Vec<f64> = modes.iter().map(|m| m.vel).collect();

    let forces = ForceTable::new(disturbances.events(), config.sample_rate);
    let mut impulses: Vec<&Disturbance> = disturbances
        .events()
        .iter()
        .filter(|e| matches!(e.kind, DisturbanceKind::Impulse) && e.mode < nm)
        .collect();
    impulses.reverse();

    let mut values = Vec::with_capacity(n_out);
    let mut field = Vec::with_capacity(n_out);

    // Scratch buffers for the RK4 stages.
    let mut f_ext = vec![0.0; nm];
    let mut kp = vec![[0.0; 4]; nm];
    let mut kv = vec![[0.0; 4]; nm];
    let mut kr = [[0.0; 2]; 4];
    let mut sp = vec![0.0; nm];
    let mut sv = vec![0.0; nm];

    let events = disturbances.events();
    let mut cursor = 0;
    let mut active: Vec<usize> = Vec::new();

    for out_idx in 0..n_out {
        values.push(pos.iter().sum::<f64>() / TAU);
        field.push(rf[0] * rf[0] + rf[1] * rf[1]);
        let t_a = (out_idx * sub) as f64 * dt;
        let t_b = ((out_idx + 1) * sub) as f64 * dt;
        while cursor < events.len() && events[cursor].start <= t_b + 1e-9 {
            active.push(cursor);
            cursor += 1;
        }
        active.retain(|&i| events[i].end() >= t_a - 1e-9);
        for s in 0..sub {
            let step = out_idx * sub + s;
            let t0 = step as f64 * dt;
            while let Some(e) = impulses.last() {
                if e.start <= t0 + 1e-12 {
                    vel[e.mode] += e.amplitude;
                    impulses.pop();
                } else {
                    break;
                }
            }
            let mut stage_rf = rf;
            for stage in 0..4 {
                let (h, coef) = match stage {
                    0 => (0.0, 0.0),
                    1 | 2 => (0.5 * dt, 0.5 * dt),
                    _ => (dt, dt),
                };
                if stage > 0 {
                    stage_rf = [rf[0] + coef * kr[stage - 1][0], rf[1] + coef * kr[stage - 1][1]];
                    for i in 0..nm {
                        sp[i] = pos[i] + coef * kp[i][stage - 1];
                        sv[i] = vel[i] + coef * kv[i][stage - 1];
                    }
                } else {
                    sp.copy_from_slice(&pos);
                    sv.copy_from_slice(&vel);
                }
                forces.eval(&active, t0, t0 + h, &mut f_ext);
                let detuning: f64 = sp.iter().sum();
                let fsq = stage_rf[0] * stage_rf[0] + stage_rf[1] * stage_rf[1];
                kr[stage] = rf_deriv(stage_rf, vf, detuning, half_bw);
                for (i, m) in modes.iter().enumerate() {
                    kp[i][stage] = sv[i];
                    kv[i][stage] = m.accel(sp[i], sv[i], fsq, f_ext[i]);
                }
            }
            for c in 0..2 {
                rf[c] += dt / 6.0 * (kr[0][c] + 2.0 * kr[1][c] + 2.0 * kr[2][c] + kr[3][c]);
            }
            for i in 0..nm {
                pos[i] += dt / 6.0 * (kp[i][0] + 2.0 * kp[i][1] + 2.0 * kp[i][2] + kp[i][3]);
                vel[i] += dt / 6.0 * (kv[i][0] + 2.0 * kv[i][1] + 2.0 * kv[i][2] + kv[i][3]);
            }
            let finite = rf.iter().all(|v| v.is_finite()) && pos.iter().chain(&vel).all(|v| v.is_finite());
            if !finite || pos.iter().any(|p| p.abs() > 1e12) {
                return Err(Error::Diverged { step });
            }
        }
    }

    let labels = regime_labels(disturbances, n_out, config.sample_rate, options.label_margin);
    Ok(Simulation {
        series: TimeSeries::with_labels(config.sample_rate, values, labels)?,
        field_sq: field,
    })
}

/// Per-sample regime labels: transient inside `[start, end + margin]` of any
/// transient-marking event.
pub fn regime_labels(disturbances: &DisturbanceProfile, n: usize, sample_rate: f64, margin: f64) -> Vec<Regime> {
    let mut labels = vec![Regime::Stationary; n];
    for e in disturbances.events().iter().filter(|e| e.marks_transient) {
        let lo = (e.start * sample_rate).ceil().max(0.0) as usize;
        let hi = ((e.end() + margin) * sample_rate).floor().max(-1.0);
        if hi < 0.0 {
            continue;
        }
        let hi = (hi as usize).min(n.saturating_sub(1));
        for l in labels.iter_mut().take(hi + 1).skip(lo) {
            *l = Regime::Transient;
        }
    }
    labels
}

// ---------------------------------------------------------------------------
// Synthetic regime datasets.

/// Nominal stationary modes: 100 Hz / 40 Hz / 10 Hz.
pub fn nominal_modes() -> Vec<MechanicalMode> {
    vec![
        MechanicalMode::new(100.0, 1000.0, 1.0),
        MechanicalMode::new(40.0, 400.0, -1.0),
        MechanicalMode::new(10.0, 100.0, 0.1),
    ]
}

/// Knobs of the synthetic stationary/transient dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegimeDatasetConfig {
    pub cavity: CavityConfig,
    /// Overall scale applied to every disturbance-driven amplitude.
    pub amplitude_scale: f64,
    pub stationary_s: f64,
    pub transient_s: f64,
    pub cycles: usize,
    /// Discarded lead-in so the high-Q modes reach their driven state.
    pub warmup_s: f64,
    /// Driven amplitudes of the 100 / 40 / 10 Hz modes, Hz.
    pub stationary_amplitudes: [f64; 3],
    /// Standard deviation of the random part of each stationary mode, Hz.
    pub stationary_jitter: [f64; 3],
    /// Typical response amplitude of the 64 Hz transient mode, Hz.
    pub transient_64_amplitude: f64,
    /// Surge factor of the 64 Hz kicks relative to the chopped bursts.
    pub kick_factor: f64,
    /// Typical response amplitude of the 285 Hz transient mode, Hz.
    pub transient_285_amplitude: f64,
    pub transient_64_q: f64,
    pub transient_285_q: f64,
    /// White sensor noise, Hz rms.
    pub sensor_noise: f64,
    pub drive_amplitude: f64,
    pub internal_rate: f64,
}

impl Default for RegimeDatasetConfig {
    fn default() -> Self {
        Self {
            cavity: CavityConfig::default(),
            amplitude_scale: 1.0,
            stationary_s: 6.0,
            transient_s: 4.0,
            cycles: 6,
            warmup_s: 12.0,
            stationary_amplitudes: [3.0, 1.2, 0.8],
            stationary_jitter: [0.6, 0.3, 0.2],
            transient_64_amplitude: 6.0,
            kick_factor: 2.5,
            transient_285_amplitude: 8.0,
            transient_64_q: 15.0,
            transient_285_q: 40.0,
            sensor_noise: 0.25,
            drive_amplitude: 1.0,
            internal_rate: 50_000.0,
        }
    }
}

impl RegimeDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.cavity.validate()?;
        if !(self.amplitude_scale >= 0.0) || !(self.sensor_noise >= 0.0) {
            return Err(Error::config("amplitude_scale and sensor_noise must be non-negative"));
        }
        if !(self.stationary_s > 0.0) || !(self.transient_s >= 0.0) || self.cycles == 0 {
            return Err(Error::config("segment lengths must be positive and cycles ≥ 1"));
        }
        if !(self.transient_64_q > 0.5) || !(self.transient_285_q > 0.5) {
            return Err(Error::config("transient mode quality factors must exceed 0.5"));
        }
        Ok(())
    }

    /// Labelling margin: five amplitude time constants `2Q/ω` of the slowest
    /// transient mode.
    pub fn label_margin(&self) -> f64 {
        let tau64 = 2.0 * self.transient_64_q / (TAU * 64.0);
        let tau285 = 2.0 * self.transient_285_q / (TAU * 285.0);
        5.0 * tau64.max(tau285)
    }

    pub fn total_duration(&self) -> f64 {
        self.cycles as f64 * (self.stationary_s + self.transient_s)
    }
}

/// Mode list used by the dataset: the three nominal modes followed by the
/// 64 Hz and 285 Hz modes that only transient events excite.
pub fn dataset_modes(cfg: &RegimeDatasetConfig) -> Vec<MechanicalMode> {
    let mut modes = nominal_modes();
    modes.push(MechanicalMode::new(64.0, cfg.transient_64_q, 0.0));
    modes.push(MechanicalMode::new(285.0, cfg.transient_285_q, 0.0));
    modes
}

/// Force amplitude (rad/s²) that drives a mode on resonance to a response
/// amplitude of `amp_hz`.
fn resonant_force(mode: &MechanicalMode, amp_hz: f64) -> f64 {
    TAU * amp_hz * mode.omega_n * mode.omega_n / mode.q_n
}

/// Standard deviation of a sample-and-hold white force (hold `h`) producing
/// a response standard deviation of `std_hz`.
fn noise_force(mode: &MechanicalMode, std_hz: f64, hold: f64) -> f64 {
    let w3 = mode.omega_n.powi(3);
    TAU * std_hz * (2.0 * w3 / (hold * mode.q_n)).sqrt()
}

/// Disturbances that keep the three nominal modes ringing over `[t0, t1)`.
fn stationary_events(cfg: &RegimeDatasetConfig, modes: &[MechanicalMode], t0: f64, t1: f64, rng: &mut Rng) -> Vec<Disturbance> {
    let hold = 1.0 / cfg.cavity.sample_rate;
    let mut ev = Vec::new();
    for i in 0..3 {
        let m = &modes[i];
        ev.push(Disturbance {
            kind: DisturbanceKind::Sinusoid {
                freq_hz: m.freq_hz(),
                phase: rng::uniform(rng, 0.0, TAU),
                envelope: Envelope::Constant,
            },
            mode: i,
            amplitude: cfg.amplitude_scale * resonant_force(m, cfg.stationary_amplitudes[i]),
            start: t0,
            duration: t1 - t0,
            marks_transient: false,
        });
        if cfg.stationary_jitter[i] > 0.0 {
            ev.push(Disturbance {
                kind: DisturbanceKind::Noise {
                    seed: rng::uniform(rng, 0.0, 1.0).to_bits(),
                },
                mode: i,
                amplitude: cfg.amplitude_scale * noise_force(m, cfg.stationary_jitter[i], hold),
                start: t0,
                duration: t1 - t0,
                marks_transient: false,
            });
        }
    }
    ev
}

/// Chopped 64 Hz bursts with occasional kick-like surges, plus 285 Hz
/// bursts, filling `[t0, t1)`.
fn transient_events(cfg: &RegimeDatasetConfig, modes: &[MechanicalMode], t0: f64, t1: f64, rng: &mut Rng) -> Vec<Disturbance> {
    let mut ev = Vec::new();
    let m64 = &modes[3];
    let m285 = &modes[4];
    // Raised-cosine bursts deliver roughly half the resonant steady-state
    // amplitude for burst lengths near the mode time constant.
    let f64_unit = 2.0 * resonant_force(m64, cfg.transient_64_amplitude);
    let mut t = t0;
    while t < t1 - 0.05 {
        let kick = rng::uniform(rng, 0.0, 1.0) < 0.25;
        let dur = if kick {
            rng::uniform(rng, 0.08, 0.15)
        } else {
            rng::uniform(rng, 0.05, 0.14)
        };
        let dur = dur.min(t1 - t);
        let level = if kick {
            cfg.kick_factor * rng::uniform(rng, 0.8, 1.2)
        } else {
            rng::uniform(rng, 0.5, 1.0)
        };
        ev.push(Disturbance {
            kind: DisturbanceKind::Sinusoid {
                freq_hz: 64.0,
                phase: rng::uniform(rng, 0.0, TAU),
                envelope: Envelope::RaisedCosine,
            },
            mode: 3,
            amplitude: cfg.amplitude_scale * level * f64_unit,
            start: t,
            duration: dur,
            marks_transient: true,
        });
        t += dur + rng::uniform(rng, 0.0, 0.06);
    }
    let f285_unit = 2.0 * resonant_force(m285, cfg.transient_285_amplitude);
    let mut t = t0 + rng::uniform(rng, 0.0, 0.2);
    while t < t1 - 0.05 {
        let dur = rng::uniform(rng, 0.06, 0.2).min(t1 - t);
        ev.push(Disturbance {
            kind: DisturbanceKind::Sinusoid {
                freq_hz: 285.0,
                phase: rng::uniform(rng, 0.0, TAU),
                envelope: Envelope::RaisedCosine,
            },
            mode: 4,
            amplitude: cfg.amplitude_scale * rng::uniform(rng, 0.6, 1.2) * f285_unit,
            start: t,
            duration: dur,
            marks_transient: true,
        });
        t += dur + rng::uniform(rng, 0.1, 0.4);
    }
    ev
}

fn add_sensor_noise(values: &mut [f64], sigma: f64, rng: &mut Rng) {
    if sigma > 0.0 {
        values.iter_mut().for_each(|v| *v += sigma * rng::normal(rng));
    }
}

fn run_with_warmup(
    cfg: &RegimeDatasetConfig,
    modes: &[MechanicalMode],
    mut events: Vec<Disturbance>,
    seed: u64,
) -> Result<Simulation> {
    // Event times are laid out on [0, warmup + total); the first `warmup`
    // seconds are dropped afterwards.
    for e in &mut events {
        e.start += cfg.warmup_s;
    }
    let profile = DisturbanceProfile::new(events)?;
    let total = cfg.warmup_s + cfg.total_duration();
    let options = SimOptions {
        internal_rate: cfg.internal_rate,
        label_margin: cfg.label_margin(),
        rf_steady_start: true,
    };
    let drive = Drive::Constant {
        amplitude: cfg.drive_amplitude,
    };
    let start_modes: Vec<MechanicalMode> = modes
        .iter()
        .map(|m| m.at_static_equilibrium(cfg.drive_amplitude * cfg.drive_amplitude))
        .collect();
    let sim = simulate(&cfg.cavity, &start_modes, drive, &profile, total, &options)?;
    let skip = (cfg.warmup_s * cfg.cavity.sample_rate).round() as usize;
    let mut series = sim.series.segment(skip, sim.series.len());
    let mut noise_rng = rng::substream(seed, 0x5e45);
    add_sensor_noise(&mut series.values, cfg.sensor_noise * cfg.amplitude_scale, &mut noise_rng);
    Ok(Simulation {
        series,
        field_sq: sim.field_sq[skip..].to_vec(),
    })
}

/// Labelled dataset alternating stationary segments (100/40/10 Hz modes
/// driven near resonance with slow random jitter) and transient segments
/// (chopped 64 Hz oscillation with kick-like surges plus 285 Hz bursts on
/// top of the stationary content). Deterministic in `seed`.
pub fn generate_regime_dataset(seed: u64, cfg: &RegimeDatasetConfig) -> Result<Simulation> {
    cfg.validate()?;
    let modes = dataset_modes(cfg);
    let mut rng = rng::substream(seed, 0xda7a);
    let total = cfg.total_duration();
    let mut events = stationary_events(cfg, &modes, -cfg.warmup_s, total, &mut rng);
    for c in 0..cfg.cycles {
        let t0 = c as f64 * (cfg.stationary_s + cfg.transient_s) + cfg.stationary_s;
        if cfg.transient_s > 0.0 {
            events.extend(transient_events(cfg, &modes, t0, t0 + cfg.transient_s, &mut rng));
        }
    }
    run_with_warmup(cfg, &modes, events, seed)
}

/// Stationary operation followed, at `onset_s`, by a sustained strong
/// 285 Hz excitation without any 64 Hz activity: a regime the training
/// dataset never contains. Returns the simulation and the onset sample.
pub fn generate_novel_regime(seed: u64, cfg: &RegimeDatasetConfig, onset_s: f64, duration_s: f64, surge: f64) -> Result<(Simulation, usize)> {
    let mut cfg = cfg.clone();
    cfg.cycles = 1;
    cfg.stationary_s = duration_s;
    cfg.transient_s = 0.0;
    cfg.validate()?;
    let modes = dataset_modes(&cfg);
    let mut rng = rng::substream(seed, 0xa707);
    let mut events = stationary_events(&cfg, &modes, -cfg.warmup_s, duration_s, &mut rng);
    events.push(Disturbance {
        kind: DisturbanceKind::Sinusoid {
            freq_hz: 285.0,
            phase: rng::uniform(&mut rng, 0.0, PI),
            envelope: Envelope::Constant,
        },
        mode: 4,
        amplitude: cfg.amplitude_scale * surge * resonant_force(&modes[4], cfg.transient_285_amplitude),
        start: onset_s,
        duration: duration_s - onset_s,
        marks_transient: true,
    });
    let sim = run_with_warmup(&cfg, &modes, events, seed)?;
    let onset = (onset_s * cfg.cavity.sample_rate).round() as usize;
    Ok((sim, onset))
}
