use std::f64::consts::TAU;

use kind_core::cavity::{
    generate_novel_regime, generate_regime_dataset, half_bandwidth, mode_step, nominal_modes, rf_step, simulate, CavityConfig, Disturbance,
    DisturbanceKind, DisturbanceProfile, Drive, Envelope, MechanicalMode, RegimeDatasetConfig, RfState, SimOptions, Simulation,
};
use kind_core::series::{rms, Regime};
use kind_core::spectrum::analyze_segment;

fn half_bw() -> f64 {
    half_bandwidth(&CavityConfig::default()).unwrap()
}

/// `(a + ib)(c + id)`
fn cmul(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] * b[0] - a[1] * b[1], a[0] * b[1] + a[1] * b[0]]
}

fn cdiv(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let d = b[0] * b[0] + b[1] * b[1];
    [(a[0] * b[0] + a[1] * b[1]) / d, (a[1] * b[0] - a[0] * b[1]) / d]
}

fn sinusoid(mode: usize, freq_hz: f64, amplitude: f64, start: f64, duration: f64) -> Disturbance {
    Disturbance {
        kind: DisturbanceKind::Sinusoid {
            freq_hz,
            phase: 0.3,
            envelope: Envelope::Constant,
        },
        mode,
        amplitude,
        start,
        duration,
        marks_transient: false,
    }
}

fn small_dataset() -> RegimeDatasetConfig {
    RegimeDatasetConfig {
        stationary_s: 1.5,
        transient_s: 1.0,
        cycles: 2,
        warmup_s: 2.0,
        ..Default::default()
    }
}

#[test]
fn half_bandwidth_matches_loaded_q() {
    let expected = TAU * 1.3e9 / (2.0 * 4e6);
    assert!((half_bw() - expected).abs() < 1e-9);
    assert!((half_bw() - TAU * 162.5).abs() < 1e-9);
}

#[test]
fn rf_free_decay_is_exponential() {
    let w = half_bw();
    let dt = 1e-5;
    let mut s = RfState {
        vt_i: 0.6,
        vt_q: 0.8,
        ..Default::default()
    };
    for step in 1..=10 {
        s = rf_step(s, 0.0, dt, w).unwrap();
        let t = step as f64 * dt;
        let expected = (-w * t).exp();
        assert!((s.field_sq().sqrt() - expected).abs() < 1e-6, "step {step}");
    }
}

#[test]
fn rf_detuned_decay_rotates() {
    let w = half_bw();
    let dt = 1e-5;
    let detuning = 300.0;
    let v0 = [0.6, 0.8];
    let mut s = RfState {
        vt_i: v0[0],
        vt_q: v0[1],
        ..Default::default()
    };
    for _ in 0..1000 {
        s = rf_step(s, detuning, dt, w).unwrap();
    }
    let t = 1000.0 * dt;
    let e = (-w * t).exp();
    let expected = cmul(v0, [e * (detuning * t).cos(), e * (detuning * t).sin()]);
    assert!((s.vt_i - expected[0]).abs() < 1e-9 * e);
    assert!((s.vt_q - expected[1]).abs() < 1e-9 * e);
}

#[test]
fn rf_steady_state_matches_closed_form() {
    let w = half_bw();
    let detuning = 400.0;
    let vf = [1.0, 0.3];
    let mut s = RfState {
        vf_i: vf[0],
        vf_q: vf[1],
        ..Default::default()
    };
    for _ in 0..20_000 {
        s = rf_step(s, detuning, 1e-5, w).unwrap();
    }
    let expected = cdiv([w * vf[0], w * vf[1]], [w, -detuning]);
    assert!((s.vt_i - expected[0]).abs() < 1e-10);
    assert!((s.vt_q - expected[1]).abs() < 1e-10);
    assert!(rf_step(s, detuning, 1e-3, w).is_err());
}

#[test]
fn damped_mode_follows_closed_form() {
    let f = 10.0;
    let q = 50.0;
    let dt = 1e-4;
    let mut m = MechanicalMode::new(f, q, 0.0);
    m.pos = 1.0;
    let w = TAU * f;
    let sigma = w / (2.0 * q);
    let wd = (w * w - sigma * sigma).sqrt();
    let period = TAU / wd;
    let steps = (5.0 * period / dt).round() as usize;
    let mut prev = (m.pos, m.pos);
    for step in 1..=steps {
        m = mode_step(m, 0.0, 0.0, dt).unwrap();
        let t = step as f64 * dt;
        let x = (-sigma * t).exp() * ((wd * t).cos() + sigma / wd * (wd * t).sin());
        assert!((m.pos - x).abs() < 1e-6, "step {step}");
        // Local maxima sit on the exp(−ωt/2Q) envelope.
        if prev.1 > prev.0 && prev.1 > m.pos && step > 2 {
            let tp = (step - 1) as f64 * dt;
            let env = (-w * tp / (2.0 * q)).exp();
            assert!((prev.1 / env - 1.0).abs() < 0.01, "peak at {tp}");
        }
        prev = (prev.1, m.pos);
    }
}

#[test]
fn undamped_mode_conserves_energy() {
    let mut m = MechanicalMode::new(100.0, f64::INFINITY, 0.0);
    m.pos = 2.0;
    let w2 = m.omega_n * m.omega_n;
    let energy = |m: &MechanicalMode| w2 * m.pos * m.pos + m.vel * m.vel;
    let e0 = energy(&m);
    for _ in 0..10_000 {
        m = mode_step(m, 0.0, 0.0, 2e-5).unwrap();
    }
    assert!((energy(&m) / e0 - 1.0).abs() < 1e-6);
}

#[test]
fn constant_field_settles_at_static_gain() {
    let k = 0.7;
    let field = 0.64;
    let mut m = MechanicalMode::new(20.0, 5.0, k);
    for _ in 0..20_000 {
        m = mode_step(m, field, 0.0, 1e-4).unwrap();
    }
    let expected = -TAU * k * field;
    assert!((m.pos - expected).abs() < 1e-9 * expected.abs());
    let eq = MechanicalMode::new(20.0, 5.0, k).at_static_equilibrium(field);
    assert_eq!(eq.pos, expected);
    let still = mode_step(eq, field, 0.0, 1e-4).unwrap();
    assert!((still.pos - expected).abs() < 1e-12 && still.vel.abs() < 1e-9);
}

#[test]
fn lorentz_self_detuning_reaches_fixed_point() {
    let k = 100.0;
    let w = half_bw();
    // |V|² = ω½² / (ω½² + (2π k |V|²)²), solved by bisection.
    let g = |fsq: f64| fsq - w * w / (w * w + (TAU * k * fsq).powi(2));
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let fsq = 0.5 * (lo + hi);
    assert!(fsq > 0.5 && fsq < 0.9);
    let modes = [MechanicalMode::new(50.0, 2.0, k)];
    let sim = simulate(
        &CavityConfig::default(),
        &modes,
        Drive::Constant { amplitude: 1.0 },
        &DisturbanceProfile::empty(),
        1.0,
        &SimOptions::default(),
    )
    .unwrap();
    let last = *sim.series.values.last().unwrap();
    assert!((last - (-k * fsq)).abs() < 1e-6 * k * fsq, "{last} vs {}", -k * fsq);
    assert!((sim.field_sq.last().unwrap() - fsq).abs() < 1e-6);
}

#[test]
fn quiet_system_stays_at_zero() {
    let sim = simulate(
        &CavityConfig::default(),
        &nominal_modes(),
        Drive::Off,
        &DisturbanceProfile::empty(),
        0.5,
        &SimOptions::default(),
    )
    .unwrap();
    assert_eq!(sim.series.len(), 500);
    assert!(sim.series.values.iter().all(|&v| v == 0.0));
    assert!(sim.field_sq.iter().all(|&v| v == 0.0));
}

#[test]
fn response_is_linear_in_forcing_without_field() {
    let a = vec![sinusoid(0, 37.0, 5e3, 0.05, 0.3)];
    let b = vec![
        Disturbance {
            kind: DisturbanceKind::Step,
            mode: 1,
            amplitude: 800.0,
            start: 0.1,
            duration: 0.2,
            marks_transient: true,
        },
        Disturbance {
            kind: DisturbanceKind::Noise { seed: 11 },
            mode: 2,
            amplitude: 300.0,
            start: 0.0,
            duration: 0.5,
            marks_transient: false,
        },
    ];
    let run = |events: Vec<Disturbance>| -> Simulation {
        simulate(
            &CavityConfig::default(),
            &nominal_modes(),
            Drive::Off,
            &DisturbanceProfile::new(events).unwrap(),
            0.5,
            &SimOptions::default(),
        )
        .unwrap()
    };
    let ya = run(a.clone());
    let yb = run(b.clone());
    let yab = run(a.into_iter().chain(b).collect());
    let scale = rms(&yab.series.values);
    assert!(scale > 0.0);
    for i in 0..yab.series.len() {
        let sum = ya.series.values[i] + yb.series.values[i];
        assert!((yab.series.values[i] - sum).abs() < 1e-9 * scale, "sample {i}");
    }
}

#[test]
fn halving_the_internal_step_barely_changes_output() {
    let smooth = |mut d: Disturbance| {
        if let DisturbanceKind::Sinusoid { envelope, .. } = &mut d.kind {
            *envelope = Envelope::RaisedCosine;
        }
        d
    };
    let events = vec![smooth(sinusoid(0, 100.0, 2e4, 0.0, 0.4)), smooth(sinusoid(3, 64.0, 3e4, 0.1, 0.2))];
    let mut modes = nominal_modes();
    modes.push(MechanicalMode::new(64.0, 15.0, 0.0));
    let profile = DisturbanceProfile::new(events).unwrap();
    let run = |rate: f64| {
        simulate(
            &CavityConfig::default(),
            &modes,
            Drive::Constant { amplitude: 1.0 },
            &profile,
            0.4,
            &SimOptions {
                internal_rate: rate,
                ..Default::default()
            },
        )
        .unwrap()
        .series
        .values
    };
    let coarse = run(50_000.0);
    let fine = run(100_000.0);
    let diff: Vec<f64> = coarse.iter().zip(&fine).map(|(a, b)| a - b).collect();
    assert!(rms(&diff) < 1e-6 * rms(&fine));
}

#[test]
fn driven_mode_shows_up_in_spectrum() {
    let modes = [MechanicalMode::new(100.0, 1000.0, 0.0)];
    let profile = DisturbanceProfile::new(vec![sinusoid(0, 100.0, 1e4, 0.0, 4.0)]).unwrap();
    let sim = simulate(
        &CavityConfig::default(),
        &modes,
        Drive::Off,
        &profile,
        4.0,
        &SimOptions::default(),
    )
    .unwrap();
    let (spec, _) = analyze_segment(&sim.series.values[1000..], 1000.0).unwrap();
    let peak = (0..spec.magnitudes.len()).max_by(|&a, &b| spec.magnitudes[a].total_cmp(&spec.magnitudes[b])).unwrap();
    let bin = spec.frequencies[1];
    assert!((spec.frequencies[peak] - 100.0).abs() <= bin, "peak at {}", spec.frequencies[peak]);
}

#[test]
fn invalid_steps_and_rates_are_rejected() {
    let fast = MechanicalMode::new(2000.0, 10.0, 0.0);
    assert!(mode_step(fast, 0.0, 0.0, 1e-4).is_err());
    assert!(simulate(
        &CavityConfig::default(),
        &[fast],
        Drive::Off,
        &DisturbanceProfile::empty(),
        0.1,
        &SimOptions {
            internal_rate: 2_000.0,
            ..Default::default()
        },
    )
    .is_err());
}

#[test]
fn dataset_is_deterministic_per_seed() {
    let cfg = small_dataset();
    let a = generate_regime_dataset(3, &cfg).unwrap();
    let b = generate_regime_dataset(3, &cfg).unwrap();
    let c = generate_regime_dataset(4, &cfg).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.series.values, c.series.values);
    assert_eq!(a.series.len(), 5000);
}

#[test]
fn dataset_alternates_regimes() {
    let cfg = small_dataset();
    let sim = generate_regime_dataset(3, &cfg).unwrap();
    let labels = sim.series.labels.as_ref().unwrap();
    // First stationary block runs untouched until the first transient.
    assert!(labels[..1500].iter().all(|&l| l == Regime::Stationary));
    assert_eq!(sim.series.runs(Regime::Transient).len(), 2);
    let stat = rms(&sim.series.select(Regime::Stationary));
    let trans = rms(&sim.series.select(Regime::Transient));
    assert!(trans > 1.5 * stat, "trans {trans} stat {stat}");
}

#[test]
fn novel_regime_labels_start_at_onset() {
    let cfg = small_dataset();
    let (sim, onset) = generate_novel_regime(9, &cfg, 1.0, 2.0, 2.0).unwrap();
    assert_eq!(onset, 1000);
    assert_eq!(sim.series.len(), 2000);
    let labels = sim.series.labels.as_ref().unwrap();
    assert!(labels[..onset].iter().all(|&l| l == Regime::Stationary));
    assert!(labels[onset..].iter().all(|&l| l == Regime::Transient));
    let before = rms(&sim.series.values[..onset]);
    let after = rms(&sim.series.values[onset + 200..]);
    assert!(after > 2.0 * before);
}
