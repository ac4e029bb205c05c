mod config;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use kind_core::cavity::{generate_novel_regime, generate_regime_dataset};
use kind_core::kalman::{fig4_configs, fig4_experiment, design_modes, NoiseConfig, SweepConfig};
use kind_core::kind::{KindModel, TrainingPhase};
use kind_core::series::{Regime, TimeSeries};
use kind_core::spectrum::{analyze_segment, curve_csv, detect_steps_within, spectrum_csv};
use kind_core::tensor::{read_checkpoint, write_checkpoint};
use kind_core::training::{train_stationary, train_transient, Split, TrainReport, WindowDataset};
use kind_core::{Error, Result};

use config::RunConfig;
use plot::{Panel, Series};

#[derive(Debug, Parser)]
#[command(name = "kind", version, about = "Cavity detuning simulation, spectra, Kalman baseline and KIND forecasting")]
struct Cli {
    /// Seed for dataset generation, initialization and batching.
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,

    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Primary output file; companion files are written next to it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Also write an SVG plot next to the output.
    #[arg(long, global = true)]
    plot: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Segment {
    Stat,
    Trans,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Phase {
    Stationary,
    Transient,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    All,
    Train,
    Validation,
    Evaluation,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the labelled stationary/transient detuning dataset.
    Simulate {
        /// Stationary operation with an injected sustained 285 Hz regime
        /// instead of the training dataset.
        #[arg(long)]
        novel: bool,
    },
    /// Amplitude spectrum, integrated rms curve and detected mode steps.
    Spectrum {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Segment::All)]
        segment: Segment,
    },
    /// Kalman filter sweep over noise settings and coupling sign.
    Kalman {
        #[arg(long)]
        input: PathBuf,
        /// Run a single configuration with the 100 Hz coupling sign inverted.
        #[arg(long)]
        invert_k1: bool,
        /// Process-noise scale of a single configuration.
        #[arg(long)]
        q: Option<f64>,
        /// Measurement-noise scale of a single configuration.
        #[arg(long)]
        r: Option<f64>,
    },
    /// Train the stationary branch, the transient branch, or both.
    Train {
        #[arg(long, value_enum, default_value_t = Phase::All)]
        phase: Phase,
        /// Dataset CSV; generated from the seed when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Stationary-phase checkpoint to continue from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Forecast one window and report per-branch predictions and blending.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        index: usize,
        /// Restrict the window list to one split.
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
    },
    /// Per-slice anomaly scores and flags over a series.
    Anomaly {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        consecutive: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

fn require_out(cli: &Cli) -> &Path {
    match &cli.out {
        Some(p) => p,
        None => Cli::command()
            .error(ErrorKind::MissingRequiredArgument, "the subcommand needs --out <path>")
            .exit(),
    }
}

/// `dir/name.ext` → `dir/name.{suffix}`.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Simulate { novel } => simulate(cli, &cfg, *novel),
        Command::Spectrum { input, segment } => spectrum(cli, &cfg, input, *segment),
        Command::Kalman { input, invert_k1, q, r } => kalman(cli, &cfg, input, *invert_k1, *q, *r),
        Command::Train { phase, input, checkpoint } => train(cli, &cfg, *phase, input.as_deref(), checkpoint.as_deref()),
        Command::Forecast {
            checkpoint,
            input,
            index,
            split,
        } => forecast(cli, &cfg, checkpoint, input, *index, *split),
        Command::Anomaly {
            checkpoint,
            input,
            threshold,
            consecutive,
        } => anomaly(cli, &cfg, checkpoint, input, *threshold, *consecutive),
    }
}

fn simulate(cli: &Cli, cfg: &RunConfig, novel: bool) -> Result<()> {
    let out = require_out(cli);
    let series = if novel {
        let n = &cfg.novel;
        let (sim, onset) = generate_novel_regime(cli.seed, &cfg.dataset, n.onset_s, n.duration_s, n.surge)?;
        println!("onset_sample={onset}");
        sim.series
    } else {
        generate_regime_dataset(cli.seed, &cfg.dataset)?.series
    };
    series.write_csv(out)?;
    println!("samples={} duration_s={} rms_hz={:.4}", series.len(), series.len() as f64 * series.dt(), series.rms());
    if cli.plot {
        let panel = Panel {
            title: "detuning".into(),
            x_label: "time [s]".into(),
            y_label: "Δf [Hz]".into(),
            series: vec![Series::uniform("detuning", 0.0, series.dt(), series.values.clone())],
        };
        write(&out.with_extension("svg"), &plot::render("Simulated cavity detuning", &[panel]))?;
    }
    Ok(())
}

fn spectrum(cli: &Cli, cfg: &RunConfig, input: &Path, segment: Segment) -> Result<()> {
    let out = require_out(cli);
    let series = TimeSeries::read_csv(input)?;
    let (a, b) = match segment {
        Segment::All => (0, series.len()),
        Segment::Stat | Segment::Trans => {
            let regime = if segment == Segment::Stat { Regime::Stationary } else { Regime::Transient };
            if series.labels.is_none() {
                return Err(Error::Contract("segment selection needs a labelled series".into()));
            }
            series
                .longest_run(regime)
                .ok_or_else(|| Error::Contract(format!("series has no {} samples", regime.as_str())))?
        }
    };
    let (spec, curve) = analyze_segment(&series.values[a..b], series.sample_rate)?;
    let steps = detect_steps_within(&curve, cfg.spectrum.min_fraction, cfg.spectrum.merge_hz)?;
    write(out, &spectrum_csv(&spec))?;
    write(&sibling(out, "rms.csv"), &curve_csv(&curve))?;
    let mut steps_csv = String::from("freq_hz,jump_hz\n");
    for s in &steps {
        steps_csv.push_str(&format!("{},{}\n", s.frequency, s.jump));
        println!("step {:.2} Hz (+{:.4} Hz rms)", s.frequency, s.jump);
    }
    write(&sibling(out, "steps.csv"), &steps_csv)?;
    println!("segment samples {a}..{b}, total rms {:.4} Hz", curve.final_value());
    if cli.plot {
        let panels = [
            Panel {
                title: "amplitude spectrum".into(),
                x_label: "frequency [Hz]".into(),
                y_label: "amplitude [Hz]".into(),
                series: vec![Series::new("spectrum", spec.frequencies.clone(), spec.magnitudes.clone())],
            },
            Panel {
                title: "integrated rms".into(),
                x_label: "frequency [Hz]".into(),
                y_label: "rms [Hz]".into(),
                series: vec![Series::new("integrated rms", curve.frequencies.clone(), curve.cumulative_rms.clone())],
            },
        ];
        write(&out.with_extension("svg"), &plot::render("Detuning spectrum", &panels))?;
    }
    Ok(())
}

fn kalman(cli: &Cli, cfg: &RunConfig, input: &Path, invert_k1: bool, q: Option<f64>, r: Option<f64>) -> Result<()> {
    let out = require_out(cli);
    let series = TimeSeries::read_csv(input)?;
    let configs = if invert_k1 || q.is_some() || r.is_some() {
        vec![SweepConfig {
            noise: NoiseConfig::new(q.unwrap_or(0.1), r.unwrap_or(1.0))?,
            invert_k1,
        }]
    } else {
        fig4_configs()
    };
    let drive = vec![cfg.kalman.drive; series.len()];
    let report = fig4_experiment(&series, Some(&drive), &design_modes(), &configs)?;
    write(out, &report.to_csv())?;
    for row in &report.rows {
        println!(
            "{:<16} {:<10} rms {:.4} Hz  innovation rms {:.4}  drift {:.4} Hz",
            row.config.name(),
            row.regime.as_str(),
            row.rms_error,
            row.innovation_rms,
            row.drift_offset
        );
    }
    if cli.plot {
        let dt = series.dt();
        for c in &configs {
            let panels: Vec<Panel> = report
                .rows
                .iter()
                .filter(|row| row.config == *c)
                .map(|row| Panel {
                    title: format!("{} regime", row.regime.as_str()),
                    x_label: "time [s]".into(),
                    y_label: "Δf [Hz]".into(),
                    series: vec![
                        Series::uniform("measured", 0.0, dt, row.measured.clone()),
                        Series::uniform("estimate", 0.0, dt, row.estimate.clone()),
                    ],
                })
                .collect();
            write(&sibling(out, &format!("{}.svg", c.name())), &plot::render(&format!("Kalman filter {}", c.name()), &panels))?;
        }
    }
    Ok(())
}

fn load_series(cli: &Cli, cfg: &RunConfig, input: Option<&Path>) -> Result<TimeSeries> {
    match input {
        Some(p) => TimeSeries::read_csv(p),
        None => Ok(generate_regime_dataset(cli.seed, &cfg.dataset)?.series),
    }
}

fn print_summary(report: &TrainReport) {
    for r in &report.regimes {
        println!(
            "{:<10} windows {:>4}  mean α {:.3}  rms stat {:.4}  trans {:.4}  fused {:.4} Hz",
            r.regime.as_str(),
            r.windows,
            r.mean_alpha,
            r.rms_stat,
            r.rms_trans,
            r.rms_fused
        );
    }
}

fn train(cli: &Cli, cfg: &RunConfig, phase: Phase, input: Option<&Path>, checkpoint: Option<&Path>) -> Result<()> {
    let out = require_out(cli);
    let series = load_series(cli, cfg, input)?;
    let mut tc = cfg.train.clone();
    tc.seed = cli.seed;
    let mut model = match checkpoint {
        Some(p) => KindModel::from_checkpoint(&read_checkpoint(p)?)?,
        None if phase == Phase::Transient => {
            return Err(Error::Contract("--phase transient needs --checkpoint from a stationary run".into()))
        }
        None => KindModel::new(cfg.model, cli.seed)?,
    };
    if phase != Phase::Transient && model.phase != TrainingPhase::Untrained {
        return Err(Error::Contract("stationary training starts from a fresh model; drop --checkpoint".into()));
    }
    let ds = tc.windows(&series, model.config.window)?;
    let mut csv = String::new();
    let mut epochs = Vec::new();
    if phase != Phase::Transient {
        let report = train_stationary(&ds, &mut model, &tc)?;
        csv.push_str(&report.to_csv());
        print_summary(&report);
        epochs.extend(report.epochs);
    }
    if phase != Phase::Stationary {
        let report = train_transient(&ds, &mut model, &tc)?;
        csv.push_str(&report.to_csv());
        print_summary(&report);
        epochs.extend(report.epochs);
    }
    write_checkpoint(out, &model.to_checkpoint())?;
    write(&sibling(out, "report.csv"), &csv)?;
    println!("phase {} checkpoint {}", model.phase.as_str(), out.display());
    if cli.plot {
        let idx: Vec<f64> = (0..epochs.len()).map(|i| i as f64).collect();
        let col = |f: fn(&kind_core::training::EpochRecord) -> f64| epochs.iter().map(f).collect::<Vec<f64>>();
        let panels = [
            Panel {
                title: "training loss".into(),
                x_label: "epoch (all phases)".into(),
                y_label: "loss".into(),
                series: vec![Series::new("train loss", idx.clone(), col(|e| e.train_loss))],
            },
            Panel {
                title: "validation horizon rms".into(),
                x_label: "epoch (all phases)".into(),
                y_label: "rms [Hz]".into(),
                series: vec![
                    Series::new("stationary branch", idx.clone(), col(|e| e.val_rms_stat)),
                    Series::new("transient branch", idx.clone(), col(|e| e.val_rms_trans)),
                    Series::new("fused", idx, col(|e| e.val_rms_fused)),
                ],
            },
        ];
        write(&out.with_extension("svg"), &plot::render("Training curves", &panels))?;
    }
    Ok(())
}

fn select_windows(ds: &WindowDataset, split: SplitArg) -> Vec<kind_core::training::Window> {
    match split {
        SplitArg::All => ds.windows.clone(),
        SplitArg::Train => ds.select(Split::Train, None),
        SplitArg::Validation => ds.select(Split::Validation, None),
        SplitArg::Evaluation => ds.select(Split::Evaluation, None),
    }
}

fn forecast(cli: &Cli, cfg: &RunConfig, checkpoint: &Path, input: &Path, index: usize, split: SplitArg) -> Result<()> {
    let out = require_out(cli);
    let model = KindModel::from_checkpoint(&read_checkpoint(checkpoint)?)?;
    if model.phase != TrainingPhase::Complete {
        return Err(Error::Contract(format!("checkpoint is in phase {}, forecasting needs a complete model", model.phase.as_str())));
    }
    let series = TimeSeries::read_csv(input)?;
    let ds = cfg.train.windows(&series, model.config.window)?;
    let windows = select_windows(&ds, split);
    let w = windows
        .get(index)
        .ok_or_else(|| Error::Contract(format!("window index {index} out of range ({} windows)", windows.len())))?;
    let fc = model.forecast(ds.lookback(w))?;
    let truth = ds.horizon(w);
    write(out, &fc.samples_csv(Some(truth)))?;
    write(&sibling(out, "slices.csv"), &fc.slices_csv())?;
    let err = |p: &[f64]| kind_core::series::rms(&p.iter().zip(truth).map(|(a, b)| a - b).collect::<Vec<_>>());
    println!(
        "window {index} start {} regime {} split {}  mean α {:.3}  rms stat {:.4}  trans {:.4}  fused {:.4} Hz",
        w.start,
        w.regime.as_str(),
        w.split.as_str(),
        fc.mean_alpha(),
        err(&fc.stat),
        err(&fc.trans),
        err(&fc.fused)
    );
    if cli.plot {
        let dt = series.dt();
        let t0 = (w.start + model.config.window.lookback) as f64 * dt;
        let tau = model.config.window.slice_len as f64 * dt;
        let lookback = ds.lookback(w).to_vec();
        let panels = [
            Panel {
                title: format!("{} window", w.regime.as_str()),
                x_label: "time [s]".into(),
                y_label: "Δf [Hz]".into(),
                series: vec![
                    Series::uniform("lookback", w.start as f64 * dt, dt, lookback),
                    Series::uniform("truth", t0, dt, truth.to_vec()),
                    Series::uniform("stationary", t0, dt, fc.stat.clone()),
                    Series::uniform("transient", t0, dt, fc.trans.clone()),
                    Series::uniform("fused", t0, dt, fc.fused.clone()),
                ],
            },
            Panel {
                title: "blending factor".into(),
                x_label: "time [s]".into(),
                y_label: "α".into(),
                series: vec![Series::uniform("α", t0 + tau / 2.0, tau, fc.alpha.clone())],
            },
        ];
        write(&out.with_extension("svg"), &plot::render("KIND forecast", &panels))?;
    }
    Ok(())
}

fn anomaly(cli: &Cli, cfg: &RunConfig, checkpoint: &Path, input: &Path, threshold: Option<f64>, consecutive: Option<usize>) -> Result<()> {
    let out = require_out(cli);
    let model = KindModel::from_checkpoint(&read_checkpoint(checkpoint)?)?;
    let mut ac = cfg.anomaly;
    if let Some(t) = threshold {
        ac.threshold = t;
    }
    if let Some(c) = consecutive {
        ac.consecutive = c;
    }
    let series = TimeSeries::read_csv(input)?;
    let scan = model.anomaly_scan(&series.values, &ac)?;
    write(out, &scan.to_csv())?;
    match scan.first_flag() {
        Some(r) => println!(
            "flags {} of {} slices, first at slice {} (sample {})",
            scan.flag_count(),
            scan.rows.len(),
            r.slice_index,
            r.end_sample
        ),
        None => println!("flags 0 of {} slices", scan.rows.len()),
    }
    if cli.plot {
        let dt = series.dt();
        let t: Vec<f64> = scan.rows.iter().map(|r| r.end_sample as f64 * dt).collect();
        let panels = [
            Panel {
                title: "detuning".into(),
                x_label: "time [s]".into(),
                y_label: "Δf [Hz]".into(),
                series: vec![Series::uniform("detuning", 0.0, dt, series.values.clone())],
            },
            Panel {
                title: "anomaly score".into(),
                x_label: "time [s]".into(),
                y_label: "score".into(),
                series: vec![
                    Series::new("score", t.clone(), scan.rows.iter().map(|r| r.score).collect()),
                    Series::new("threshold", vec![t[0], t[t.len() - 1]], vec![ac.threshold; 2]),
                ],
            },
        ];
        write(&out.with_extension("svg"), &plot::render("Anomaly scan", &panels))?;
    }
    Ok(())
}
