//! Windowed datasets, the two-phase training procedure and the end-to-end
//! gradient check.
//!
//! Phase order is enforced through [`TrainingPhase`]: the stationary branch
//! is trained first and frozen, then the transient branch, attention network
//! and operator bank are trained on the composite loss with the stationary
//! parameters held fixed.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kind::{fit_stationary_operator, AnomalyCalibration, Branch, KindModel, LatentEmbedding, TrainingPhase, WindowConfig, BLEND_EPS};
use crate::rng;
use crate::series::{Regime, TimeSeries};
use crate::tensor::{clip_grad_norm, sgd_step, Adam, FaultInjection, ParamId, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Evaluation,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Evaluation => "evaluation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    /// Index of the first lookback sample in the source series.
    pub start: usize,
    pub regime: Regime,
    pub split: Split,
}

/// Lookback plus horizon windows cut from one series.
#[derive(Debug, Clone)]
pub struct WindowDataset {
    pub config: WindowConfig,
    pub stride: usize,
    pub windows: Vec<Window>,
    values: Vec<f64>,
}

/// Sliding windows of `T + H` samples every `stride` samples, all assigned
/// to the training split. A window is transient if any of its samples is
/// transient-labelled; unlabelled series count as stationary.
pub fn make_windows(series: &TimeSeries, cfg: WindowConfig, stride: usize) -> Result<WindowDataset> {
    cfg.validate()?;
    if stride == 0 {
        return Err(Error::contract("window stride must be positive"));
    }
    let span = cfg.span();
    if series.len() < span {
        return Err(Error::contract(format!(
            "series of {} samples is shorter than one window ({span})",
            series.len()
        )));
    }
    // Prefix count of transient labels gives each window's label in O(1).
    let mut trans_before = vec![0usize; series.len() + 1];
    for i in 0..series.len() {
        let t = series.label(i) == Some(Regime::Transient);
        trans_before[i + 1] = trans_before[i] + t as usize;
    }
    let windows = (0..=series.len() - span)
        .step_by(stride)
        .map(|start| Window {
            start,
            regime: if trans_before[start + span] > trans_before[start] {
                Regime::Transient
            } else {
                Regime::Stationary
            },
            split: Split::Train,
        })
        .collect();
    Ok(WindowDataset {
        config: cfg,
        stride,
        windows,
        values: series.values.clone(),
    })
}

impl WindowDataset {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn values(&self, w: &Window) -> &[f64] {
        &self.values[w.start..w.start + self.config.span()]
    }

    pub fn lookback(&self, w: &Window) -> &[f64] {
        &self.values[w.start..w.start + self.config.lookback]
    }

    pub fn horizon(&self, w: &Window) -> &[f64] {
        let s = w.start + self.config.lookback;
        &self.values[s..s + self.config.horizon]
    }

    /// Assign samples `[0, validation_start)` to training,
    /// `[validation_start, evaluation_start)` to validation and the rest to
    /// evaluation. Windows straddling a boundary are dropped.
    pub fn with_splits(mut self, validation_start: usize, evaluation_start: usize) -> Result<Self> {
        if validation_start > evaluation_start || evaluation_start > self.values.len() {
            return Err(Error::contract("split boundaries must be ordered and inside the series"));
        }
        let span = self.config.span();
        self.windows.retain_mut(|w| {
            let end = w.start + span;
            let split = if end <= validation_start {
                Split::Train
            } else if w.start >= validation_start && end <= evaluation_start {
                Split::Validation
            } else if w.start >= evaluation_start {
                Split::Evaluation
            } else {
                return false;
            };
            w.split = split;
            true
        });
        Ok(self)
    }

    /// Windows of a split, optionally restricted to one regime.
    pub fn select(&self, split: Split, regime: Option<Regime>) -> Vec<Window> {
        self.windows
            .iter()
            .filter(|w| w.split == split && regime.is_none_or(|r| w.regime == r))
            .copied()
            .collect()
    }

    /// Window `index` of a split in time order.
    pub fn get(&self, split: Split, index: usize) -> Result<Window> {
        let sel = self.select(split, None);
        sel.get(index).copied().ok_or_else(|| {
            Error::contract(format!("window index {index} out of range ({} {} windows)", sel.len(), split.as_str()))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub w_fused: f64,
    pub w_stat: f64,
    pub w_trans: f64,
    pub w_unc: f64,
    /// Ridge λ of the closed-form stationary operator fit.
    pub ridge: f64,
    /// Weight each window's forecast errors by the inverse mean square of
    /// its lookback, so large-amplitude windows do not dominate.
    pub normalize_windows: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w_fused: 1.0,
            w_stat: 1.0,
            w_trans: 1.0,
            w_unc: 1.0,
            ridge: 1e-6,
            normalize_windows: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_fused, self.w_stat, self.w_trans, self.w_unc];
        if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || !(self.ridge >= 0.0) {
            return Err(Error::config("loss weights and ridge must be non-negative"));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(Error::config("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Encoder/decoder epochs of the stationary branch.
    pub stat_epochs: usize,
    /// Uncertainty-head epochs of the stationary branch.
    pub zeta_epochs: usize,
    /// Transient epochs on the transient forecast alone, with `K₀` and the
    /// decoder refit in closed form every epoch.
    pub warmup_epochs: usize,
    pub trans_epochs: usize,
    /// Initialize the transient branch from the trained stationary branch.
    pub extend_stationary: bool,
    pub batch: usize,
    pub rate: f64,
    pub optimizer: Optimizer,
    pub clip: f64,
    pub stride: usize,
    /// Start of the validation and evaluation splits as fractions of the
    /// series length.
    pub splits: [f64; 2],
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stat_epochs: 30,
            zeta_epochs: 20,
            warmup_epochs: 20,
            trans_epochs: 40,
            extend_stationary: true,
            batch: 32,
            rate: 3e-3,
            optimizer: Optimizer::Adam,
            clip: 5.0,
            stride: 24,
            splits: [4.0 / 6.0, 5.0 / 6.0],
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch == 0 || self.stride == 0 {
            return Err(Error::config("batch and stride must be positive"));
        }
        if !(self.rate >= 0.0 && self.rate.is_finite()) || !(self.clip > 0.0) {
            return Err(Error::config("rate must be non-negative and clip positive"));
        }
        let [v, e] = self.splits;
        if !(0.0 < v && v <= e && e <= 1.0) {
            return Err(Error::config("splits must satisfy 0 < validation ≤ evaluation ≤ 1"));
        }
        Ok(())
    }

    /// Windows of `series` with this config's stride and split boundaries.
    pub fn windows(&self, series: &TimeSeries, cfg: WindowConfig) -> Result<WindowDataset> {
        self.validate()?;
        let n = series.len() as f64;
        let [v, e] = self.splits;
        make_windows(series, cfg, self.stride)?.with_splits((v * n).round() as usize, (e * n).round() as usize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub phase: &'static str,
    pub epoch: usize,
    pub train_loss: f64,
    /// One-slice-ahead stationary-branch RMS on stationary validation
    /// windows, Hz.
    pub val_onestep_stat: f64,
    /// Open-loop horizon RMS on all validation windows, Hz.
    pub val_rms_stat: f64,
    pub val_rms_trans: f64,
    pub val_rms_fused: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegimeSummary {
    pub regime: Regime,
    pub windows: usize,
    pub mean_alpha: f64,
    pub rms_stat: f64,
    pub rms_trans: f64,
    pub rms_fused: f64,
    pub mean_zeta_stat: f64,
    pub mean_zeta_trans: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Validation statistics of the trained model per regime.
    pub regimes: Vec<RegimeSummary>,
    pub wall_clock_s: f64,
}

impl TrainReport {
    pub fn regime(&self, regime: Regime) -> Option<&RegimeSummary> {
        self.regimes.iter().find(|r| r.regime == regime)
    }

    /// Per-epoch rows followed by a `#`-prefixed summary block. Wall-clock
    /// time is left out so equal runs give equal files.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,epoch,train_loss,val_onestep_stat_hz,val_rms_stat_hz,val_rms_trans_hz,val_rms_fused_hz\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                e.phase, e.epoch, e.train_loss, e.val_onestep_stat, e.val_rms_stat, e.val_rms_trans, e.val_rms_fused
            );
        }
        out.push_str("# regime,windows,mean_alpha,rms_stat_hz,rms_trans_hz,rms_fused_hz,mean_zeta_stat,mean_zeta_trans\n");
        for r in &self.regimes {
            let _ = writeln!(
                out,
                "# {},{},{},{},{},{},{},{}",
                r.regime.as_str(),
                r.windows,
                r.mean_alpha,
                r.rms_stat,
                r.rms_trans,
                r.rms_fused,
                r.mean_zeta_stat,
                r.mean_zeta_trans
            );
        }
        out
    }
}

// ---- batches and losses --------------------------------------------------

/// Windows stacked slice-wise in normalized units, window-major.
struct Batch {
    x: Vec<f64>,
    windows: usize,
    slices: usize,
}

fn make_batch(model: &KindModel, ds: &WindowDataset, windows: &[Window]) -> Batch {
    let x = windows
        .iter()
        .flat_map(|w| ds.values(w).iter().map(|v| v / model.scale))
        .collect();
    Batch {
        x,
        windows: windows.len(),
        slices: ds.config.total_slices(),
    }
}

/// Regression targets of the uncertainty heads, one per forecast row.
#[derive(Debug, Clone)]
struct ZetaTargets {
    stat: Vec<f64>,
    trans: Vec<f64>,
}

/// Rows scored by the losses: each lookback transition `j → j+1`
/// (`j < m−1`) followed by each open-loop horizon slice.
struct Layout {
    /// Rows of the one-step output (`[B·(S−1)]` layout) for the lookback
    /// transitions.
    lookback: Vec<usize>,
    /// Input slice rows holding the truth of every scored row.
    truth: Vec<usize>,
    /// Transition whose uncertainty applies to every scored row; horizon
    /// rows reuse the last lookback transition.
    zeta: Vec<usize>,
    /// Window of every scored row.
    window: Vec<usize>,
}

impl Layout {
    fn new(b: usize, m: usize, hs: usize) -> Self {
        let s = m + hs;
        let lookback: Vec<usize> = (0..b).flat_map(|w| (0..m - 1).map(move |j| w * (s - 1) + j)).collect();
        let mut truth: Vec<usize> = (0..b).flat_map(|w| (1..m).map(move |j| w * s + j)).collect();
        truth.extend((0..b).flat_map(|w| (0..hs).map(move |h| w * s + m + h)));
        let mut zeta = lookback.clone();
        zeta.extend((0..b).flat_map(|w| std::iter::repeat_n(w * (s - 1) + m - 2, hs)));
        let mut window: Vec<usize> = (0..b).flat_map(|w| std::iter::repeat_n(w, m - 1)).collect();
        window.extend((0..b).flat_map(|w| std::iter::repeat_n(w, hs)));
        Self {
            lookback,
            truth,
            zeta,
            window,
        }
    }
}

/// Predictions and uncertainties of one branch on the scored rows.
struct Scored {
    pred: Var,
    zeta: Var,
}

fn score_branch(tape: &mut Tape, model: &KindModel, branch: Branch, x: Var, batch: &Batch, layout: &Layout) -> Result<Scored> {
    let pass = model.tape_batch(tape, branch, x, batch.windows, batch.slices)?;
    let lb = tape.gather_rows(pass.onestep, &layout.lookback)?;
    let pred = tape.concat_rows(&[lb, pass.open])?;
    let zeta = tape.gather_rows(pass.zeta, &layout.zeta)?;
    Ok(Scored { pred, zeta })
}

/// Mean square error of every scored row: the quantity the uncertainty
/// heads learn to read off the latent residual.
fn row_errors(tape: &Tape, batch: &Batch, pred: Var, layout: &Layout) -> Vec<f64> {
    let p = tape.value(pred);
    let tau = p.len() / layout.truth.len();
    layout
        .truth
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            (0..tau)
                .map(|k| (p[r * tau + k] - batch.x[t * tau + k]).powi(2))
                .sum::<f64>()
                / tau as f64
        })
        .collect()
}

/// Row weights with mean one: the inverse lookback mean square of each
/// row's window when `normalize` is set, else uniform.
fn row_weights(batch: &Batch, layout: &Layout, m: usize, tau: usize, normalize: bool) -> Vec<f64> {
    let s = batch.slices;
    let per_window: Vec<f64> = (0..batch.windows)
        .map(|w| {
            if !normalize {
                return 1.0;
            }
            let lb = &batch.x[w * s * tau..(w * s + m) * tau];
            1.0 / (lb.iter().map(|v| v * v).sum::<f64>() / lb.len() as f64).max(1e-6)
        })
        .collect();
    let r: Vec<f64> = layout.window.iter().map(|&w| per_window[w]).collect();
    let mean = r.iter().sum::<f64>() / r.len() as f64;
    r.iter().map(|v| v / mean).collect()
}

/// Floor on regression targets, in normalized mean-square units.
const TARGET_FLOOR: f64 = 1e-8;

/// `mean |ln ζ − ln e|`: blending only uses ratios of uncertainties, so
/// the heads are fit on a log scale.
fn abs_regression(tape: &mut Tape, zeta: Var, target: &[f64]) -> Result<Var> {
    let logs = target.iter().map(|e| e.max(TARGET_FLOOR).ln()).collect();
    let t = tape.constant_from(target.len(), 1, logs)?;
    let lz = tape.ln(zeta)?;
    let d = tape.sub(lz, t)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// Mean over rows of `weight · (a − b)²`, weights given as a column.
fn weighted_mse(tape: &mut Tape, a: Var, b: Var, weights: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d);
    let w = tape.mul(sq, weights)?;
    Ok(tape.mean(w))
}

fn weighted_sum(tape: &mut Tape, terms: &[(f64, Var)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(w, v) in terms {
        if w == 0.0 {
            continue;
        }
        let s = tape.scale(v, w);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    total.ok_or_else(|| Error::config("every loss weight is zero"))
}

fn check_layout(model: &KindModel, batch: &Batch) -> Result<(usize, usize, usize)> {
    let w = model.config.window;
    let (m, hs, tau) = (w.slice_count(), w.horizon_slices(), w.slice_len);
    if batch.slices != m + hs {
        return Err(Error::contract("losses need full lookback plus horizon windows"));
    }
    Ok((m, hs, tau))
}

/// Stationary phase A: one-slice-ahead reconstruction over every
/// transition of the window.
fn stationary_loss(tape: &mut Tape, model: &KindModel, batch: &Batch) -> Result<Var> {
    let tau = model.config.window.slice_len;
    let (b, s) = (batch.windows, batch.slices);
    let x = tape.constant_from(b * s, tau, batch.x.clone())?;
    let pass = model.tape_batch(tape, Branch::Stationary, x, b, s)?;
    let truth: Vec<usize> = (0..b).flat_map(|w| (1..s).map(move |j| w * s + j)).collect();
    let t = tape.gather_rows(x, &truth)?;
    tape.mse(pass.onestep, t)
}

/// Stationary phase B: the uncertainty head against the branch's own
/// forecast errors.
fn stationary_zeta_loss(tape: &mut Tape, model: &KindModel, batch: &Batch) -> Result<Var> {
    let (m, hs, tau) = check_layout(model, batch)?;
    let layout = Layout::new(batch.windows, m, hs);
    let x = tape.constant_from(batch.windows * batch.slices, tau, batch.x.clone())?;
    let st = score_branch(tape, model, Branch::Stationary, x, batch, &layout)?;
    let target = row_errors(tape, batch, st.pred, &layout);
    abs_regression(tape, st.zeta, &target)
}

/// `w_fused·MSE(fused) + w_stat·MSE(stat) + w_trans·MSE(trans) + w_unc·(|ζˢ − eˢ| + |ζᵗ − eᵗ|)`
/// over the lookback transitions and the open-loop horizon slices, where
/// `eᵇ` is the branch's mean square error on the row. Returns the loss and
/// the uncertainty targets used.
fn composite_loss(
    tape: &mut Tape,
    model: &KindModel,
    batch: &Batch,
    loss: &LossConfig,
    frozen_targets: Option<&ZetaTargets>,
) -> Result<(Var, ZetaTargets)> {
    let (m, hs, tau) = check_layout(model, batch)?;
    let layout = Layout::new(batch.windows, m, hs);
    let x = tape.constant_from(batch.windows * batch.slices, tau, batch.x.clone())?;
    let st = score_branch(tape, model, Branch::Stationary, x, batch, &layout)?;
    let tr = score_branch(tape, model, Branch::Transient, x, batch, &layout)?;
    let t = tape.gather_rows(x, &layout.truth)?;
    let weights = row_weights(batch, &layout, m, tau, loss.normalize_windows);
    let w = tape.constant_from(weights.len(), 1, weights)?;

    let stat_mse = weighted_mse(tape, st.pred, t, w)?;
    let trans_mse = weighted_mse(tape, tr.pred, t, w)?;
    let mut terms = vec![(loss.w_stat, stat_mse), (loss.w_trans, trans_mse)];

    if loss.w_fused > 0.0 {
        let sum = tape.add(st.zeta, tr.zeta)?;
        let den = tape.add_scalar(sum, BLEND_EPS);
        let alpha = tape.div(tr.zeta, den)?;
        let gap = tape.sub(st.pred, tr.pred)?;
        let corr = tape.mul(alpha, gap)?;
        let fused = tape.add(tr.pred, corr)?;
        terms.push((loss.w_fused, weighted_mse(tape, fused, t, w)?));
    }

    let targets = match frozen_targets {
        Some(t) => t.clone(),
        None => ZetaTargets {
            stat: row_errors(tape, batch, st.pred, &layout),
            trans: row_errors(tape, batch, tr.pred, &layout),
        },
    };
    if loss.w_unc > 0.0 {
        let us = abs_regression(tape, st.zeta, &targets.stat)?;
        let ut = abs_regression(tape, tr.zeta, &targets.trans)?;
        let u = tape.add(us, ut)?;
        terms.push((loss.w_unc, u));
    }
    Ok((weighted_sum(tape, &terms)?, targets))
}

// ---- optimization ----------------------------------------------------------

enum Stepper {
    Sgd(f64),
    Adam(Adam),
}

impl Stepper {
    fn new(cfg: &TrainConfig) -> Self {
        match cfg.optimizer {
            Optimizer::Sgd => Stepper::Sgd(cfg.rate),
            Optimizer::Adam => Stepper::Adam(Adam::new(cfg.rate)),
        }
    }

    fn step(&mut self, model: &mut KindModel, ids: &[ParamId], clip: f64) -> Result<()> {
        // Parameters the loss does not reach (e.g. a head whose weight is
        // zero) have no gradient and are left alone.
        let reached: Vec<ParamId> = ids
            .iter()
            .copied()
            .filter(|&id| model.params.get(id).tensor.grad().is_some())
            .collect();
        let norm = clip_grad_norm(&mut model.params, &reached, clip);
        if !norm.is_finite() {
            return Err(Error::Diverged { step: 0 });
        }
        match self {
            Stepper::Sgd(rate) => sgd_step(&mut model.params, &reached, *rate),
            Stepper::Adam(a) => a.step(&mut model.params, &reached),
        }
    }
}

/// Make exactly `ids` trainable (the fitted stationary operator never is).
fn train_only(model: &mut KindModel, ids: &[ParamId]) {
    model.params.set_all_trainable(false);
    model.params.set_trainable(ids, true);
    model.params.zero_grads();
}

fn run_epoch(
    model: &mut KindModel,
    ds: &WindowDataset,
    windows: &mut [Window],
    cfg: &TrainConfig,
    rng: &mut rng::Rng,
    stepper: &mut Stepper,
    ids: &[ParamId],
    loss_fn: &dyn Fn(&mut Tape, &KindModel, &Batch) -> Result<Var>,
) -> Result<f64> {
    windows.shuffle(rng);
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in windows.chunks(cfg.batch) {
        let batch = make_batch(model, ds, chunk);
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, model, &batch)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Diverged { step: count });
        }
        tape.backward(loss, &mut model.params)?;
        stepper.step(model, ids, cfg.clip)?;
        total += value * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Closed-form refit of a branch's operator on the given windows, then a
/// least-squares refit of its decoder `ψ(Kξ_j) ≈ X_{j+1}` against the new
/// operator. For the transient branch the fitted matrix is the bank's base
/// `K₀` and the decoder is fit against each window's inferred operator.
fn refit_branch(model: &mut KindModel, branch: Branch, ds: &WindowDataset, windows: &[Window], ridge: f64) -> Result<()> {
    let tau = ds.config.slice_len;
    let m = ds.config.slice_count();
    let embeddings = windows
        .iter()
        .map(|w| {
            let slices: Vec<Vec<f64>> = ds.values(w).chunks(tau).map(<[f64]>::to_vec).collect();
            model.lift(branch, &slices)
        })
        .collect::<Result<Vec<LatentEmbedding>>>()?;
    let fitted = fit_stationary_operator(&embeddings, ridge)?;
    let ids = *model.ids(branch);
    model.set_matrix(ids.koopman, &fitted.k)?;

    let n = fitted.dim();
    let mut gram = DMatrix::<f64>::zeros(n + 1, n + 1);
    let mut cross = DMatrix::<f64>::zeros(n + 1, tau);
    let mut z = DVector::<f64>::zeros(n + 1);
    for (w, e) in windows.iter().zip(&embeddings) {
        let op = match branch {
            Branch::Stationary => fitted.clone(),
            Branch::Transient => model.infer_transient_operator(&LatentEmbedding::new(e.xi.columns(0, m).into_owned())?)?,
        };
        let x = ds.values(w);
        for j in 0..e.slices() - 1 {
            z.rows_mut(0, n).copy_from(&op.advance(&e.column(j)));
            z[n] = 1.0;
            gram.ger(1.0, &z, &z, 1.0);
            for k in 0..tau {
                let target = x[(j + 1) * tau + k] / model.scale;
                for i in 0..=n {
                    cross[(i, k)] += z[i] * target;
                }
            }
        }
    }
    let jitter = 1e-10 * gram.trace() / (n + 1) as f64;
    for i in 0..n {
        gram[(i, i)] += jitter;
    }
    let sol = gram
        .cholesky()
        .ok_or_else(|| Error::Singular("decoder least-squares system is not positive definite".into()))?
        .solve(&cross);
    model.set_matrix(ids.dec_w, &sol.rows(0, n).into_owned())?;
    model.set_matrix(ids.dec_b, &sol.rows(n, 1).into_owned())
}

fn rms_of(sq: f64, n: usize) -> f64 {
    if n == 0 {
        f64::NAN
    } else {
        (sq / n as f64).sqrt()
    }
}

/// One-slice-ahead RMS of the stationary branch, Hz.
pub fn onestep_rms(model: &KindModel, ds: &WindowDataset, windows: &[Window]) -> Result<f64> {
    let tau = ds.config.slice_len;
    let (mut sq, mut n) = (0.0, 0usize);
    for chunk in windows.chunks(64) {
        let batch = make_batch(model, ds, chunk);
        let mut tape = Tape::new();
        let x = tape.constant_from(batch.windows * batch.slices, tau, batch.x.clone())?;
        let ps = model.tape_batch(&mut tape, Branch::Stationary, x, batch.windows, batch.slices)?;
        let s = batch.slices;
        let truth: Vec<usize> = (0..batch.windows).flat_map(|w| (1..s).map(move |j| w * s + j)).collect();
        let pred = tape.value(ps.onestep);
        for (r, &t) in truth.iter().enumerate() {
            for k in 0..tau {
                let d = (pred[r * tau + k] - batch.x[t * tau + k]) * model.scale;
                sq += d * d;
                n += 1;
            }
        }
    }
    Ok(rms_of(sq, n))
}

/// Forecast statistics of the model over `windows`, pooled per regime.
pub fn evaluate(model: &KindModel, ds: &WindowDataset, windows: &[Window]) -> Result<Vec<RegimeSummary>> {
    let lookbacks: Vec<&[f64]> = windows.iter().map(|w| ds.lookback(w)).collect();
    let forecasts = model.forecast_batch(&lookbacks)?;
    let mut out = Vec::new();
    for regime in [Regime::Stationary, Regime::Transient] {
        let (mut s, mut t, mut f, mut n) = (0.0, 0.0, 0.0, 0usize);
        let (mut alpha, mut zs, mut zt, mut count) = (0.0, 0.0, 0.0, 0usize);
        for (w, fc) in windows.iter().zip(&forecasts) {
            if w.regime != regime {
                continue;
            }
            for (k, truth) in ds.horizon(w).iter().enumerate() {
                s += (fc.stat[k] - truth).powi(2);
                t += (fc.trans[k] - truth).powi(2);
                f += (fc.fused[k] - truth).powi(2);
                n += 1;
            }
            alpha += fc.mean_alpha();
            zs += fc.zeta_stat[0];
            zt += fc.zeta_trans[0];
            count += 1;
        }
        if count == 0 {
            continue;
        }
        let c = count as f64;
        out.push(RegimeSummary {
            regime,
            windows: count,
            mean_alpha: alpha / c,
            rms_stat: rms_of(s, n),
            rms_trans: rms_of(t, n),
            rms_fused: rms_of(f, n),
            mean_zeta_stat: zs / c,
            mean_zeta_trans: zt / c,
        });
    }
    Ok(out)
}

fn epoch_record(model: &KindModel, ds: &WindowDataset, phase: &'static str, epoch: usize, train_loss: f64) -> Result<EpochRecord> {
    let val = ds.select(Split::Validation, None);
    let val_stat = ds.select(Split::Validation, Some(Regime::Stationary));
    let onestep = if val_stat.is_empty() { f64::NAN } else { onestep_rms(model, ds, &val_stat)? };
    let (mut s, mut t, mut f, mut n) = (0.0, 0.0, 0.0, 0usize);
    if !val.is_empty() {
        let lookbacks: Vec<&[f64]> = val.iter().map(|w| ds.lookback(w)).collect();
        for (w, fc) in val.iter().zip(model.forecast_batch(&lookbacks)?) {
            for (k, truth) in ds.horizon(w).iter().enumerate() {
                s += (fc.stat[k] - truth).powi(2);
                t += (fc.trans[k] - truth).powi(2);
                f += (fc.fused[k] - truth).powi(2);
                n += 1;
            }
        }
    }
    Ok(EpochRecord {
        phase,
        epoch,
        train_loss,
        val_onestep_stat: onestep,
        val_rms_stat: rms_of(s, n),
        val_rms_trans: rms_of(t, n),
        val_rms_fused: rms_of(f, n),
    })
}

fn set_scale(model: &mut KindModel, ds: &WindowDataset, windows: &[Window]) -> Result<()> {
    let (sq, n) = windows
        .iter()
        .flat_map(|w| ds.values(w))
        .fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    let scale = rms_of(sq, n);
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::contract("training windows carry no signal"));
    }
    model.scale = scale;
    Ok(())
}

/// Train the stationary branch: encoder, basis and decoder on one-slice-ahead
/// reconstruction with `K^stat` refit in closed form every epoch, then a
/// final refit and the uncertainty head alone. Leaves the branch frozen.
pub fn train_stationary(ds: &WindowDataset, model: &mut KindModel, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if ds.config != model.config.window {
        return Err(Error::contract("dataset and model window configurations differ"));
    }
    let started = Instant::now();
    let mut windows = ds.select(Split::Train, Some(Regime::Stationary));
    if windows.is_empty() {
        return Err(Error::contract("no stationary training windows"));
    }
    set_scale(model, ds, &ds.select(Split::Train, None))?;
    model.phase = TrainingPhase::Untrained;
    model.calibration = None;

    let ids = *model.ids(Branch::Stationary);
    let unc = [ids.unc_w, ids.unc_b];
    let body: Vec<ParamId> = model
        .trainable_params(Branch::Stationary)
        .into_iter()
        .filter(|id| !unc.contains(id))
        .collect();
    let mut rng = rng::substream(cfg.seed, 0x57a7);
    let mut epochs = Vec::with_capacity(cfg.stat_epochs + cfg.zeta_epochs);

    train_only(model, &body);
    let mut stepper = Stepper::new(cfg);
    for epoch in 0..cfg.stat_epochs {
        refit_branch(model, Branch::Stationary, ds, &windows, cfg.loss.ridge)?;
        let loss = run_epoch(model, ds, &mut windows, cfg, &mut rng, &mut stepper, &body, &stationary_loss)?;
        epochs.push(epoch_record(model, ds, "stat", epoch, loss)?);
    }
    refit_branch(model, Branch::Stationary, ds, &windows, cfg.loss.ridge)?;

    // The head learns how wrong the frozen branch is on every kind of
    // window, so it sees both regimes.
    let mut all = ds.select(Split::Train, None);
    train_only(model, &unc);
    let mut stepper = Stepper::new(cfg);
    for epoch in 0..cfg.zeta_epochs {
        let loss = run_epoch(model, ds, &mut all, cfg, &mut rng, &mut stepper, &unc, &stationary_zeta_loss)?;
        epochs.push(epoch_record(model, ds, "stat-zeta", epoch, loss)?);
    }

    model.params.set_all_trainable(false);
    model.phase = TrainingPhase::Stationary;
    Ok(TrainReport {
        epochs,
        regimes: evaluate(model, ds, &ds.select(Split::Validation, None))?,
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}

/// Start the transient branch as an extension of the trained stationary
/// branch: its first `n_stat` latents copy the stationary encoder, basis and
/// decoder, `K₀` is block-diagonal with `K^stat` in the leading block, and
/// the remaining latents start from their own initialization with a zero
/// decoder. The stationary parameters are only read.
fn extend_stationary(model: &mut KindModel) -> Result<()> {
    let (ns, nt) = (model.config.n_stat, model.config.n_trans);
    let tau = model.config.window.slice_len;
    if nt < ns {
        return Err(Error::config("the transient branch needs at least as many latents as the stationary one"));
    }
    let s = *model.ids(Branch::Stationary);
    let t = *model.ids(Branch::Transient);
    for (src, dst) in [(s.enc_w1, t.enc_w1), (s.enc_b1, t.enc_b1)] {
        let m = model.matrix(src);
        model.set_matrix(dst, &m)?;
    }
    // Latent i of the encoder output occupies columns i·τ..(i+1)·τ.
    for (src, dst) in [(s.enc_w2, t.enc_w2), (s.enc_b2, t.enc_b2)] {
        let from = model.matrix(src);
        let mut to = model.matrix(dst);
        to.columns_mut(0, ns * tau).copy_from(&from);
        model.set_matrix(dst, &to)?;
    }
    for (src, dst) in [(s.basis_a, t.basis_a), (s.basis_b, t.basis_b), (s.basis_c, t.basis_c), (s.basis_d, t.basis_d)] {
        let from = model.matrix(src);
        let mut to = model.matrix(dst);
        to.columns_mut(0, ns).copy_from(&from);
        model.set_matrix(dst, &to)?;
    }
    let mut k0 = DMatrix::<f64>::identity(nt, nt);
    k0.view_mut((0, 0), (ns, ns)).copy_from(&model.matrix(s.koopman));
    model.set_matrix(t.koopman, &k0)?;
    let mut dec = DMatrix::<f64>::zeros(nt, tau);
    dec.rows_mut(0, ns).copy_from(&model.matrix(s.dec_w));
    model.set_matrix(t.dec_w, &dec)?;
    let b = model.matrix(s.dec_b);
    model.set_matrix(t.dec_b, &b)
}

/// Median and 99th-percentile spread of `min(ζˢ, ζᵗ)` on training windows.
fn calibrate(model: &KindModel, ds: &WindowDataset) -> Result<AnomalyCalibration> {
    let windows = ds.select(Split::Train, None);
    let lookbacks: Vec<&[f64]> = windows.iter().map(|w| ds.lookback(w)).collect();
    let mut scores: Vec<f64> = model
        .forecast_batch(&lookbacks)?
        .iter()
        .map(|f| f.zeta_stat[0].min(f.zeta_trans[0]))
        .collect();
    if scores.is_empty() {
        return Err(Error::contract("no training windows to calibrate on"));
    }
    scores.sort_by(f64::total_cmp);
    let floor = quantile(&scores, 0.5);
    let spread = (quantile(&scores, 0.99) - floor).max(1e-12);
    Ok(AnomalyCalibration { floor, spread })
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Train the transient branch, attention network and operator bank on the
/// composite loss over all training windows. The stationary branch must be
/// trained already and is left bit-identical.
pub fn train_transient(ds: &WindowDataset, model: &mut KindModel, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if model.phase == TrainingPhase::Untrained {
        return Err(Error::contract("the stationary branch must be trained before the transient branch"));
    }
    if ds.config != model.config.window {
        return Err(Error::contract("dataset and model window configurations differ"));
    }
    let started = Instant::now();
    let mut windows = ds.select(Split::Train, None);
    if windows.is_empty() {
        return Err(Error::contract("no training windows"));
    }
    let frozen = model.branch_checksum(Branch::Stationary);
    let ids = model.trainable_params(Branch::Transient);
    train_only(model, &ids);

    if cfg.extend_stationary {
        extend_stationary(model)?;
    }
    let mut rng = rng::substream(cfg.seed, 0x7a45);
    let mut stepper = Stepper::new(cfg);
    let mut epochs = Vec::with_capacity(cfg.warmup_epochs + cfg.trans_epochs);
    let warm = LossConfig {
        w_fused: 0.0,
        w_stat: 0.0,
        w_trans: 1.0,
        w_unc: 0.0,
        ..cfg.loss
    };
    for epoch in 0..cfg.warmup_epochs {
        refit_branch(model, Branch::Transient, ds, &windows, cfg.loss.ridge)?;
        let loss = run_epoch(model, ds, &mut windows, cfg, &mut rng, &mut stepper, &ids, &|t, m, b| {
            composite_loss(t, m, b, &warm, None).map(|(l, _)| l)
        })?;
        epochs.push(epoch_record(model, ds, "trans-warmup", epoch, loss)?);
    }
    if cfg.warmup_epochs > 0 {
        refit_branch(model, Branch::Transient, ds, &windows, cfg.loss.ridge)?;
    }
    let mut stepper = Stepper::new(cfg);
    let loss_cfg = cfg.loss;
    for epoch in 0..cfg.trans_epochs {
        let loss = run_epoch(model, ds, &mut windows, cfg, &mut rng, &mut stepper, &ids, &|t, m, b| {
            composite_loss(t, m, b, &loss_cfg, None).map(|(l, _)| l)
        })?;
        epochs.push(epoch_record(model, ds, "trans", epoch, loss)?);
    }
    model.params.set_all_trainable(false);
    if model.branch_checksum(Branch::Stationary) != frozen {
        return Err(Error::contract("transient training modified the stationary branch"));
    }
    model.calibration = Some(calibrate(model, ds)?);
    model.phase = TrainingPhase::Complete;
    Ok(TrainReport {
        epochs,
        regimes: evaluate(model, ds, &ds.select(Split::Validation, None))?,
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}

// ---- gradient check ----------------------------------------------------------

/// Largest relative gradient error of one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub group: String,
    pub elements: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error <= self.tolerance)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| !(g.max_rel_error <= self.tolerance))
            .map(|g| g.group.as_str())
            .collect()
    }
}

pub const GRAD_CHECK_TOLERANCE: f64 = 1e-3;
const FD_STEP: f64 = 1e-6;

/// Group of a parameter for gradient reporting; `None` for the closed-form
/// stationary operator.
pub fn param_group(name: &str) -> Option<String> {
    let (branch, rest) = name.split_once('.')?;
    let group = match rest.split('.').next()? {
        "enc" => "encoder",
        "basis" => "basis",
        "dec" => "decoder",
        "unc" => "uncertainty",
        "koopman" if branch == "trans" => "bank",
        "attn" if rest == "attn.bank" => "bank",
        "attn" => "attention",
        _ => return None,
    };
    Some(format!("{branch}.{group}"))
}

/// Compare backpropagated gradients of the composite loss with central
/// differences for every parameter group of a tiny model, on one window of
/// `T + H` samples. `fault` perturbs one backward rule to exercise the
/// harness.
pub fn gradient_check(model: &KindModel, window: &[f64], fault: Option<FaultInjection>) -> Result<GradCheckReport> {
    let c = &model.config;
    if c.n_stat > 4 || c.n_trans > 4 || c.window.slice_count() > 3 {
        return Err(Error::contract("gradient check needs a tiny configuration (n ≤ 4, m ≤ 3)"));
    }
    if window.len() != c.window.span() {
        return Err(Error::contract(format!("window must hold {} samples", c.window.span())));
    }
    let mut model = model.clone();
    let ids: Vec<ParamId> = model
        .params
        .ids()
        .filter(|&id| param_group(&model.params.get(id).name).is_some())
        .collect();
    train_only(&mut model, &ids);
    let batch = Batch {
        x: window.iter().map(|v| v / model.scale).collect(),
        windows: 1,
        slices: c.window.total_slices(),
    };
    let loss_cfg = LossConfig::default();

    let mut tape = fault.map(Tape::with_fault).unwrap_or_default();
    let (loss, targets) = composite_loss(&mut tape, &model, &batch, &loss_cfg, None)?;
    tape.backward(loss, &mut model.params)?;

    let mut groups: Vec<GroupCheck> = Vec::new();
    for &id in &ids {
        let name = model.params.get(id).name.clone();
        let group = param_group(&name).expect("filtered above");
        let analytic = model
            .params
            .get(id)
            .tensor
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; model.params.get(id).tensor.len()]);
        let mut worst: f64 = 0.0;
        for (k, &a) in analytic.iter().enumerate() {
            let orig = model.params.get(id).tensor.values()[k];
            let mut eval = |v: f64| -> Result<f64> {
                model.params.get_mut(id).tensor.values_mut()[k] = v;
                let mut t = Tape::new();
                let (l, _) = composite_loss(&mut t, &model, &batch, &loss_cfg, Some(&targets))?;
                Ok(t.scalar(l))
            };
            let numeric = (eval(orig + FD_STEP)? - eval(orig - FD_STEP)?) / (2.0 * FD_STEP);
            model.params.get_mut(id).tensor.values_mut()[k] = orig;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        match groups.iter_mut().find(|g| g.group == group) {
            Some(g) => {
                g.elements += analytic.len();
                g.max_rel_error = g.max_rel_error.max(worst);
            }
            None => groups.push(GroupCheck {
                group,
                elements: analytic.len(),
                max_rel_error: worst,
            }),
        }
    }
    Ok(GradCheckReport {
        groups,
        tolerance: GRAD_CHECK_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kind::KindConfig;

    fn labelled(n: usize, trans: std::ops::Range<usize>) -> TimeSeries {
        let values = (0..n).map(|i| (i as f64 * 0.1).sin()).collect();
        let labels = (0..n)
            .map(|i| if trans.contains(&i) { Regime::Transient } else { Regime::Stationary })
            .collect();
        TimeSeries::with_labels(1000.0, values, labels).unwrap()
    }

    #[test]
    fn window_counts() {
        let cfg = WindowConfig::default();
        let s = labelled(288, 0..0);
        assert_eq!(make_windows(&s, cfg, 144).unwrap().len(), 2);
        let s = labelled(500, 0..0);
        assert_eq!(make_windows(&s, cfg, 1).unwrap().len(), 500 - 144 + 1);
        assert!(make_windows(&labelled(100, 0..0), cfg, 1).is_err());
    }

    #[test]
    fn window_labels() {
        let s = labelled(300, 200..201);
        let ds = make_windows(&s, WindowConfig::default(), 1).unwrap();
        for w in &ds.windows {
            let touches = w.start <= 200 && 200 < w.start + 144;
            assert_eq!(w.regime == Regime::Transient, touches);
        }
    }

    #[test]
    fn splits_drop_straddlers() {
        let s = labelled(1000, 0..0);
        let ds = make_windows(&s, WindowConfig::default(), 10).unwrap().with_splits(500, 800).unwrap();
        for w in &ds.windows {
            let end = w.start + 144;
            match w.split {
                Split::Train => assert!(end <= 500),
                Split::Validation => assert!(w.start >= 500 && end <= 800),
                Split::Evaluation => assert!(w.start >= 800),
            }
        }
        assert!(!ds.select(Split::Validation, None).is_empty());
    }

    #[test]
    fn group_names() {
        assert_eq!(param_group("stat.enc.w1").as_deref(), Some("stat.encoder"));
        assert_eq!(param_group("trans.attn.bank").as_deref(), Some("trans.bank"));
        assert_eq!(param_group("trans.koopman").as_deref(), Some("trans.bank"));
        assert_eq!(param_group("trans.attn.wq").as_deref(), Some("trans.attention"));
        assert_eq!(param_group("stat.koopman"), None);
    }

    #[test]
    fn loss_config_needs_a_positive_weight() {
        let l = LossConfig {
            w_fused: 0.0,
            w_stat: 0.0,
            w_trans: 0.0,
            w_unc: 0.0,
            ..LossConfig::default()
        };
        assert!(l.validate().is_err());
        assert!(LossConfig::default().validate().is_ok());
    }

    #[test]
    fn transient_before_stationary_is_rejected() {
        let s = labelled(600, 300..320);
        let mut m = KindModel::new(KindConfig::default(), 0).unwrap();
        let ds = make_windows(&s, WindowConfig::default(), 48).unwrap();
        assert!(matches!(
            train_transient(&ds, &mut m, &TrainConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 5.0);
        assert!((quantile(&v, 0.99) - 4.96).abs() < 1e-12);
    }
}
