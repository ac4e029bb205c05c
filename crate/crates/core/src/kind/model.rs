use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::blend::{anomaly_flags, anomaly_score, blend, fuse, AnomalyCalibration, AnomalyConfig, BlendedForecast};
use super::operator::{KoopmanOperator, LatentEmbedding, OperatorKind};
use super::window::WindowConfig;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{Checkpoint, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Branch {
    Stationary,
    Transient,
}

impl Branch {
    pub const ALL: [Branch; 2] = [Branch::Stationary, Branch::Transient];

    /// Parameter-name prefix of the branch.
    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Stationary => "stat",
            Branch::Transient => "trans",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KindConfig {
    pub window: WindowConfig,
    pub n_stat: usize,
    pub n_trans: usize,
    /// Hidden width of each kernel encoder.
    pub hidden: usize,
    /// Number of matrices in the transient operator bank.
    pub rank: usize,
    /// Query/key/value width of the attention network.
    pub attn_width: usize,
}

impl Default for KindConfig {
    fn default() -> Self {
        Self {
            window: WindowConfig::default(),
            n_stat: 16,
            n_trans: 32,
            hidden: 16,
            rank: 4,
            attn_width: 16,
        }
    }
}

impl KindConfig {
    /// Smallest configuration used for gradient checks: `n = 4`, `τ = 4`,
    /// two lookback slices.
    pub fn tiny() -> Self {
        Self {
            window: WindowConfig {
                lookback: 8,
                horizon: 4,
                slice_len: 4,
            },
            n_stat: 4,
            n_trans: 4,
            hidden: 4,
            rank: 2,
            attn_width: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        if self.n_stat == 0 || self.n_trans == 0 || self.hidden == 0 || self.rank == 0 || self.attn_width == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        Ok(())
    }

    pub fn latent_dim(&self, branch: Branch) -> usize {
        match branch {
            Branch::Stationary => self.n_stat,
            Branch::Transient => self.n_trans,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingPhase {
    Untrained,
    /// Stationary branch trained and frozen.
    Stationary,
    Complete,
}

impl TrainingPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainingPhase::Untrained => "untrained",
            TrainingPhase::Stationary => "stationary",
            TrainingPhase::Complete => "complete",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "untrained" => Ok(TrainingPhase::Untrained),
            "stationary" => Ok(TrainingPhase::Stationary),
            "complete" => Ok(TrainingPhase::Complete),
            other => Err(Error::Parse(format!("unknown training phase {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BranchIds {
    pub enc_w1: ParamId,
    pub enc_b1: ParamId,
    pub enc_w2: ParamId,
    pub enc_b2: ParamId,
    pub basis_a: ParamId,
    pub basis_b: ParamId,
    pub basis_c: ParamId,
    pub basis_d: ParamId,
    pub dec_w: ParamId,
    pub dec_b: ParamId,
    pub unc_w: ParamId,
    pub unc_b: ParamId,
    /// Stationary: the fitted operator. Transient: the bank's base `K₀`.
    pub koopman: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct AttentionIds {
    pos: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    bank: ParamId,
}

/// Tape handles for one branch evaluated over a batch of windows, each
/// holding `slices` consecutive slices (rows window-major).
pub(crate) struct BatchPass {
    /// Decoded one-step predictions of slices `1..S` of each window
    /// `[B·(S−1) × τ]`.
    pub onestep: Var,
    /// Uncertainty of each one-step transition `[B·(S−1) × 1]`.
    pub zeta: Var,
    /// Decoded open-loop forecast from the last lookback slice
    /// `[B·H/τ × τ]`.
    pub open: Var,
}

/// One scan position: the lookback ending just before `end_sample`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanRow {
    /// Index of the last lookback slice in the scanned series.
    pub slice_index: usize,
    pub end_sample: usize,
    pub zeta_stat: f64,
    pub zeta_trans: f64,
    pub score: f64,
    pub flag: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyScan {
    pub rows: Vec<ScanRow>,
}

impl AnomalyScan {
    pub fn first_flag(&self) -> Option<&ScanRow> {
        self.rows.iter().find(|r| r.flag)
    }

    pub fn flag_count(&self) -> usize {
        self.rows.iter().filter(|r| r.flag).count()
    }

    /// `slice_index,end_sample,zeta_stat,zeta_trans,score,flag`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("slice_index,end_sample,zeta_stat,zeta_trans,score,flag\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.slice_index, r.end_sample, r.zeta_stat, r.zeta_trans, r.score, r.flag as u8
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct KindModel {
    pub config: KindConfig,
    pub params: ParamStore,
    /// Samples are divided by `scale` before lifting and predictions
    /// multiplied by it after decoding.
    pub scale: f64,
    pub phase: TrainingPhase,
    pub calibration: Option<AnomalyCalibration>,
    stat: BranchIds,
    trans: BranchIds,
    attn: AttentionIds,
}

fn insert_scaled_xavier(store: &mut ParamStore, name: String, rows: usize, cols: usize, gain: f64, rng: &mut Rng) -> Result<ParamId> {
    let id = store.insert_xavier(name, rows, cols, rng)?;
    store.get_mut(id).tensor.values_mut().iter_mut().for_each(|v| *v *= gain);
    Ok(id)
}

fn insert_normal(store: &mut ParamStore, name: String, rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Result<ParamId> {
    let values = (0..rows * cols).map(|_| std * rng::normal(rng)).collect();
    store.insert(name, Tensor::new(vec![rows, cols], values)?)
}

fn register_branch(store: &mut ParamStore, cfg: &KindConfig, branch: Branch, rng: &mut Rng) -> Result<BranchIds> {
    let p = branch.prefix();
    let n = cfg.latent_dim(branch);
    let tau = cfg.window.slice_len;
    let h = cfg.hidden;
    Ok(BranchIds {
        enc_w1: store.insert_xavier(format!("{p}.enc.w1"), tau, h, rng)?,
        enc_b1: store.insert_filled(format!("{p}.enc.b1"), 1, h, 0.0)?,
        enc_w2: insert_scaled_xavier(store, format!("{p}.enc.w2"), h, n * tau, 0.1, rng)?,
        // Random bias directions make φ start as a near-linear projection.
        enc_b2: insert_normal(store, format!("{p}.enc.b2"), 1, n * tau, 1.0 / (tau as f64).sqrt(), rng)?,
        basis_a: store.insert_filled(format!("{p}.basis.a"), 1, n, 0.1)?,
        basis_b: store.insert_filled(format!("{p}.basis.b"), 1, n, 1.0)?,
        basis_c: store.insert_filled(format!("{p}.basis.c"), 1, n, 0.0)?,
        basis_d: store.insert_filled(format!("{p}.basis.d"), 1, n, 1.0)?,
        dec_w: store.insert_xavier(format!("{p}.dec.w"), n, tau, rng)?,
        dec_b: store.insert_filled(format!("{p}.dec.b"), 1, tau, 0.0)?,
        unc_w: store.insert_filled(format!("{p}.unc.w"), n, 1, -2.0)?,
        unc_b: store.insert_filled(format!("{p}.unc.b"), 1, 1, -3.0)?,
        koopman: store.insert(format!("{p}.koopman"), Tensor::eye(n))?,
    })
}

fn register_attention(store: &mut ParamStore, cfg: &KindConfig, rng: &mut Rng) -> Result<AttentionIds> {
    let n = cfg.n_trans;
    let d = cfg.attn_width;
    let m = cfg.window.slice_count();
    Ok(AttentionIds {
        pos: insert_normal(store, "trans.attn.pos".into(), m, n, 0.1, rng)?,
        wq: store.insert_xavier("trans.attn.wq", n, d, rng)?,
        wk: store.insert_xavier("trans.attn.wk", n, d, rng)?,
        wv: store.insert_xavier("trans.attn.wv", n, d, rng)?,
        head_w: store.insert_xavier("trans.attn.head.w", d, cfg.rank, rng)?,
        head_b: store.insert_filled("trans.attn.head.b", 1, cfg.rank, 0.0)?,
        bank: insert_scaled_xavier(store, "trans.attn.bank".into(), cfg.rank, n * n, 0.1, rng)?,
    })
}

fn to_dmatrix(rows: usize, cols: usize, values: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, values)
}

impl KindModel {
    pub fn new(config: KindConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::substream(seed, 0x4b1d);
        let mut params = ParamStore::new();
        let stat = register_branch(&mut params, &config, Branch::Stationary, &mut rng)?;
        let trans = register_branch(&mut params, &config, Branch::Transient, &mut rng)?;
        let attn = register_attention(&mut params, &config, &mut rng)?;
        params.get_mut(stat.koopman).trainable = false;
        Ok(Self {
            config,
            params,
            scale: 1.0,
            phase: TrainingPhase::Untrained,
            calibration: None,
            stat,
            trans,
            attn,
        })
    }

    pub(crate) fn ids(&self, branch: Branch) -> &BranchIds {
        match branch {
            Branch::Stationary => &self.stat,
            Branch::Transient => &self.trans,
        }
    }

    /// Every parameter of a branch (the attention network and operator bank
    /// belong to the transient branch).
    pub fn branch_params(&self, branch: Branch) -> Vec<ParamId> {
        self.params.with_prefix(&format!("{}.", branch.prefix()))
    }

    /// Parameters of a branch that gradient descent may update.
    pub fn trainable_params(&self, branch: Branch) -> Vec<ParamId> {
        self.branch_params(branch)
            .into_iter()
            .filter(|&id| !(branch == Branch::Stationary && id == self.stat.koopman))
            .collect()
    }

    pub fn branch_checksum(&self, branch: Branch) -> u64 {
        self.params.checksum(&self.branch_params(branch))
    }

    pub(crate) fn set_matrix(&mut self, id: ParamId, m: &DMatrix<f64>) -> Result<()> {
        let t = &mut self.params.get_mut(id).tensor;
        let (r, c) = t.dims2()?;
        if (r, c) != m.shape() {
            return Err(Error::Dimension {
                op: "set_matrix",
                lhs: vec![r, c],
                rhs: vec![m.nrows(), m.ncols()],
            });
        }
        let vals = t.values_mut();
        for i in 0..r {
            for j in 0..c {
                vals[i * c + j] = m[(i, j)];
            }
        }
        Ok(())
    }

    pub(crate) fn matrix(&self, id: ParamId) -> DMatrix<f64> {
        let t = &self.params.get(id).tensor;
        let (r, c) = t.dims2().expect("parameters are 2-D");
        to_dmatrix(r, c, t.values())
    }

    // ---- tape building blocks -------------------------------------------

    fn p(&self, tape: &mut Tape, id: ParamId) -> Result<Var> {
        tape.param(&self.params, id)
    }

    /// `Ξ = G(⟨φ(X), X⟩)` for slices stacked as rows `[R × τ]`, giving
    /// `[R × n]`.
    pub(crate) fn tape_lift(&self, tape: &mut Tape, branch: Branch, x: Var) -> Result<Var> {
        let ids = *self.ids(branch);
        let (w1, b1) = (self.p(tape, ids.enc_w1)?, self.p(tape, ids.enc_b1)?);
        let (w2, b2) = (self.p(tape, ids.enc_w2)?, self.p(tape, ids.enc_b2)?);
        let pre = tape.affine(x, w1, b1)?;
        let hidden = tape.tanh(pre);
        let proj = tape.affine(hidden, w2, b2)?;
        let v = tape.row_project(proj, x)?;
        let a = self.p(tape, ids.basis_a)?;
        let b = self.p(tape, ids.basis_b)?;
        let c = self.p(tape, ids.basis_c)?;
        let d = self.p(tape, ids.basis_d)?;
        let bv = tape.mul(v, b)?;
        let z = tape.add(bv, c)?;
        let t = tape.tanh(z);
        let sat = tape.mul(t, a)?;
        let lin = tape.mul(v, d)?;
        tape.add(sat, lin)
    }

    pub(crate) fn tape_decode(&self, tape: &mut Tape, branch: Branch, z: Var) -> Result<Var> {
        let ids = *self.ids(branch);
        let (w, b) = (self.p(tape, ids.dec_w)?, self.p(tape, ids.dec_b)?);
        tape.affine(z, w, b)
    }

    /// `ζ(r) = softplus(Σᵢ softplus(wᵢ)·rᵢ² + b)` per row.
    pub(crate) fn tape_zeta(&self, tape: &mut Tape, branch: Branch, residual: Var) -> Result<Var> {
        let ids = *self.ids(branch);
        let sq = tape.square(residual);
        let raw = self.p(tape, ids.unc_w)?;
        let w = tape.softplus(raw);
        let s = tape.matmul(sq, w)?;
        let b = self.p(tape, ids.unc_b)?;
        let pre = tape.add(s, b)?;
        Ok(tape.softplus(pre))
    }

    /// `K₀ + Σ cᵣ Bᵣ` with `c` read out of attention over the lookback
    /// latents `[m × n]`.
    pub(crate) fn tape_transient_operator(&self, tape: &mut Tape, xi_lookback: Var) -> Result<Var> {
        let n = self.config.n_trans;
        let a = self.attn;
        let pos = self.p(tape, a.pos)?;
        let h = tape.add(xi_lookback, pos)?;
        let (wq, wk, wv) = (self.p(tape, a.wq)?, self.p(tape, a.wk)?, self.p(tape, a.wv)?);
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        let att = tape.attention(q, k, v)?;
        let ctx = tape.mean_rows(att);
        let (hw, hb) = (self.p(tape, a.head_w)?, self.p(tape, a.head_b)?);
        let coef = tape.affine(ctx, hw, hb)?;
        let bank = self.p(tape, a.bank)?;
        let mix = tape.matmul(coef, bank)?;
        let k0 = self.p(tape, self.trans.koopman)?;
        let k0f = tape.reshape(k0, 1, n * n)?;
        let kf = tape.add(k0f, mix)?;
        tape.reshape(kf, n, n)
    }

    /// Run one branch over `windows` windows of `slices` slices each, stacked
    /// window-major in `x [windows·slices × τ]` (normalized units).
    pub(crate) fn tape_batch(&self, tape: &mut Tape, branch: Branch, x: Var, windows: usize, slices: usize) -> Result<BatchPass> {
        let m = self.config.window.slice_count();
        let hs = self.config.window.horizon_slices();
        if slices < m || tape.shape(x)[0] != windows * slices || windows == 0 {
            return Err(Error::contract(format!(
                "batch of {windows} windows × {slices} slices does not match input rows {}",
                tape.shape(x)[0]
            )));
        }
        let xi = self.tape_lift(tape, branch, x)?;
        let src: Vec<usize> = (0..windows).flat_map(|w| (0..slices - 1).map(move |j| w * slices + j)).collect();
        let dst: Vec<usize> = src.iter().map(|i| i + 1).collect();
        let (onestep_lat, open_lat) = match branch {
            Branch::Stationary => {
                let k = self.p(tape, self.stat.koopman)?;
                let kt = tape.transpose(k);
                let from = tape.gather_rows(xi, &src)?;
                let onestep = tape.matmul(from, kt)?;
                let last: Vec<usize> = (0..windows).map(|w| w * slices + m - 1).collect();
                let mut z = tape.gather_rows(xi, &last)?;
                let mut steps = Vec::with_capacity(hs);
                for _ in 0..hs {
                    z = tape.matmul(z, kt)?;
                    steps.push(z);
                }
                let stacked = tape.concat_rows(&steps)?;
                let order: Vec<usize> = (0..windows).flat_map(|w| (0..hs).map(move |h| h * windows + w)).collect();
                let open = tape.gather_rows(stacked, &order)?;
                (onestep, open)
            }
            Branch::Transient => {
                let mut onesteps = Vec::with_capacity(windows);
                let mut opens = Vec::with_capacity(windows * hs);
                for w in 0..windows {
                    let rows: Vec<usize> = (0..m).map(|j| w * slices + j).collect();
                    let lb = tape.gather_rows(xi, &rows)?;
                    let k = self.tape_transient_operator(tape, lb)?;
                    let kt = tape.transpose(k);
                    let from = tape.gather_rows(xi, &src[w * (slices - 1)..(w + 1) * (slices - 1)])?;
                    onesteps.push(tape.matmul(from, kt)?);
                    let mut z = tape.slice_rows(lb, m - 1, 1)?;
                    for _ in 0..hs {
                        z = tape.matmul(z, kt)?;
                        opens.push(z);
                    }
                }
                (tape.concat_rows(&onesteps)?, tape.concat_rows(&opens)?)
            }
        };
        let next = tape.gather_rows(xi, &dst)?;
        let residual = tape.sub(next, onestep_lat)?;
        let zeta = self.tape_zeta(tape, branch, residual)?;
        let onestep = self.tape_decode(tape, branch, onestep_lat)?;
        let open = self.tape_decode(tape, branch, open_lat)?;
        Ok(BatchPass {
            onestep,
            zeta,
            open,
        })
    }

    // ---- inference ------------------------------------------------------

    fn normalized_rows(&self, slices: &[Vec<f64>]) -> Result<(usize, Vec<f64>)> {
        let tau = self.config.window.slice_len;
        if slices.iter().any(|s| s.len() != tau) {
            return Err(Error::contract(format!("every slice must have {tau} samples")));
        }
        Ok((slices.len(), slices.iter().flatten().map(|v| v / self.scale).collect()))
    }

    /// Lifted representation (`n × m`) of slices given in physical units.
    pub fn lift(&self, branch: Branch, slices: &[Vec<f64>]) -> Result<LatentEmbedding> {
        let (rows, vals) = self.normalized_rows(slices)?;
        if rows == 0 {
            return Err(Error::contract("no slices to lift"));
        }
        let mut tape = Tape::new();
        let x = tape.constant_from(rows, self.config.window.slice_len, vals)?;
        let xi = self.tape_lift(&mut tape, branch, x)?;
        let n = self.config.latent_dim(branch);
        LatentEmbedding::new(to_dmatrix(rows, n, tape.value(xi)).transpose())
    }

    pub fn stationary_operator(&self) -> Result<KoopmanOperator> {
        KoopmanOperator::new(self.matrix(self.stat.koopman), OperatorKind::Stationary)
    }

    pub fn infer_transient_operator(&self, xi: &LatentEmbedding) -> Result<KoopmanOperator> {
        let n = self.config.n_trans;
        let m = self.config.window.slice_count();
        if xi.dim() != n || xi.slices() != m {
            return Err(Error::contract(format!(
                "transient operator needs a {n}×{m} embedding, got {}×{}",
                xi.dim(),
                xi.slices()
            )));
        }
        let mut tape = Tape::new();
        // Column-major storage of Ξ is the row-major layout of Ξᵀ.
        let lb = tape.constant_from(m, n, xi.xi.iter().copied().collect())?;
        let k = self.tape_transient_operator(&mut tape, lb)?;
        KoopmanOperator::new(to_dmatrix(n, n, tape.value(k)), OperatorKind::Transient)
    }

    /// `ψ(K ξ)` in physical units.
    pub fn branch_predict(&self, branch: Branch, xi_col: &DVector<f64>, op: &KoopmanOperator) -> Result<Vec<f64>> {
        let n = self.config.latent_dim(branch);
        if xi_col.len() != n || op.dim() != n {
            return Err(Error::contract("latent and operator dimensions differ from the branch"));
        }
        let adv = op.advance(xi_col);
        let mut tape = Tape::new();
        let z = tape.constant_from(1, n, adv.iter().copied().collect())?;
        let out = self.tape_decode(&mut tape, branch, z)?;
        Ok(tape.value(out).iter().map(|v| v * self.scale).collect())
    }

    /// `ζ(ξ_{j+1} − Kξ_j)`.
    pub fn branch_uncertainty(&self, branch: Branch, xi_next: &DVector<f64>, xi_advanced: &DVector<f64>) -> Result<f64> {
        let n = self.config.latent_dim(branch);
        if xi_next.len() != n || xi_advanced.len() != n {
            return Err(Error::contract("latent dimension differs from the branch"));
        }
        let mut tape = Tape::new();
        let r = tape.constant_from(1, n, (xi_next - xi_advanced).iter().copied().collect())?;
        let z = self.tape_zeta(&mut tape, branch, r)?;
        Ok(tape.scalar(z))
    }

    /// Open-loop horizon forecast of one lookback window (physical units).
    pub fn forecast(&self, lookback: &[f64]) -> Result<BlendedForecast> {
        Ok(self.forecast_batch(&[lookback])?.remove(0))
    }

    pub fn forecast_batch(&self, lookbacks: &[&[f64]]) -> Result<Vec<BlendedForecast>> {
        let w = self.config.window;
        let (m, hs, tau) = (w.slice_count(), w.horizon_slices(), w.slice_len);
        if let Some(bad) = lookbacks.iter().find(|l| l.len() != w.lookback) {
            return Err(Error::contract(format!("lookback has {} samples, expected {}", bad.len(), w.lookback)));
        }
        let mut out = Vec::with_capacity(lookbacks.len());
        for chunk in lookbacks.chunks(64) {
            let b = chunk.len();
            let vals: Vec<f64> = chunk.iter().flat_map(|l| l.iter().map(|v| v / self.scale)).collect();
            let mut tape = Tape::new();
            let x = tape.constant_from(b * m, tau, vals)?;
            let ps = self.tape_batch(&mut tape, Branch::Stationary, x, b, m)?;
            let pt = self.tape_batch(&mut tape, Branch::Transient, x, b, m)?;
            let (zs, zt) = (tape.value(ps.zeta), tape.value(pt.zeta));
            let (os, ot) = (tape.value(ps.open), tape.value(pt.open));
            for i in 0..b {
                let lzs = zs[i * (m - 1)..(i + 1) * (m - 1)].to_vec();
                let lzt = zt[i * (m - 1)..(i + 1) * (m - 1)].to_vec();
                let (zs_last, zt_last) = (lzs[m - 2], lzt[m - 2]);
                let a = blend(zs_last, zt_last)?;
                let stat: Vec<f64> = os[i * hs * tau..(i + 1) * hs * tau].iter().map(|v| v * self.scale).collect();
                let trans: Vec<f64> = ot[i * hs * tau..(i + 1) * hs * tau].iter().map(|v| v * self.scale).collect();
                let mut fused = Vec::with_capacity(stat.len());
                for j in 0..hs {
                    fused.extend(fuse(&stat[j * tau..(j + 1) * tau], &trans[j * tau..(j + 1) * tau], a)?);
                }
                out.push(BlendedForecast {
                    fused,
                    stat,
                    trans,
                    alpha: vec![a; hs],
                    zeta_stat: vec![zs_last; hs],
                    zeta_trans: vec![zt_last; hs],
                    lookback_zeta_stat: lzs,
                    lookback_zeta_trans: lzt,
                });
            }
        }
        Ok(out)
    }

    /// Slide a lookback over `values` in steps of one slice and score the
    /// uncertainty of the last lookback transition of every position.
    pub fn anomaly_scan(&self, values: &[f64], config: &AnomalyConfig) -> Result<AnomalyScan> {
        config.validate()?;
        let cal = self
            .calibration
            .ok_or_else(|| Error::contract("model carries no anomaly calibration; train the transient phase first"))?;
        let w = self.config.window;
        if values.len() < w.lookback {
            return Err(Error::contract(format!("scan needs at least {} samples", w.lookback)));
        }
        let starts: Vec<usize> = (0..=values.len() - w.lookback).step_by(w.slice_len).collect();
        let lookbacks: Vec<&[f64]> = starts.iter().map(|&s| &values[s..s + w.lookback]).collect();
        let forecasts = self.forecast_batch(&lookbacks)?;
        let mut rows = Vec::with_capacity(starts.len());
        for (&s, f) in starts.iter().zip(&forecasts) {
            let (zs, zt) = (f.zeta_stat[0], f.zeta_trans[0]);
            let end = s + w.lookback;
            rows.push(ScanRow {
                slice_index: end / w.slice_len - 1,
                end_sample: end,
                zeta_stat: zs,
                zeta_trans: zt,
                score: anomaly_score(zs, zt, &cal)?,
                flag: false,
            });
        }
        let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
        for (r, f) in rows.iter_mut().zip(anomaly_flags(&scores, config)) {
            r.flag = f;
        }
        Ok(AnomalyScan { rows })
    }

    // ---- persistence ----------------------------------------------------

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut meta = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            meta.insert(k.to_string(), v);
        };
        put("lookback", c.window.lookback.to_string());
        put("horizon", c.window.horizon.to_string());
        put("slice_len", c.window.slice_len.to_string());
        put("n_stat", c.n_stat.to_string());
        put("n_trans", c.n_trans.to_string());
        put("hidden", c.hidden.to_string());
        put("rank", c.rank.to_string());
        put("attn_width", c.attn_width.to_string());
        put("scale", self.scale.to_string());
        put("phase", self.phase.as_str().to_string());
        if let Some(cal) = &self.calibration {
            put("calibration_floor", cal.floor.to_string());
            put("calibration_spread", cal.spread.to_string());
        }
        Checkpoint {
            meta,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = KindConfig {
            window: WindowConfig {
                lookback: ck.meta_usize("lookback")?,
                horizon: ck.meta_usize("horizon")?,
                slice_len: ck.meta_usize("slice_len")?,
            },
            n_stat: ck.meta_usize("n_stat")?,
            n_trans: ck.meta_usize("n_trans")?,
            hidden: ck.meta_usize("hidden")?,
            rank: ck.meta_usize("rank")?,
            attn_width: ck.meta_usize("attn_width")?,
        };
        let mut model = KindModel::new(config, 0)?;
        if ck.params.len() != model.params.len() {
            return Err(Error::Parse(format!(
                "checkpoint holds {} parameters, model expects {}",
                ck.params.len(),
                model.params.len()
            )));
        }
        let ids: Vec<ParamId> = model.params.ids().collect();
        for id in ids {
            let target = model.params.get_mut(id);
            let src = ck
                .params
                .by_name(&target.name)
                .ok_or_else(|| Error::Parse(format!("checkpoint lacks parameter {}", target.name)))?;
            if src.tensor.shape() != target.tensor.shape() {
                return Err(Error::Parse(format!("parameter {} has shape {:?}", target.name, src.tensor.shape())));
            }
            target.tensor = src.tensor.clone();
            target.tensor.clear_grad();
            target.trainable = src.trainable;
        }
        model.scale = ck.meta_f64("scale")?;
        if !(model.scale > 0.0 && model.scale.is_finite()) {
            return Err(Error::Parse("checkpoint scale must be positive".into()));
        }
        model.phase = TrainingPhase::parse(ck.meta.get("phase").map(String::as_str).unwrap_or("untrained"))?;
        model.calibration = match (ck.meta.get("calibration_floor"), ck.meta.get("calibration_spread")) {
            (Some(_), Some(_)) => Some(AnomalyCalibration {
                floor: ck.meta_f64("calibration_floor")?,
                spread: ck.meta_f64("calibration_spread")?,
            }),
            _ => None,
        };
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let mut m = KindModel::new(KindConfig::tiny(), 3).unwrap();
        m.scale = 2.5;
        m.calibration = Some(AnomalyCalibration { floor: 0.1, spread: 0.3 });
        let back = KindModel::from_checkpoint(&Checkpoint::from_text(&m.to_checkpoint().to_text()).unwrap()).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.scale, 2.5);
        assert_eq!(back.calibration, m.calibration);
    }

    #[test]
    fn forecast_shapes() {
        let m = KindModel::new(KindConfig::default(), 1).unwrap();
        let x: Vec<f64> = (0..96).map(|i| (i as f64 * 0.3).sin()).collect();
        let f = m.forecast(&x).unwrap();
        assert_eq!(f.fused.len(), 48);
        assert_eq!(f.alpha.len(), 3);
        assert_eq!(f.lookback_zeta_stat.len(), 5);
        assert!(m.forecast(&x[..95]).is_err());
    }

    #[test]
    fn embedding_orientation() {
        let m = KindModel::new(KindConfig::tiny(), 2).unwrap();
        let slices = vec![vec![0.1, 0.2, 0.3, 0.4], vec![-0.5, 0.0, 0.5, 1.0]];
        let e = m.lift(Branch::Transient, &slices).unwrap();
        assert_eq!((e.dim(), e.slices()), (4, 2));
        let single = m.lift(Branch::Transient, &slices[1..]).unwrap();
        for i in 0..4 {
            assert!((e.xi[(i, 1)] - single.xi[(i, 0)]).abs() < 1e-15);
        }
        let op = m.infer_transient_operator(&e).unwrap();
        assert_eq!(op.dim(), 4);
    }
}
