//! Koopman-inspired neural decomposition of detuning windows.
//!
//! Each lookback window of `T` samples is cut into `m` slices of `τ`
//! samples. Two branches lift the slices into latent columns: a stationary
//! branch advanced by a fixed operator fitted in closed form, and a
//! transient branch whose operator is inferred per window by attention over
//! its latent columns. Each branch decodes its advanced latents into slice
//! predictions and scores its own latent residuals; the scores set the
//! per-slice blending factor between the two forecasts.

mod blend;
mod model;
mod operator;
mod window;

pub use blend::{anomaly_flags, anomaly_score, blend, fuse, kalman_form, AnomalyCalibration, AnomalyConfig, BlendedForecast, BLEND_EPS};
pub use model::{AnomalyScan, Branch, KindConfig, KindModel, ScanRow, TrainingPhase};
pub use operator::{fit_stationary_operator, KoopmanOperator, LatentEmbedding, OperatorKind};
pub use window::{slice_window, WindowConfig};

