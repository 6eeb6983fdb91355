//! Desk-scale workbench for verbalized technical analysis and guided
//! time-series forecasting.
//!
//! The crate wires together five subsystems:
//!
//! 1. [`market`] — OHLCV ingestion, windowing, and seeded synthetic markets.
//! 2. [`indicators`] / [`annotate`] — the ten classic technical indicators
//!    and the deterministic textual annotator that turns a price window into
//!    a forecasting prompt.
//! 3. [`policy`] / [`grpo`] — a differentiable toy sequence policy and the
//!    group-relative trainer (clipped surrogate + KL penalty, inverse-MSE
//!    reward, rejection-sampling SFT, three-stage pipeline).
//! 4. [`backbone`] / [`guidance`] — a small dual-branch transformer with
//!    cross-attention to principal embeddings, and attribute-conditioned
//!    guided forecasting.
//! 5. [`portfolio`] — daily-rebalanced mean-variance backtesting.
//!
//! Everything is deterministic given a seed; see `examples/` for one
//! runnable program per capability and `src/bin/tickertalk.rs` for the CLI.

pub mod annotate;
pub mod autodiff;
pub mod backbone;
pub mod commands;
pub mod config;
pub mod error;
pub mod grpo;
pub mod guidance;
pub mod indicators;
pub mod market;
pub mod plot;
pub mod policy;
pub mod portfolio;

pub use error::{Error, Result};
