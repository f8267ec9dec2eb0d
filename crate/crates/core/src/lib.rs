//! Low-rank adaptation with a learned, per-layer rank.
//!
//! Each adapted weight is `W* + B·Λ(ν)·A`, where `Λ(ν)` holds the masses of
//! a discretized exponential with learnable rate `ν`. The rank `D` is the
//! 0.9-quantile of that law, so moving `ν` during training grows or shrinks
//! the adapter on the fly.
//!
//! Modules, bottom-up:
//!
//! - [`autodiff`]: dense reverse-mode tape.
//! - [`rank`]: discretized exponential, effective rank, importance diagonal.
//! - [`adapter`]: the adaptive layer, its initialization and resizing.
//! - [`losses`]: reconstruction, rank, entropy and weight-prior terms.
//! - [`toy`]: a small cross-attention network with a planted-rank teacher.
//! - [`train`]: Adam loop, fixed-rank baseline and sweeps.
//! - [`checkpoint`], [`config`], [`report`]: file formats.

pub mod adapter;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod losses;
pub mod optim;
pub mod rank;
pub mod report;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
