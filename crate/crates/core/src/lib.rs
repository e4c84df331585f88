//! Dynamic-graph recurrent traffic forecasting for hurricane evacuations.
//!
//! The crate covers the whole path from raw detector and crisis-movement
//! feeds to evaluated forecasts:
//!
//! - [`tensor`]: `f64` tensors, a reverse-mode autodiff tape, ADAM and
//!   checkpoints.
//! - [`graph`]: the detector road graph and travel-time adjacency.
//! - [`detector`]: quality control, imputation and hourly features.
//! - [`movement`]: tile-level movement counts to hourly detector flows.
//! - [`models`]: the DGCN-LSTM and its GCN-LSTM and LSTM baselines.
//! - [`transfer`]: the frozen-forecaster transfer model for evacuations.
//! - [`training`]: gap-safe windows, splits, training, metrics and repeated
//!   runs.
//! - [`synthetic`]: synthetic corridors, surges and movement data.
//! - [`experiment`] and [`workflow`]: configuration-driven experiments.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod detector;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod models;
pub mod movement;
pub mod synthetic;
pub mod tensor;
pub mod training;
pub mod transfer;
pub mod workflow;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/graph.md")]
    mod graph {}
    #[doc = include_str!("../../../book/src/detectors.md")]
    mod detectors {}
    #[doc = include_str!("../../../book/src/movement.md")]
    mod movement {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/transfer.md")]
    mod transfer {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
