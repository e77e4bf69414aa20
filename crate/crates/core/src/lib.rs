//! Spatio-temporal graph forecasting with selective state-space scans.
//!
//! The crate is organized bottom-up: `numerics` provides tensors and
//! reverse-mode differentiation, `ssm` the state-space layers, `graph`
//! multi-way walk extraction, `model` the forecasting network, `data`
//! dataset handling and metrics, `trainer` the optimization loop, and
//! `cli` the command implementations behind the `spot` binary.

pub mod cli;
pub mod data;
pub mod graph;
pub mod model;
pub mod numerics;
pub mod ssm;
pub mod trainer;
