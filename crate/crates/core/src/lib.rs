//! Deterministic simulator for differentially private federated learning.
//!
//! Clients train a small multilayer perceptron with DP-SGD (per-sample
//! clipping plus Gaussian noise on the batch sum) and upload noisy
//! gradients. Before aggregation the server detects gradients that
//! conflict with a reference gradient (negative cosine) and projects them
//! onto the reference's normal plane. Baseline strategies (DP-FedAvg,
//! DP-FedProx, DP-Scaffold, DP-FedExP, Isolated) share the same client
//! machinery and random streams so runs are directly comparable.
//!
//! Every emitted number is a pure function of the configuration and seed.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod correction;
pub mod data;
pub mod dp;
pub mod error;
pub mod federation;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
pub use linalg::ParamVector;
