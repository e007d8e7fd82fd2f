//! Federated-learning label-leakage laboratory.
//!
//! The crate simulates a FedSGD round in which a victim client uploads a
//! single bottom-layer weight gradient, then runs the gradient-bridge label
//! recovery attack against that share and scores the recovered per-class
//! label counts. Modules:
//!
//! - [`tensor`] / [`nn`]: exact f64 layer arithmetic (FC, Conv, ReLU,
//!   softmax cross-entropy).
//! - [`model`]: bottom-stack model construction, forward traces, batch
//!   backward passes with per-sample ground truth.
//! - [`flsim`]: batch samplers, the restricted gradient share, and the
//!   pruning/noise defenses.
//! - [`attack`]: feature/probability estimation, the gradient bridge, and
//!   integer label-count recovery.
//! - [`metrics`]: instance-level and class-level recovery accuracy.
//! - [`harness`]: config, datasets (synthetic + IDX), seeded trial/sweep
//!   execution and JSON/CSV reports.
//! - [`verify`]: the runnable identity suite behind `gdbr verify`.

pub mod attack;
pub mod error;
pub mod flsim;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
