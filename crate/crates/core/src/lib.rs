//! Empirical prototype learning for discriminative embeddings.
//!
//! The crate trains an encoder so that features of the same identity cluster
//! around a class prototype. Two kinds of prototype are maintained side by
//! side:
//!
//! - learnable prototypes, the rows of the last linear layer `W`, trained by
//!   gradient descent under a margin softmax loss ([`losses`]);
//! - empirical prototypes, a per-class running estimate of the feature mean
//!   updated in the forward pass with a similarity-dependent coefficient
//!   ([`bank`]).
//!
//! [`epl`] combines both into one loss with a detached, per-sample adaptive
//! margin on the empirical term. The remaining modules form a small but
//! complete harness: an MLP encoder with manual backprop ([`encoder`]),
//! synthetic identity data with injected hard samples ([`data`]), SGD
//! training with checkpoints ([`train`]), verification and identification
//! metrics ([`eval`]), finite-difference gradient checks ([`gradcheck`]) and
//! the command-line runner ([`cli`]).
//!
//! All arithmetic is `f64`, and everything random is driven by the seeded
//! [`rng::Rng`].

pub mod bank;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod epl;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod rng;
pub mod train;

pub use bank::{Activation, BankConfig, EmpiricalPrototypeBank};
pub use epl::{epl_loss, epr_loss, EplConfig};
pub use error::{Error, Result};
pub use linalg::{FeatureVector, Matrix};
pub use losses::{prototype_loss, LossConfig, LossOutput, MarginMode};
pub use rng::Rng;
