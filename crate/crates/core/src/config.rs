//! Run configuration: one JSON document covering data generation, the split,
//! training, gradient checking and parameter sweeps.
//!
//! Every section and key is optional; missing keys take the defaults below.
//! Unknown keys are rejected.
//!
//! ```json
//! {
//!   "data": { "num_classes": 50, "samples_per_class": 100, "input_dim": 32,
//!             "noise_sigma": 0.05, "hard_fraction": 0.1, "hard_pull": 0.5, "seed": 0 },
//!   "test_fraction": 0.2,
//!   "split_seed": 1,
//!   "checkpoint_every": 0,
//!   "train": {
//!     "epochs": 28, "batch_size": 64, "lr0": 0.1, "momentum": 0.9, "weight_decay": 0.0005,
//!     "schedule": { "kind": "step", "milestones": [16, 24], "factor": 0.1 },
//!     "seed": 0, "hidden_dims": [64], "embedding_dim": 32,
//!     "loss": { "gamma": 64.0, "margin": 0.4, "margin_mode": "cosine" },
//!     "epl": { "enabled": true, "start_epoch": 4, "tau": 0.015625, "beta": 0.7,
//!              "ep_term_enabled": true, "adaptive_margin_enabled": true },
//!     "bank": { "activation": "softsign", "renormalize": true,
//!               "update_enabled": true, "adaptive": true },
//!     "eval": { "fars": [0.01, 0.001], "pairs_per_kind": 20000, "pair_seed": 7, "top_k": 3 }
//!   },
//!   "gradcheck": { "instances": 100, "step": 1e-6, "tolerance": 1e-5, ... },
//!   "sweep": { "activations": ["identity", "relu", "sigmoid", "sigmoid_shifted", "softsign"],
//!              "betas": [0.5, 0.6, 0.7, 0.8, 0.9] }
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bank::Activation;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::gradcheck::GradCheckConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Swept with β fixed at `train.epl.beta`.
    pub activations: Vec<Activation>,
    /// Swept with the activation fixed at `train.bank.activation`.
    pub betas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            activations: Activation::ALL.to_vec(),
            betas: vec![0.5, 0.6, 0.7, 0.8, 0.9],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: SyntheticSpec,
    /// Held-out share of each class.
    pub test_fraction: f64,
    pub split_seed: u64,
    /// Also keep a snapshot every this many epochs (0 = final only).
    pub checkpoint_every: usize,
    pub train: TrainConfig,
    pub gradcheck: GradCheckConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: SyntheticSpec::default(),
            test_fraction: 0.2,
            split_seed: 1,
            checkpoint_every: 0,
            train: TrainConfig::default(),
            gradcheck: GradCheckConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate().map_err(as_config)?;
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction)));
        }
        self.train.validate()?;
        self.gradcheck.validate()?;
        if self.sweep.betas.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::Config("sweep.betas must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Replace every seed (data, split, training, gradient check) with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.split_seed = seed;
        self.train.seed = seed;
        self.gradcheck.seed = seed;
        self
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::InvalidSpec(m) => Error::Config(m),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.loss.gamma, 64.0);
        assert_eq!(cfg.train.epl.tau, 1.0 / 64.0);
        assert_eq!(cfg.train.epl.beta, 0.7);
        assert_eq!(cfg.train.bank.activation, Activation::Softsign);
        assert_eq!(cfg.train.loss.margin, 0.4);
        assert_eq!(cfg.train.momentum, 0.9);
        assert_eq!(cfg.train.weight_decay, 5e-4);
    }

    #[test]
    fn round_trip() {
        let cfg = RunConfig::default().with_seed(9);
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_named() {
        for (doc, key) in [
            (r#"{"bogus": 1}"#, "bogus"),
            (r#"{"train": {"lr": 0.1}}"#, "lr"),
            (r#"{"train": {"epl": {"betta": 0.5}}}"#, "betta"),
            (r#"{"train": {"schedule": {"kind": "step", "milestones": [], "factor": 0.1, "x": 1}}}"#, "x"),
        ] {
            match RunConfig::from_json(doc) {
                Err(Error::Config(msg)) => assert!(msg.contains(key), "{msg}"),
                other => panic!("expected config error for {doc}, got {other:?}"),
            }
        }
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for doc in [
            r#"{"test_fraction": 1.5}"#,
            r#"{"data": {"num_classes": 1}}"#,
            r#"{"train": {"batch_size": 0}}"#,
            r#"{"train": {"epl": {"beta": 2.0}}}"#,
            r#"{"train": {"bank": {"activation": "tanh"}}}"#,
            r#"{"sweep": {"betas": [1.5]}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(doc), Err(Error::Config(_))), "{doc}");
        }
    }

    #[test]
    fn polynomial_schedule_parses() {
        let cfg = RunConfig::from_json(r#"{"train": {"schedule": {"kind": "polynomial", "power": 2.0}}}"#).unwrap();
        assert_eq!(cfg.train.schedule, crate::train::Schedule::Polynomial { power: 2.0 });
    }
}
