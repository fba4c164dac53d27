//! Empirical prototype bank.
//!
//! One row per class, each an running estimate of the mean feature direction
//! of that class. Rows are written only by forward-pass updates
//!
//! ```text
//! α   = σ(cos(x̂, P_i))
//! P_i ← α·P_i + (1 − α)·x̂
//! ```
//!
//! and never receive gradients. `x̂` is the L2-normalized feature, and rows
//! are renormalized after each blend when `renormalize` is set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cosine_similarity, l2_normalize, normalize_in_place, random_unit_vector, Matrix};
use crate::losses::check_label;
use crate::rng::Rng;

/// The activation σ that maps a similarity to the retention coefficient α.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    /// `sigmoid(s - 1)`
    SigmoidShifted,
    /// `s / (1 + |s|)`
    Softsign,
}

impl Activation {
    pub const ALL: [Activation; 5] = [
        Activation::Identity,
        Activation::Relu,
        Activation::Sigmoid,
        Activation::SigmoidShifted,
        Activation::Softsign,
    ];

    pub fn apply(self, t: f64) -> f64 {
        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        match self {
            Activation::Identity => t,
            Activation::Relu => t.max(0.0),
            Activation::Sigmoid => sigmoid(t),
            Activation::SigmoidShifted => sigmoid(t - 1.0),
            Activation::Softsign => t / (1.0 + t.abs()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::SigmoidShifted => "sigmoid_shifted",
            Activation::Softsign => "softsign",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Activation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown activation `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankConfig {
    pub activation: Activation,
    pub renormalize: bool,
    /// When false, rows are frozen and updates are no-ops.
    pub update_enabled: bool,
    /// Adaptive updating strategy. When false, α is fixed at 0 and each
    /// update replaces the row with the incoming feature.
    pub adaptive: bool,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            activation: Activation::Softsign,
            renormalize: true,
            update_enabled: true,
            adaptive: true,
        }
    }
}

/// `α = σ(s)` for `s ∈ [-1, 1]`.
pub fn update_coefficient(s: f64, activation: Activation) -> f64 {
    activation.apply(s)
}

/// What a single update did to its row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BankUpdate {
    pub similarity: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalPrototypeBank {
    prototypes: Matrix,
    config: BankConfig,
    update_count: Vec<u64>,
}

impl EmpiricalPrototypeBank {
    /// `num_classes` random unit rows of dimension `dim`.
    pub fn new(num_classes: usize, dim: usize, config: BankConfig, rng: &mut Rng) -> Result<Self> {
        if num_classes < 1 || dim < 2 {
            return Err(Error::InvalidShape(format!(
                "bank needs at least 1 class and 2 dimensions, got {num_classes}x{dim}"
            )));
        }
        let rows: Vec<_> = (0..num_classes).map(|_| random_unit_vector(dim, rng)).collect();
        Ok(Self {
            prototypes: Matrix::from_rows(&rows)?,
            config,
            update_count: vec![0; num_classes],
        })
    }

    /// Rebuild from stored parts, e.g. when loading a checkpoint.
    pub fn from_parts(prototypes: Matrix, config: BankConfig, update_count: Vec<u64>) -> Result<Self> {
        if update_count.len() != prototypes.rows() {
            return Err(Error::DimensionMismatch {
                expected: prototypes.rows(),
                actual: update_count.len(),
            });
        }
        Ok(Self {
            prototypes,
            config,
            update_count,
        })
    }

    pub fn prototypes(&self) -> &Matrix {
        &self.prototypes
    }

    pub fn config(&self) -> &BankConfig {
        &self.config
    }

    pub fn set_config(&mut self, config: BankConfig) {
        self.config = config;
    }

    pub fn update_count(&self) -> &[u64] {
        &self.update_count
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    /// Blend feature `x` into row `label`. No other row changes.
    pub fn update(&mut self, label: usize, x: &[f64]) -> Result<BankUpdate> {
        check_label(label, self.num_classes())?;
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        let x_hat = l2_normalize(x)?;
        let row = self.prototypes.row(label);
        let similarity = cosine_similarity(&x_hat, row)?;
        if !self.config.update_enabled {
            return Ok(BankUpdate {
                similarity,
                alpha: 1.0,
            });
        }
        let alpha = if self.config.adaptive {
            update_coefficient(similarity, self.config.activation)
        } else {
            0.0
        };
        let mut blended: Vec<f64> = row
            .iter()
            .zip(x_hat.iter())
            .map(|(p, v)| alpha * p + (1.0 - alpha) * v)
            .collect();
        if self.config.renormalize {
            normalize_in_place(&mut blended)?;
        }
        self.prototypes.row_mut(label).copy_from_slice(&blended);
        self.update_count[label] += 1;
        Ok(BankUpdate { similarity, alpha })
    }

    /// Sequential updates in ascending batch order; same-class samples chain.
    pub fn batch_update(&mut self, features: &Matrix, labels: &[usize]) -> Result<()> {
        if labels.len() != features.rows() {
            return Err(Error::DimensionMismatch {
                expected: features.rows(),
                actual: labels.len(),
            });
        }
        for (k, &label) in labels.iter().enumerate() {
            self.update(label, features.row(k))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn bank_with_rows(rows: &[&[f64]]) -> EmpiricalPrototypeBank {
        let m = Matrix::from_rows(rows).unwrap();
        let n = m.rows();
        EmpiricalPrototypeBank::from_parts(m, BankConfig::default(), vec![0; n]).unwrap()
    }

    #[test]
    fn init_is_deterministic_unit_rows() {
        let cfg = BankConfig::default();
        let a = EmpiricalPrototypeBank::new(3, 4, cfg, &mut Rng::new(5)).unwrap();
        let b = EmpiricalPrototypeBank::new(3, 4, cfg, &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);
        for r in a.prototypes().row_iter() {
            assert!((norm(r) - 1.0).abs() < 1e-12);
        }
        assert_eq!(a.update_count(), &[0, 0, 0]);
        assert!(EmpiricalPrototypeBank::new(0, 4, cfg, &mut Rng::new(1)).is_err());
        assert!(EmpiricalPrototypeBank::new(3, 1, cfg, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn random_rows_are_nearly_orthogonal() {
        // E|cos| between independent uniform directions in 16-D is about 0.2.
        let bank = EmpiricalPrototypeBank::new(10_000, 16, BankConfig::default(), &mut Rng::new(77)).unwrap();
        let p = bank.prototypes();
        let mut total = 0.0;
        let pairs = 5_000;
        for k in 0..pairs {
            total += cosine_similarity(p.row(2 * k), p.row(2 * k + 1)).unwrap().abs();
        }
        assert!(total / (pairs as f64) < 0.3);
    }

    #[test]
    fn softsign_coefficients() {
        assert_eq!(update_coefficient(0.0, Activation::Softsign), 0.0);
        assert_eq!(update_coefficient(1.0, Activation::Softsign), 0.5);
        assert!((update_coefficient(0.5, Activation::Softsign) - 1.0 / 3.0).abs() < 1e-15);
        assert!((update_coefficient(0.0, Activation::SigmoidShifted) - 1.0 / (1.0 + 1f64.exp())).abs() < 1e-15);
    }

    #[test]
    fn softsign_alpha_range() {
        for k in 0..=2000 {
            let s = -1.0 + k as f64 * 1e-3;
            let a = update_coefficient(s, Activation::Softsign);
            assert!((-0.5..=0.5).contains(&a));
            assert!((0.5..=1.5).contains(&(1.0 - a)));
        }
    }

    #[test]
    fn new_feature_weight_decreases_with_similarity() {
        let grid: Vec<f64> = (0..=200).map(|k| -1.0 + k as f64 * 0.01).collect();
        for act in Activation::ALL {
            for w in grid.windows(2) {
                let lo = 1.0 - update_coefficient(w[0], act);
                let hi = 1.0 - update_coefficient(w[1], act);
                // relu is flat on negative similarities
                if act == Activation::Relu && w[1] <= 0.0 {
                    assert_eq!(lo, hi);
                } else {
                    assert!(hi < lo, "{act:?} at {}", w[0]);
                }
            }
        }
    }

    #[test]
    fn fixed_point_and_full_replacement() {
        let mut bank = bank_with_rows(&[&[0.6, 0.8], &[1.0, 0.0]]);
        let u = bank.update(0, &[3.0, 4.0]).unwrap();
        assert_eq!(u.alpha, 0.5);
        assert!((bank.prototypes()[(0, 0)] - 0.6).abs() < 1e-12);
        assert!((bank.prototypes()[(0, 1)] - 0.8).abs() < 1e-12);

        let u = bank.update(1, &[0.0, 2.0]).unwrap();
        assert_eq!(u.alpha, 0.0);
        assert_eq!(bank.prototypes().row(1), &[0.0, 1.0]);
        assert_eq!(bank.update_count(), &[1, 1]);
    }

    #[test]
    fn hand_evaluated_blend() {
        // s = 0.6, α = 0.6/1.6 = 0.375, blend = 0.375·[1,0] + 0.625·[0.6,0.8] = [0.75, 0.5]
        let mut bank = bank_with_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let u = bank.update(0, &[0.6, 0.8]).unwrap();
        assert!((u.alpha - 0.375).abs() < 1e-15);
        let n = (0.75f64 * 0.75 + 0.25).sqrt();
        assert!((bank.prototypes()[(0, 0)] - 0.75 / n).abs() < 1e-12);
        assert!((bank.prototypes()[(0, 1)] - 0.5 / n).abs() < 1e-12);
        assert!((bank.prototypes()[(0, 0)] - 0.83205).abs() < 1e-5);
        assert!((bank.prototypes()[(0, 1)] - 0.55470).abs() < 1e-5);
        assert_eq!(bank.prototypes().row(1), &[0.0, 1.0]);
    }

    #[test]
    fn non_adaptive_replaces_row() {
        let mut bank = bank_with_rows(&[&[1.0, 0.0]]);
        bank.set_config(BankConfig {
            adaptive: false,
            ..Default::default()
        });
        bank.update(0, &[0.6, 0.8]).unwrap();
        assert!((bank.prototypes()[(0, 0)] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn disabled_updates_leave_bank_untouched() {
        let mut bank = bank_with_rows(&[&[1.0, 0.0]]);
        bank.set_config(BankConfig {
            update_enabled: false,
            ..Default::default()
        });
        let before = bank.clone();
        bank.update(0, &[0.0, 1.0]).unwrap();
        assert_eq!(bank, before);
    }

    #[test]
    fn update_errors() {
        let mut bank = bank_with_rows(&[&[1.0, 0.0]]);
        assert!(matches!(bank.update(1, &[1.0, 0.0]), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(bank.update(0, &[0.0, 0.0]), Err(Error::ZeroVector { .. })));
        assert!(bank.update(0, &[1.0]).is_err());
    }

    #[test]
    fn batch_update_orders() {
        let base = bank_with_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        let f = Matrix::from_rows(&[[0.2, 0.3, 0.9], [0.5, -0.1, 0.4]]).unwrap();

        let mut single = base.clone();
        single.update(1, f.row(0)).unwrap();
        let mut b1 = base.clone();
        b1.batch_update(&f.select_rows(&[0]), &[1]).unwrap();
        assert_eq!(b1, single);

        let mut ab = base.clone();
        ab.batch_update(&f, &[0, 1]).unwrap();
        let mut ba = base.clone();
        ba.batch_update(&f.select_rows(&[1, 0]), &[1, 0]).unwrap();
        assert_eq!(ab, ba);

        let mut chained = base.clone();
        chained.update(0, f.row(0)).unwrap();
        chained.update(0, f.row(1)).unwrap();
        let mut batched = base.clone();
        batched.batch_update(&f, &[0, 0]).unwrap();
        assert_eq!(batched, chained);
        assert_eq!(batched.update_count(), &[2, 0]);
    }

    #[test]
    fn rows_stay_unit_under_long_random_streams() {
        let mut rng = Rng::new(123);
        for act in Activation::ALL {
            let cfg = BankConfig {
                activation: act,
                ..Default::default()
            };
            let mut bank = EmpiricalPrototypeBank::new(4, 8, cfg, &mut rng).unwrap();
            for _ in 0..2_500 {
                let label = rng.below(4);
                let x: Vec<f64> = (0..8).map(|_| rng.gaussian() * 10.0).collect();
                bank.update(label, &x).unwrap();
            }
            for r in bank.prototypes().row_iter() {
                assert!((norm(r) - 1.0).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn single_update_touches_one_row(
            label in 0usize..5,
            x in prop::collection::vec(-5.0f64..5.0, 6),
            seed in any::<u64>(),
        ) {
            prop_assume!(norm(&x) > 1e-3);
            let mut bank = EmpiricalPrototypeBank::new(5, 6, BankConfig::default(), &mut Rng::new(seed)).unwrap();
            let before = bank.clone();
            bank.update(label, &x).unwrap();
            for j in 0..5 {
                if j != label {
                    prop_assert_eq!(bank.prototypes().row(j), before.prototypes().row(j));
                }
            }
            prop_assert!((norm(bank.prototypes().row(label)) - 1.0).abs() < 1e-9);
        }
    }
}
