//! Empirical prototype loss and the combined loss with a detached adaptive margin.
//!
//! The combined per-sample loss is
//!
//! ```text
//! L = log[1 + Σ_{j≠i} exp(s^e_j/τ) / exp(s^e_i/τ − β·m_x)
//!           + Σ_{j≠i} exp(γ s_j)   / exp(z_i)]
//! m_x = detach(s^e_i/τ)
//! ```
//!
//! with `s^e` the cosines to the bank rows, `s` the cosines to the learnable
//! prototypes and `z_i` the margin-adjusted positive logit of the base loss.
//! `m_x` is a constant for differentiation: the positive bank logit has the
//! forward value `(1 − β)·s^e_i/τ` but the derivative `1/τ`.

use serde::{Deserialize, Serialize};

use crate::bank::EmpiricalPrototypeBank;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::{check_label, log1p_sum_exp, normalize_inputs, reduce_batch, BatchLoss, LossConfig, LossOutput};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EplConfig {
    /// Temperature τ of the bank term; logits are `s/τ`.
    pub tau: f64,
    /// Scale β of the adaptive margin.
    pub beta: f64,
    /// Base prototype term (γ, m, margin mode).
    pub base: LossConfig,
    /// Include the bank term at all.
    pub ep_term_enabled: bool,
    /// Subtract `β·m_x` from the positive bank logit.
    pub adaptive_margin_enabled: bool,
}

impl Default for EplConfig {
    fn default() -> Self {
        Self {
            tau: 1.0 / 64.0,
            beta: 0.7,
            base: LossConfig::default(),
            ep_term_enabled: true,
            adaptive_margin_enabled: true,
        }
    }
}

impl EplConfig {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        Ok(())
    }

    fn effective_beta(&self) -> f64 {
        if self.adaptive_margin_enabled {
            self.beta
        } else {
            0.0
        }
    }

    /// Forward value of the positive bank logit, `(1 − β)·s/τ`.
    pub fn ep_positive_logit(&self, s_pos_e: f64) -> f64 {
        (1.0 - self.effective_beta()) * s_pos_e / self.tau
    }
}

/// `m_x = s/τ`. The caller treats the value as a constant.
pub fn adaptive_margin(s_pos_e: f64, tau: f64) -> f64 {
    s_pos_e / tau
}

/// Loss and similarity-level gradients of the combined loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EplTerms {
    pub loss: f64,
    /// `∂L/∂s^e_j`, with `m_x` held constant.
    pub grad_ep_sims: Vec<f64>,
    /// `∂L/∂s_j`.
    pub grad_proto_sims: Vec<f64>,
}

/// Combined loss from similarity rows, with `m_x` computed from `ep_sims`.
pub fn epl_loss_from_similarities(
    ep_sims: &[f64],
    proto_sims: &[f64],
    label: usize,
    cfg: &EplConfig,
) -> Result<EplTerms> {
    check_label(label, ep_sims.len())?;
    combined_terms(ep_sims, proto_sims, label, cfg.ep_positive_logit(ep_sims[label]), cfg)
}

/// Combined loss with the adaptive margin supplied explicitly.
///
/// `margin` enters only the forward value; derivatives treat it as fixed.
/// Passing `adaptive_margin(ep_sims[label], tau)` reproduces
/// [`epl_loss_from_similarities`].
pub fn epl_loss_with_margin(
    ep_sims: &[f64],
    proto_sims: &[f64],
    label: usize,
    margin: f64,
    cfg: &EplConfig,
) -> Result<EplTerms> {
    check_label(label, ep_sims.len())?;
    let ep_pos = ep_sims[label] / cfg.tau - cfg.effective_beta() * margin;
    combined_terms(ep_sims, proto_sims, label, ep_pos, cfg)
}

/// `ep_pos` is the forward value of the positive bank logit; its derivative
/// with respect to `s^e_i` is always `1/τ`.
fn combined_terms(
    ep_sims: &[f64],
    proto_sims: &[f64],
    label: usize,
    ep_pos: f64,
    cfg: &EplConfig,
) -> Result<EplTerms> {
    let n = proto_sims.len();
    if ep_sims.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: ep_sims.len(),
        });
    }
    check_label(label, n)?;
    let inv_tau = 1.0 / cfg.tau;
    let (z_pos, dz_pos) = cfg.base.positive_logit(proto_sims[label]);

    // [bank negatives..., prototype negatives...] relative to their positives
    let mut t = Vec::with_capacity(2 * (n - 1));
    if cfg.ep_term_enabled {
        t.extend(
            ep_sims
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != label)
                .map(|(_, &s)| s * inv_tau - ep_pos),
        );
    }
    let ep_count = t.len();
    t.extend(
        proto_sims
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != label)
            .map(|(_, &s)| cfg.base.gamma * s - z_pos),
    );
    let (loss, q) = log1p_sum_exp(&t);

    let mut grad_ep_sims = vec![0.0; n];
    let mut grad_proto_sims = vec![0.0; n];
    let (q_ep, q_proto) = q.split_at(ep_count);
    if cfg.ep_term_enabled {
        scatter_negatives(q_ep, label, inv_tau, inv_tau, &mut grad_ep_sims);
    }
    scatter_negatives(q_proto, label, cfg.base.gamma, dz_pos, &mut grad_proto_sims);
    Ok(EplTerms {
        loss,
        grad_ep_sims,
        grad_proto_sims,
    })
}

/// Negatives get `q_j·neg_scale`; the positive gets `−Σq·pos_scale`.
fn scatter_negatives(q: &[f64], label: usize, neg_scale: f64, pos_scale: f64, out: &mut [f64]) {
    let mut it = q.iter();
    let mut total = 0.0;
    for (j, g) in out.iter_mut().enumerate() {
        if j == label {
            continue;
        }
        let qj = *it.next().unwrap();
        *g = qj * neg_scale;
        total += qj;
    }
    out[label] = -total * pos_scale;
}

/// Bank-only loss `log(1 + Σ_{j≠i} exp(s^e_j/τ) / exp(s^e_i/τ))`.
///
/// Gradients flow to `x` only; `grad_prototypes` is all zeros.
pub fn epr_loss(x: &[f64], label: usize, bank: &EmpiricalPrototypeBank, tau: f64) -> Result<LossOutput> {
    let protos = bank.prototypes();
    check_label(label, protos.rows())?;
    let nz = normalize_inputs(x, protos)?;
    let sims = nz.similarities();
    let t: Vec<f64> = sims
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label)
        .map(|(_, &s)| (s - sims[label]) / tau)
        .collect();
    let (loss, q) = log1p_sum_exp(&t);
    let mut grad_sims = vec![0.0; sims.len()];
    scatter_negatives(&q, label, 1.0 / tau, 1.0 / tau, &mut grad_sims);
    let mut grad_feature = vec![0.0; x.len()];
    nz.backprop_feature(&sims, &grad_sims, &mut grad_feature);
    Ok(LossOutput {
        loss,
        grad_feature: grad_feature.into(),
        grad_prototypes: Matrix::zeros(protos.rows(), protos.cols()),
    })
}

/// Combined loss for one feature. `grad_prototypes` covers `w` only.
pub fn epl_loss(
    x: &[f64],
    label: usize,
    w: &Matrix,
    bank: &EmpiricalPrototypeBank,
    cfg: &EplConfig,
) -> Result<LossOutput> {
    epl_loss_inner(x, label, w, bank, None, cfg)
}

/// [`epl_loss`] with `m_x` supplied instead of computed from `x`. With the
/// margin held at its value for some `x₀`, the loss is an ordinary function
/// of `x` whose derivative at `x₀` is what [`epl_loss`] returns.
pub fn epl_loss_frozen_margin(
    x: &[f64],
    label: usize,
    w: &Matrix,
    bank: &EmpiricalPrototypeBank,
    margin: f64,
    cfg: &EplConfig,
) -> Result<LossOutput> {
    epl_loss_inner(x, label, w, bank, Some(margin), cfg)
}

fn epl_loss_inner(
    x: &[f64],
    label: usize,
    w: &Matrix,
    bank: &EmpiricalPrototypeBank,
    margin: Option<f64>,
    cfg: &EplConfig,
) -> Result<LossOutput> {
    if bank.prototypes().shape() != w.shape() {
        return Err(Error::DimensionMismatch {
            expected: w.rows() * w.cols(),
            actual: bank.num_classes() * bank.dim(),
        });
    }
    check_label(label, w.rows())?;
    let nz_w = normalize_inputs(x, w)?;
    let nz_e = normalize_inputs(x, bank.prototypes())?;
    let proto_sims = nz_w.similarities();
    let ep_sims = nz_e.similarities();
    let margin = margin.unwrap_or_else(|| adaptive_margin(ep_sims[label], cfg.tau));
    let terms = epl_loss_with_margin(&ep_sims, &proto_sims, label, margin, cfg)?;
    let mut grad_feature = vec![0.0; x.len()];
    nz_w.backprop_feature(&proto_sims, &terms.grad_proto_sims, &mut grad_feature);
    if cfg.ep_term_enabled {
        nz_e.backprop_feature(&ep_sims, &terms.grad_ep_sims, &mut grad_feature);
    }
    Ok(LossOutput {
        loss: terms.loss,
        grad_feature: grad_feature.into(),
        grad_prototypes: nz_w.backprop_rows(&proto_sims, &terms.grad_proto_sims),
    })
}

/// Mean combined loss over a batch.
pub fn batch_epl_loss(
    features: &Matrix,
    labels: &[usize],
    w: &Matrix,
    bank: &EmpiricalPrototypeBank,
    cfg: &EplConfig,
) -> Result<BatchLoss> {
    reduce_batch(features, labels, w.shape(), |x, label| epl_loss(x, label, w, bank, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::BankConfig;
    use crate::losses::{prototype_loss, MarginMode};
    use crate::rng::Rng;

    fn bank_from(rows: Matrix) -> EmpiricalPrototypeBank {
        let n = rows.rows();
        EmpiricalPrototypeBank::from_parts(rows, BankConfig::default(), vec![0; n]).unwrap()
    }

    fn random_rows(n: usize, d: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.gaussian()).collect()).unwrap()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let ab: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
        let aa: f64 = a.iter().map(|p| p * p).sum();
        let bb: f64 = b.iter().map(|p| p * p).sum();
        ab / (aa * bb).sqrt()
    }

    #[test]
    fn adaptive_margin_values() {
        assert_eq!(adaptive_margin(0.0, 1.0 / 64.0), 0.0);
        assert_eq!(adaptive_margin(0.5, 1.0 / 64.0), 32.0);
        assert_eq!(adaptive_margin(1.0, 1.0 / 64.0), 64.0);
    }

    #[test]
    fn margin_grows_with_similarity() {
        let cfg = EplConfig::default();
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=200 {
            let s = -1.0 + k as f64 * 0.01;
            let m = cfg.beta * adaptive_margin(s, cfg.tau);
            assert!(m > prev);
            prev = m;
        }
    }

    #[test]
    fn epr_examples() {
        let tau = 1.0 / 64.0;
        let bank = bank_from(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap());
        let out = epr_loss(&[1.0, 1.0], 1, &bank, tau).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-12);
        assert!(out.grad_prototypes.as_slice().iter().all(|&v| v == 0.0));

        let bank = bank_from(Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap());
        let out = epr_loss(&[5.0, 0.0], 0, &bank, tau).unwrap();
        assert!((out.loss - (-128f64).exp().ln_1p()).abs() < 1e-12);
    }

    #[test]
    fn epr_matches_scalar_oracle() {
        let mut rng = Rng::new(12);
        let bank = bank_from(random_rows(5, 8, &mut rng));
        let x: Vec<f64> = (0..8).map(|_| rng.gaussian()).collect();
        let tau = 1.0 / 64.0;
        let s: Vec<f64> = bank.prototypes().row_iter().map(|r| cosine(&x, r)).collect();
        let expected = -((s[3] / tau).exp() / s.iter().map(|v| (v / tau).exp()).sum::<f64>()).ln();
        let out = epr_loss(&x, 3, &bank, tau).unwrap();
        assert!((out.loss - expected).abs() < 1e-10);
    }

    #[test]
    fn epl_matches_scalar_oracle() {
        let mut rng = Rng::new(99);
        let w = random_rows(5, 8, &mut rng);
        let bank = bank_from(random_rows(5, 8, &mut rng));
        let x: Vec<f64> = (0..8).map(|_| rng.gaussian()).collect();
        let cfg = EplConfig::default();
        let label = 2;
        let (g, tau, beta, m) = (64.0, 1.0 / 64.0, 0.7, 0.4);
        let se: Vec<f64> = bank.prototypes().row_iter().map(|r| cosine(&x, r)).collect();
        let sw: Vec<f64> = w.row_iter().map(|r| cosine(&x, r)).collect();
        let mx = se[label] / tau;
        let mut sum = 0.0;
        for j in 0..5 {
            if j != label {
                sum += (se[j] / tau).exp() / (se[label] / tau - beta * mx).exp();
                sum += (g * sw[j]).exp() / (g * (sw[label] - m)).exp();
            }
        }
        let out = epl_loss(&x, label, &w, &bank, &cfg).unwrap();
        assert!((out.loss - (1.0 + sum).ln()).abs() < 1e-10, "{} vs {}", out.loss, (1.0 + sum).ln());
    }

    #[test]
    fn negligible_bank_term_reduces_to_base_loss() {
        let bank = bank_from(Matrix::from_rows(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]).unwrap());
        let w = Matrix::from_rows(&[[0.9, 0.3, 0.1], [0.2, 0.8, -0.3], [0.1, -0.5, 0.7]]).unwrap();
        let x = [1.0, 0.0, 0.0];
        let cfg = EplConfig {
            beta: 0.0,
            ..Default::default()
        };
        let combined = epl_loss(&x, 0, &w, &bank, &cfg).unwrap();
        let base = prototype_loss(&x, 0, &w, &cfg.base).unwrap();
        assert!((combined.loss - base.loss).abs() < 1e-9);
    }

    #[test]
    fn positive_bank_logit_identity() {
        let cfg = EplConfig::default();
        for s in [-0.9, -0.2, 0.0, 0.37, 1.0] {
            assert_eq!(cfg.ep_positive_logit(s), (1.0 - 0.7) * (s / cfg.tau));
        }
        let off = EplConfig {
            adaptive_margin_enabled: false,
            ..cfg
        };
        assert_eq!(off.ep_positive_logit(0.5), 32.0);
    }

    #[test]
    fn disabled_bank_term_equals_base_loss() {
        let mut rng = Rng::new(4);
        let w = random_rows(6, 5, &mut rng);
        let bank = bank_from(random_rows(6, 5, &mut rng));
        let x: Vec<f64> = (0..5).map(|_| rng.gaussian()).collect();
        for mode in [MarginMode::None, MarginMode::Cosine, MarginMode::Angular] {
            let cfg = EplConfig {
                beta: 0.0,
                ep_term_enabled: false,
                base: LossConfig {
                    margin_mode: mode,
                    ..Default::default()
                },
                ..Default::default()
            };
            let a = epl_loss(&x, 4, &w, &bank, &cfg).unwrap();
            let b = prototype_loss(&x, 4, &w, &cfg.base).unwrap();
            assert!((a.loss - b.loss).abs() < 1e-12);
            for (p, q) in a.grad_feature.iter().zip(b.grad_feature.iter()) {
                assert!((p - q).abs() < 1e-12);
            }
            assert_eq!(a.grad_prototypes, b.grad_prototypes);
        }
    }

    #[test]
    fn detached_margin_gradient() {
        let cfg = EplConfig::default();
        let se = [0.3, 0.1, -0.2, 0.25];
        let sw = [0.5, 0.2, 0.1, -0.3];
        let terms = epl_loss_from_similarities(&se, &sw, 0, &cfg).unwrap();
        let frozen = adaptive_margin(se[0], cfg.tau);
        let h = 1e-6;
        let eval_frozen = |v: f64| {
            let mut s = se;
            s[0] = v;
            epl_loss_with_margin(&s, &sw, 0, frozen, &cfg).unwrap().loss
        };
        let eval_live = |v: f64| {
            let mut s = se;
            s[0] = v;
            epl_loss_from_similarities(&s, &sw, 0, &cfg).unwrap().loss
        };
        let fd_frozen = (eval_frozen(se[0] + h) - eval_frozen(se[0] - h)) / (2.0 * h);
        let fd_live = (eval_live(se[0] + h) - eval_live(se[0] - h)) / (2.0 * h);
        assert!((terms.grad_ep_sims[0] - fd_frozen).abs() / fd_frozen.abs() < 1e-6);
        assert!((terms.grad_ep_sims[0] / fd_live - 1.0 / 0.3).abs() < 1e-3);
    }

    #[test]
    fn bank_untouched_by_loss() {
        let mut rng = Rng::new(5);
        let w = random_rows(4, 6, &mut rng);
        let bank = bank_from(random_rows(4, 6, &mut rng));
        let before = bank.clone();
        let x: Vec<f64> = (0..6).map(|_| rng.gaussian()).collect();
        let out = epl_loss(&x, 1, &w, &bank, &EplConfig::default()).unwrap();
        assert_eq!(bank, before);
        assert_eq!(out.grad_prototypes.shape(), (4, 6));
    }

    #[test]
    fn loss_positive_and_finite_at_extremes() {
        let bank = bank_from(Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap());
        let w = bank.prototypes().clone();
        for x in [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [1e-3, -7.0]] {
            for label in 0..2 {
                let out = epl_loss(&x, label, &w, &bank, &EplConfig::default()).unwrap();
                assert!(out.loss.is_finite() && out.loss > 0.0, "{x:?} {label} {}", out.loss);
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut rng = Rng::new(6);
        let w = random_rows(4, 6, &mut rng);
        let bank = bank_from(random_rows(3, 6, &mut rng));
        assert!(matches!(
            epl_loss(&[1.0; 6], 0, &w, &bank, &EplConfig::default()),
            Err(Error::DimensionMismatch { .. })
        ));
        let bank = bank_from(random_rows(4, 6, &mut rng));
        assert!(matches!(
            epl_loss(&[1.0; 6], 4, &w, &bank, &EplConfig::default()),
            Err(Error::IndexOutOfRange { .. })
        ));
    }
}
