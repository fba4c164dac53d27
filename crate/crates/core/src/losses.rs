//! Softmax prototype losses with additive cosine or angular margins.
//!
//! For a feature `x` with label `i` and prototype rows `W_j`, the loss is
//!
//! ```text
//! L = log(1 + Σ_{j≠i} exp(γ s_j) / exp(z_i))
//! ```
//!
//! where `s_j = cos(x, W_j)` and the positive logit `z_i` is `γ s_i` (no
//! margin), `γ (s_i - m)` (cosine margin) or `γ cos(acos(s_i) + m)`
//! (angular margin). Gradients are propagated analytically through the
//! cosine normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, FeatureVector, Matrix, DEFAULT_EPS_NORM};

/// acos inputs are clamped to `[-1 + ACOS_CLAMP, 1 - ACOS_CLAMP]`.
pub const ACOS_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginMode {
    None,
    Cosine,
    Angular,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Logit scale γ.
    pub gamma: f64,
    /// Margin m applied to the positive logit.
    pub margin: f64,
    pub margin_mode: MarginMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 64.0,
            margin: 0.4,
            margin_mode: MarginMode::Cosine,
        }
    }
}

impl LossConfig {
    pub fn plain(gamma: f64) -> Self {
        Self {
            gamma,
            margin: 0.0,
            margin_mode: MarginMode::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.margin >= 0.0) || !self.margin.is_finite() {
            return Err(Error::Config(format!("margin must be >= 0, got {}", self.margin)));
        }
        if self.margin_mode == MarginMode::Angular && self.margin >= std::f64::consts::FRAC_PI_2 {
            return Err(Error::Config(format!(
                "angular margin must be below pi/2, got {}",
                self.margin
            )));
        }
        Ok(())
    }

    /// Margin-adjusted positive logit and its derivative with respect to `s_pos`.
    pub fn positive_logit(&self, s_pos: f64) -> (f64, f64) {
        let g = self.gamma;
        match self.margin_mode {
            MarginMode::None => (g * s_pos, g),
            MarginMode::Cosine => (g * (s_pos - self.margin), g),
            MarginMode::Angular => {
                let lim = 1.0 - ACOS_CLAMP;
                let c = s_pos.clamp(-lim, lim);
                let theta = c.acos();
                let z = g * (theta + self.margin).cos();
                let dz = if s_pos.abs() < lim {
                    g * (theta + self.margin).sin() / theta.sin()
                } else {
                    0.0
                };
                (z, dz)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// ∂L/∂x for the raw (unnormalized) feature.
    pub grad_feature: FeatureVector,
    /// ∂L/∂W, one row per prototype.
    pub grad_prototypes: Matrix,
}

/// `log(1 + Σ exp(t_k))` with max subtraction.
///
/// Returns the value and `∂/∂t_k`, which are the softmax weights of the
/// `t_k` against an implicit zero logit.
pub(crate) fn log1p_sum_exp(t: &[f64]) -> (f64, Vec<f64>) {
    let shift = t.iter().copied().fold(0.0f64, f64::max);
    let mut weights: Vec<f64> = t.iter().map(|&v| (v - shift).exp()).collect();
    let tail: f64 = weights.iter().sum();
    let value = if shift == 0.0 {
        tail.ln_1p()
    } else {
        shift + ((-shift).exp() + tail).ln()
    };
    let denom = (-shift).exp() + tail;
    weights.iter_mut().for_each(|w| *w /= denom);
    (value, weights)
}

pub(crate) fn check_label(label: usize, n: usize) -> Result<()> {
    if label >= n {
        return Err(Error::IndexOutOfRange { index: label, len: n });
    }
    Ok(())
}

/// Loss and `∂L/∂s_j` from a row of cosine similarities.
pub fn prototype_loss_from_similarities(
    sims: &[f64],
    label: usize,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    check_label(label, sims.len())?;
    let (z_pos, dz_pos) = cfg.positive_logit(sims[label]);
    let t: Vec<f64> = sims
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label)
        .map(|(_, &s)| cfg.gamma * s - z_pos)
        .collect();
    let (loss, w) = log1p_sum_exp(&t);
    let mut grad = vec![0.0; sims.len()];
    let mut neg = w.iter();
    let mut pull = 0.0;
    for (j, g) in grad.iter_mut().enumerate() {
        if j == label {
            continue;
        }
        let q = *neg.next().unwrap();
        *g = q * cfg.gamma;
        pull += q;
    }
    grad[label] = -pull * dz_pos;
    Ok((loss, grad))
}

/// Normalized copies of `x` and every row of `w`, with their norms.
pub(crate) struct Normalized {
    pub x_hat: Vec<f64>,
    pub x_norm: f64,
    pub rows_hat: Matrix,
    pub row_norms: Vec<f64>,
}

pub(crate) fn normalize_inputs(x: &[f64], w: &Matrix) -> Result<Normalized> {
    if x.len() != w.cols() {
        return Err(Error::DimensionMismatch {
            expected: w.cols(),
            actual: x.len(),
        });
    }
    let x_norm = norm(x);
    if !(x_norm > DEFAULT_EPS_NORM) {
        return Err(Error::ZeroVector { norm: x_norm });
    }
    let x_hat: Vec<f64> = x.iter().map(|v| v / x_norm).collect();
    let mut rows_hat = w.clone();
    let mut row_norms = Vec::with_capacity(w.rows());
    for j in 0..w.rows() {
        let r = rows_hat.row_mut(j);
        let n = norm(r);
        if !(n > DEFAULT_EPS_NORM) {
            return Err(Error::ZeroVector { norm: n });
        }
        r.iter_mut().for_each(|v| *v /= n);
        row_norms.push(n);
    }
    Ok(Normalized {
        x_hat,
        x_norm,
        rows_hat,
        row_norms,
    })
}

impl Normalized {
    pub fn similarities(&self) -> Vec<f64> {
        self.rows_hat
            .row_iter()
            .map(|r| dot(&self.x_hat, r).clamp(-1.0, 1.0))
            .collect()
    }

    /// Accumulate `Σ_j g_j ∂s_j/∂x` into `grad_x`.
    pub fn backprop_feature(&self, sims: &[f64], grad_sims: &[f64], grad_x: &mut [f64]) {
        for (j, (&g, &s)) in grad_sims.iter().zip(sims).enumerate() {
            if g == 0.0 {
                continue;
            }
            let r = self.rows_hat.row(j);
            let a = g / self.x_norm;
            for t in 0..grad_x.len() {
                grad_x[t] += a * (r[t] - s * self.x_hat[t]);
            }
        }
    }

    /// `∂L/∂W_j = g_j ∂s_j/∂W_j` for every row.
    pub fn backprop_rows(&self, sims: &[f64], grad_sims: &[f64]) -> Matrix {
        let mut out = Matrix::zeros(self.rows_hat.rows(), self.rows_hat.cols());
        for (j, (&g, &s)) in grad_sims.iter().zip(sims).enumerate() {
            let r = self.rows_hat.row(j);
            let a = g / self.row_norms[j];
            for (t, o) in out.row_mut(j).iter_mut().enumerate() {
                *o = a * (self.x_hat[t] - s * r[t]);
            }
        }
        out
    }
}

/// Margin softmax loss for one feature against prototype matrix `w`.
pub fn prototype_loss(x: &[f64], label: usize, w: &Matrix, cfg: &LossConfig) -> Result<LossOutput> {
    check_label(label, w.rows())?;
    let nz = normalize_inputs(x, w)?;
    let sims = nz.similarities();
    let (loss, grad_sims) = prototype_loss_from_similarities(&sims, label, cfg)?;
    let mut grad_feature = vec![0.0; x.len()];
    nz.backprop_feature(&sims, &grad_sims, &mut grad_feature);
    let grad_prototypes = nz.backprop_rows(&sims, &grad_sims);
    Ok(LossOutput {
        loss,
        grad_feature: grad_feature.into(),
        grad_prototypes,
    })
}

/// Softmax over the margin-adjusted logits `[γ s_j, ..., z_i, ...]`.
pub fn prototype_softmax(sims: &[f64], label: usize, cfg: &LossConfig) -> Result<Vec<f64>> {
    check_label(label, sims.len())?;
    let (z_pos, _) = cfg.positive_logit(sims[label]);
    let logits: Vec<f64> = sims
        .iter()
        .enumerate()
        .map(|(j, &s)| if j == label { z_pos } else { cfg.gamma * s })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    Ok(p)
}

/// Closed-form prototype gradients for unit-norm `x` and unit-norm rows,
/// with logits taken as the direct dot products `⟨x, W_j⟩`.
///
/// Row `i` is `(p_i - 1)·γ·x` and row `j ≠ i` is `p_j·γ·x`, with `p` the
/// softmax over margin-adjusted logits. Every row is parallel to `x`. For
/// the angular mode the positive row uses `∂z_i/∂s_i` in place of `γ`.
///
/// Inputs are not renormalized here.
pub fn prototype_grad_closed_form(
    x: &[f64],
    label: usize,
    w_normalized: &Matrix,
    cfg: &LossConfig,
) -> Result<Matrix> {
    check_label(label, w_normalized.rows())?;
    if x.len() != w_normalized.cols() {
        return Err(Error::DimensionMismatch {
            expected: w_normalized.cols(),
            actual: x.len(),
        });
    }
    let xn = norm(x);
    if !(xn > DEFAULT_EPS_NORM) {
        return Err(Error::ZeroVector { norm: xn });
    }
    let sims: Vec<f64> = w_normalized.row_iter().map(|r| dot(x, r)).collect();
    let p = prototype_softmax(&sims, label, cfg)?;
    let (_, dz_pos) = cfg.positive_logit(sims[label]);
    let mut out = Matrix::zeros(w_normalized.rows(), x.len());
    for (j, &pj) in p.iter().enumerate() {
        let coef = if j == label { (pj - 1.0) * dz_pos } else { pj * cfg.gamma };
        out.row_mut(j).iter_mut().zip(x).for_each(|(o, &v)| *o = coef * v);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub loss: f64,
    pub grad_features: Matrix,
    pub grad_prototypes: Matrix,
}

/// Mean loss over a batch; gradients are those of the mean.
pub fn batch_loss(features: &Matrix, labels: &[usize], w: &Matrix, cfg: &LossConfig) -> Result<BatchLoss> {
    reduce_batch(features, labels, w.shape(), |x, label| prototype_loss(x, label, w, cfg))
}

/// Averages per-sample outputs in ascending sample order.
pub(crate) fn reduce_batch<F>(
    features: &Matrix,
    labels: &[usize],
    proto_shape: (usize, usize),
    mut per_sample: F,
) -> Result<BatchLoss>
where
    F: FnMut(&[f64], usize) -> Result<LossOutput>,
{
    if labels.len() != features.rows() {
        return Err(Error::DimensionMismatch {
            expected: features.rows(),
            actual: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let scale = 1.0 / labels.len() as f64;
    let mut loss = 0.0;
    let mut grad_features = Matrix::zeros(features.rows(), features.cols());
    let mut grad_prototypes = Matrix::zeros(proto_shape.0, proto_shape.1);
    for (k, &label) in labels.iter().enumerate() {
        let out = per_sample(features.row(k), label)?;
        loss += out.loss;
        grad_features
            .row_mut(k)
            .iter_mut()
            .zip(out.grad_feature.iter())
            .for_each(|(g, v)| *g = v * scale);
        grad_prototypes.add_scaled(&out.grad_prototypes, scale);
    }
    Ok(BatchLoss {
        loss: loss * scale,
        grad_features,
        grad_prototypes,
    })
}
