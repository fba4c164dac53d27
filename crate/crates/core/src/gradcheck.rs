//! Finite-difference gradient checks for every loss, alone and composed with
//! the encoder, plus the frozen-margin check of the combined loss.
//!
//! Relative error is `|a − n| / max(|a|, |n|, floor)` with central
//! differences `n = (L(θ + h) − L(θ − h)) / 2h`. Encoder coordinates whose
//! perturbation moves any hidden pre-activation across zero, or whose base
//! pre-activations include one within `kink_margin` of zero, are excluded.

use serde::{Deserialize, Serialize};

use crate::bank::{BankConfig, EmpiricalPrototypeBank};
use crate::encoder::MlpEncoder;
use crate::epl::{adaptive_margin, epl_loss_frozen_margin, epl_loss_from_similarities, epl_loss_with_margin, epr_loss, EplConfig};
use crate::error::{Error, Result};
use crate::linalg::{cosine_similarity, random_unit_vector, Matrix};
use crate::losses::{batch_loss, reduce_batch, BatchLoss, LossConfig, MarginMode};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    /// Random instances per check.
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub rel_floor: f64,
    pub kink_margin: f64,
    /// Encoder widths of the end-to-end checks, input first.
    pub encoder_dims: Vec<usize>,
    pub num_classes: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Tolerance of the frozen-margin derivative check.
    pub detach_tolerance: f64,
    /// Allowed relative deviation of the detach ratio from `1/(1 − β)`.
    pub detach_ratio_tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            step: 1e-6,
            tolerance: 1e-5,
            rel_floor: 1e-3,
            kink_margin: 1e-4,
            encoder_dims: vec![8, 16, 8],
            num_classes: 4,
            batch_size: 4,
            seed: 0,
            detach_tolerance: 1e-6,
            detach_ratio_tolerance: 0.01,
        }
    }
}

impl GradCheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 || self.batch_size == 0 || self.num_classes < 2 {
            return Err(Error::Config(
                "gradcheck needs instances ≥ 1, batch_size ≥ 1 and num_classes ≥ 2".into(),
            ));
        }
        if self.encoder_dims.len() < 2 || self.encoder_dims.iter().any(|&d| d == 0) || *self.encoder_dims.last().unwrap() < 2 {
            return Err(Error::Config("gradcheck.encoder_dims needs ≥ 2 positive widths, output ≥ 2".into()));
        }
        if !(self.step > 0.0 && self.tolerance > 0.0 && self.rel_floor > 0.0) {
            return Err(Error::Config("gradcheck step, tolerance and rel_floor must be positive".into()));
        }
        Ok(())
    }
}

/// Losses under test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CheckedLoss {
    Prototype(MarginMode),
    /// Bank-only loss.
    Epr,
    /// Combined loss.
    Epl,
}

impl CheckedLoss {
    pub const ALL: [CheckedLoss; 5] = [
        CheckedLoss::Prototype(MarginMode::None),
        CheckedLoss::Prototype(MarginMode::Cosine),
        CheckedLoss::Prototype(MarginMode::Angular),
        CheckedLoss::Epr,
        CheckedLoss::Epl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckedLoss::Prototype(MarginMode::None) => "prototype-none",
            CheckedLoss::Prototype(MarginMode::Cosine) => "prototype-cosine",
            CheckedLoss::Prototype(MarginMode::Angular) => "prototype-angular",
            CheckedLoss::Epr => "epr",
            CheckedLoss::Epl => "epl",
        }
    }

    fn epl_config(self) -> EplConfig {
        EplConfig::default()
    }

    /// Adaptive margins of the combined loss at `features`, to be held fixed
    /// while differencing. Empty for the other losses.
    pub fn frozen_margins(self, features: &Matrix, labels: &[usize], bank: &EmpiricalPrototypeBank) -> Result<Vec<f64>> {
        if self != CheckedLoss::Epl {
            return Ok(Vec::new());
        }
        let tau = self.epl_config().tau;
        features
            .row_iter()
            .zip(labels)
            .map(|(x, &l)| Ok(adaptive_margin(cosine_similarity(x, bank.prototypes().row(l))?, tau)))
            .collect()
    }

    /// Mean batch loss and gradients. `W` gradients are zero for
    /// [`CheckedLoss::Epr`]; `margins` comes from [`CheckedLoss::frozen_margins`].
    pub fn batch(
        self,
        features: &Matrix,
        labels: &[usize],
        w: &Matrix,
        bank: &EmpiricalPrototypeBank,
        margins: &[f64],
    ) -> Result<BatchLoss> {
        match self {
            CheckedLoss::Prototype(mode) => {
                let cfg = LossConfig {
                    margin_mode: mode,
                    ..LossConfig::default()
                };
                batch_loss(features, labels, w, &cfg)
            }
            CheckedLoss::Epr => {
                let tau = self.epl_config().tau;
                reduce_batch(features, labels, w.shape(), |x, l| epr_loss(x, l, bank, tau))
            }
            CheckedLoss::Epl => {
                let cfg = self.epl_config();
                let mut k = 0;
                reduce_batch(features, labels, w.shape(), |x, l| {
                    k += 1;
                    epl_loss_frozen_margin(x, l, w, bank, margins[k - 1], &cfg)
                })
            }
        }
    }
}

/// Accumulated comparison statistics of one check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub coordinates: usize,
    pub excluded: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: impl Into<String>, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            instances: 0,
            coordinates: 0,
            excluded: 0,
            max_rel_err: 0.0,
            tolerance,
            passed: true,
        }
    }

    fn record(&mut self, rel: f64) {
        self.coordinates += 1;
        if !(rel <= self.max_rel_err) {
            self.max_rel_err = rel;
        }
        self.passed = self.max_rel_err <= self.tolerance;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub results: Vec<CheckResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    /// One line per check: `<name> pass|FAIL max_rel=<e> coords=<n> excluded=<k>`.
    pub fn to_text(&self) -> String {
        self.results
            .iter()
            .map(|r| {
                format!(
                    "{} {} max_rel={:.3e} tol={:.0e} coords={} excluded={}\n",
                    r.name,
                    if r.passed { "pass" } else { "FAIL" },
                    r.max_rel_err,
                    r.tolerance,
                    r.coordinates,
                    r.excluded
                )
            })
            .collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn central_difference<F>(h: f64, mut f: F) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    Ok((f(h)? - f(-h)?) / (2.0 * h))
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gaussian()).collect()).expect("sized")
}

fn random_bank(n: usize, d: usize, rng: &mut Rng) -> EmpiricalPrototypeBank {
    let rows: Vec<_> = (0..n).map(|_| random_unit_vector(d, rng)).collect();
    EmpiricalPrototypeBank::from_parts(Matrix::from_rows(&rows).expect("sized"), BankConfig::default(), vec![0; n])
        .expect("sized")
}

struct Instance {
    inputs: Matrix,
    labels: Vec<usize>,
    w: Matrix,
    bank: EmpiricalPrototypeBank,
    encoder: MlpEncoder,
}

fn instance(cfg: &GradCheckConfig, rng: &mut Rng) -> Result<Instance> {
    let d_in = cfg.encoder_dims[0];
    let d = *cfg.encoder_dims.last().unwrap();
    Ok(Instance {
        inputs: gaussian_matrix(cfg.batch_size, d_in, rng),
        labels: (0..cfg.batch_size).map(|_| rng.below(cfg.num_classes)).collect(),
        w: gaussian_matrix(cfg.num_classes, d, rng),
        bank: random_bank(cfg.num_classes, d, rng),
        encoder: MlpEncoder::new(&cfg.encoder_dims, rng)?,
    })
}

/// Loss-level check with respect to features and `W`.
fn check_loss_inputs(kind: CheckedLoss, inst: &Instance, features: &Matrix, cfg: &GradCheckConfig, out: &mut CheckResult) -> Result<()> {
    let margins = kind.frozen_margins(features, &inst.labels, &inst.bank)?;
    let base = kind.batch(features, &inst.labels, &inst.w, &inst.bank, &margins)?;
    for k in 0..features.as_slice().len() {
        let numeric = central_difference(cfg.step, |delta| {
            let mut f = features.clone();
            f.as_mut_slice()[k] += delta;
            Ok(kind.batch(&f, &inst.labels, &inst.w, &inst.bank, &margins)?.loss)
        })?;
        out.record(relative_error(base.grad_features.as_slice()[k], numeric, cfg.rel_floor));
    }
    for k in 0..inst.w.as_slice().len() {
        let numeric = central_difference(cfg.step, |delta| {
            let mut w = inst.w.clone();
            w.as_mut_slice()[k] += delta;
            Ok(kind.batch(features, &inst.labels, &w, &inst.bank, &margins)?.loss)
        })?;
        out.record(relative_error(base.grad_prototypes.as_slice()[k], numeric, cfg.rel_floor));
    }
    Ok(())
}

fn perturbed(encoder: &MlpEncoder, index: usize, delta: f64) -> MlpEncoder {
    let mut e = encoder.clone();
    let mut offset = index;
    for (slice, _) in e.parameters_mut() {
        if offset < slice.len() {
            slice[offset] += delta;
            break;
        }
        offset -= slice.len();
    }
    e
}

/// Hidden pre-activations, flattened. The output layer has no rectifier.
fn hidden_pre(encoder: &MlpEncoder, inputs: &Matrix) -> Result<Vec<f64>> {
    let (_, cache) = encoder.forward(inputs)?;
    let pre = cache.pre_activations();
    Ok(pre[..pre.len() - 1].iter().flat_map(|m| m.as_slice().to_vec()).collect())
}

/// End-to-end check with respect to every encoder parameter.
fn check_encoder(kind: CheckedLoss, inst: &Instance, cfg: &GradCheckConfig, out: &mut CheckResult) -> Result<()> {
    let enc = &inst.encoder;
    let (features, cache) = enc.forward(&inst.inputs)?;
    let margins = kind.frozen_margins(&features, &inst.labels, &inst.bank)?;
    let base = kind.batch(&features, &inst.labels, &inst.w, &inst.bank, &margins)?;
    let (grads, _) = enc.backward(&cache, &base.grad_features)?;
    let analytic: Vec<f64> = grads.slices().concat();
    let pre0 = hidden_pre(enc, &inst.inputs)?;
    let near_kink = pre0.iter().any(|p| p.abs() < cfg.kink_margin);
    for (k, &a) in analytic.iter().enumerate() {
        let plus = perturbed(enc, k, cfg.step);
        let minus = perturbed(enc, k, -cfg.step);
        let crosses = hidden_pre(&plus, &inst.inputs)?
            .iter()
            .zip(hidden_pre(&minus, &inst.inputs)?)
            .zip(&pre0)
            .any(|((p, m), z)| (*p > 0.0) != (*z > 0.0) || (m > 0.0) != (*z > 0.0));
        if near_kink || crosses {
            out.excluded += 1;
            continue;
        }
        let lp = kind.batch(&plus.encode(&inst.inputs)?, &inst.labels, &inst.w, &inst.bank, &margins)?.loss;
        let lm = kind.batch(&minus.encode(&inst.inputs)?, &inst.labels, &inst.w, &inst.bank, &margins)?.loss;
        out.record(relative_error(a, (lp - lm) / (2.0 * cfg.step), cfg.rel_floor));
    }
    Ok(())
}

/// Derivative of the combined loss with respect to the positive bank
/// similarity. Returns `(frozen, ratio)`: the worst relative error against
/// differences taken with the margin held fixed, and the worst relative
/// deviation of analytic / (margin-substituted difference) from `1/(1 − β)`.
pub fn detach_check(cfg: &GradCheckConfig, epl: &EplConfig) -> Result<(CheckResult, CheckResult)> {
    let mut frozen = CheckResult::new("detach-frozen-margin", cfg.detach_tolerance);
    let mut ratio = CheckResult::new("detach-ratio", cfg.detach_ratio_tolerance);
    let expected = 1.0 / (1.0 - epl.beta);
    let mut rng = Rng::new(cfg.seed).fork(0xde7a);
    let n = cfg.num_classes;
    for _ in 0..cfg.instances {
        // Draw near the balanced regime so neither term saturates: negatives
        // around a common center c, the positive prototype cosine about m
        // above it and the positive bank cosine near c/(1 − β), where its
        // forward logit meets the negatives.
        let label = rng.below(n);
        let c = 0.05 + 0.2 * rng.uniform();
        let jitter = |rng: &mut Rng, v: f64| (v + 0.05 * (rng.uniform() - 0.5)).clamp(-1.0, 1.0);
        let mut ep: Vec<f64> = (0..n).map(|_| jitter(&mut rng, c)).collect();
        let mut proto: Vec<f64> = (0..n).map(|_| jitter(&mut rng, c)).collect();
        ep[label] = jitter(&mut rng, c / (1.0 - epl.beta));
        proto[label] = jitter(&mut rng, c + epl.base.margin);
        let margin = adaptive_margin(ep[label], epl.tau);
        let terms = epl_loss_with_margin(&ep, &proto, label, margin, epl)?;
        let analytic = terms.grad_ep_sims[label];
        let shifted = |delta: f64| {
            let mut e = ep.clone();
            e[label] += delta;
            e
        };
        let fd_frozen = central_difference(cfg.step, |d| Ok(epl_loss_with_margin(&shifted(d), &proto, label, margin, epl)?.loss))?;
        let fd_subst = central_difference(cfg.step, |d| Ok(epl_loss_from_similarities(&shifted(d), &proto, label, epl)?.loss))?;
        frozen.record(relative_error(analytic, fd_frozen, cfg.rel_floor));
        // Saturated instances carry no ratio information.
        if fd_subst.abs() > cfg.rel_floor {
            ratio.record(((analytic / fd_subst) / expected - 1.0).abs());
        } else {
            ratio.excluded += 1;
        }
        frozen.instances += 1;
        ratio.instances += 1;
    }
    Ok((frozen, ratio))
}

/// The full suite: for each loss, features + `W` and end-to-end encoder
/// parameters, then the detach checks.
pub fn run_suite(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    cfg.validate()?;
    let mut results = Vec::new();
    for (t, kind) in CheckedLoss::ALL.into_iter().enumerate() {
        let mut rng = Rng::new(cfg.seed).fork(t as u64 + 1);
        let mut inputs = CheckResult::new(format!("{}/features+W", kind.name()), cfg.tolerance);
        let mut params = CheckResult::new(format!("{}/encoder", kind.name()), cfg.tolerance);
        for _ in 0..cfg.instances {
            let inst = instance(cfg, &mut rng)?;
            let features = gaussian_matrix(cfg.batch_size, *cfg.encoder_dims.last().unwrap(), &mut rng);
            check_loss_inputs(kind, &inst, &features, cfg, &mut inputs)?;
            check_encoder(kind, &inst, cfg, &mut params)?;
            inputs.instances += 1;
            params.instances += 1;
        }
        results.push(inputs);
        results.push(params);
    }
    let (frozen, ratio) = detach_check(cfg, &EplConfig::default())?;
    results.push(frozen);
    results.push(ratio);
    Ok(GradCheckReport { results })
}
