//! Training loop: SGD with momentum and weight decay, step or polynomial
//! learning-rate schedules, and a delayed start for the empirical prototype
//! terms.
//!
//! One step, in order: forward the batch, update the bank (only once the
//! EPL phase is active), evaluate the loss against the updated bank,
//! backpropagate, then apply SGD to the encoder and `W`. The bank is never
//! touched by gradients.
//!
//! Random streams are forked from the seed: tag 1 initializes the encoder,
//! 2 the prototype matrix `W`, 3 the bank, and 4 drives the per-epoch
//! shuffles. Only the shuffle stream advances during training, and its state
//! is stored in checkpoints.

use serde::{Deserialize, Serialize};

use crate::bank::{BankConfig, EmpiricalPrototypeBank};
use crate::data::Dataset;
use crate::encoder::MlpEncoder;
use crate::epl::{batch_epl_loss, EplConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalReport};
use crate::linalg::{random_unit_vector, Matrix};
use crate::losses::{batch_loss, LossConfig};
use crate::rng::Rng;

const STREAM_ENCODER: u64 = 1;
const STREAM_PROTOTYPES: u64 = 2;
const STREAM_BANK: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    /// Multiply by `factor` at every milestone epoch.
    Step { milestones: Vec<usize>, factor: f64 },
    /// `lr0·(1 − epoch/epochs)^power`.
    Polynomial { power: f64 },
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Step {
            milestones: vec![16, 24],
            factor: 0.1,
        }
    }
}

/// Settings of the empirical prototype terms. Shares `γ`, `m` and the
/// margin mode with [`TrainConfig::loss`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EplSettings {
    /// Train with the combined loss; when false the prototype loss is used
    /// throughout and the bank never updates.
    pub enabled: bool,
    /// First epoch (0-based) of the EPL phase.
    pub start_epoch: usize,
    pub tau: f64,
    pub beta: f64,
    pub ep_term_enabled: bool,
    pub adaptive_margin_enabled: bool,
}

impl Default for EplSettings {
    fn default() -> Self {
        let d = EplConfig::default();
        Self {
            enabled: true,
            start_epoch: 4,
            tau: d.tau,
            beta: d.beta,
            ep_term_enabled: d.ep_term_enabled,
            adaptive_margin_enabled: d.adaptive_margin_enabled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub seed: u64,
    /// Hidden widths of the encoder; the input width comes from the data.
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub loss: LossConfig,
    pub epl: EplSettings,
    pub bank: BankConfig,
    pub eval: EvalOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 28,
            batch_size: 64,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: Schedule::default(),
            seed: 0,
            hidden_dims: vec![64],
            embedding_dim: 32,
            loss: LossConfig::default(),
            epl: EplSettings::default(),
            bank: BankConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epl.start_epoch > self.epochs {
            return bad(format!(
                "epl.start_epoch {} exceeds epochs {}",
                self.epl.start_epoch, self.epochs
            ));
        }
        if !(self.lr0 >= 0.0) || !self.lr0.is_finite() {
            return bad(format!("lr0 must be a non-negative number, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        match &self.schedule {
            Schedule::Step { factor, .. } if !(*factor > 0.0) || !factor.is_finite() => {
                return bad(format!("schedule.factor must be positive, got {factor}"));
            }
            Schedule::Polynomial { power } if !(*power >= 0.0) || !power.is_finite() => {
                return bad(format!("schedule.power must be non-negative, got {power}"));
            }
            _ => {}
        }
        if self.embedding_dim < 2 || self.hidden_dims.contains(&0) {
            return bad("embedding_dim must be at least 2 and hidden widths positive".into());
        }
        if self.eval.fars.iter().any(|&f| !(f > 0.0 && f < 1.0)) {
            return bad("eval.fars must lie in (0, 1)".into());
        }
        if self.eval.pairs_per_kind == 0 || self.eval.top_k == 0 {
            return bad("eval.pairs_per_kind and eval.top_k must be positive".into());
        }
        self.epl_config().validate()
    }

    pub fn epl_config(&self) -> EplConfig {
        EplConfig {
            tau: self.epl.tau,
            beta: self.epl.beta,
            base: self.loss,
            ep_term_enabled: self.epl.ep_term_enabled,
            adaptive_margin_enabled: self.epl.adaptive_margin_enabled,
        }
    }

    /// Whether the combined loss and bank updates run in `epoch`.
    pub fn epl_active(&self, epoch: usize) -> bool {
        self.epl.enabled && epoch >= self.epl.start_epoch
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Learning rate of a 0-based epoch.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    match &cfg.schedule {
        Schedule::Step { milestones, factor } => {
            let passed = milestones.iter().filter(|&&m| m <= epoch).count();
            cfg.lr0 * factor.powi(passed as i32)
        }
        Schedule::Polynomial { power } => {
            if cfg.epochs == 0 {
                return cfg.lr0;
            }
            let frac = 1.0 - epoch as f64 / cfg.epochs as f64;
            cfg.lr0 * frac.max(0.0).powf(*power)
        }
    }
}

/// `buf ← momentum·buf + grad + weight_decay·param; param ← param − lr·buf`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    momentum_buf: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for other in [grads.len(), momentum_buf.len()] {
        if other != params.len() {
            return Err(Error::DimensionMismatch {
                expected: params.len(),
                actual: other,
            });
        }
    }
    for ((p, &g), b) in params.iter_mut().zip(grads).zip(momentum_buf.iter_mut()) {
        *b = momentum * *b + g + weight_decay * *p;
        *p -= lr * *b;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 0-based epoch index.
    pub epoch: usize,
    /// Mean batch loss.
    pub loss: f64,
    pub loss_median: f64,
    pub lr: f64,
    pub eval: EvalReport,
}

/// Column name of a FAR operating point: `tar_far2` for `1e-2`.
pub fn far_column(far: f64) -> String {
    let e = -far.log10();
    if (e - e.round()).abs() < 1e-9 {
        format!("tar_far{}", e.round() as i64)
    } else {
        format!("tar_at_{far}")
    }
}

/// Metrics log as CSV: `epoch,loss,lr,<first far>,rank1,<other fars>,neg_top<k>,loss_median`.
/// Values are written in shortest round-trip form.
pub fn metrics_csv(metrics: &[EpochMetrics], opts: &EvalOptions) -> String {
    let mut cols = vec!["epoch".to_string(), "loss".into(), "lr".into()];
    let fars: Vec<String> = opts.fars.iter().map(|&f| far_column(f)).collect();
    cols.extend(fars.first().cloned());
    cols.push("rank1".into());
    cols.extend(fars.iter().skip(1).cloned());
    cols.push(format!("neg_top{}", opts.top_k));
    cols.push("loss_median".into());
    let mut out = cols.join(",");
    out.push('\n');
    for m in metrics {
        let tars: Vec<String> = m.eval.tar_at_far.iter().map(|t| t.tar.to_string()).collect();
        let mut row = vec![m.epoch.to_string(), m.loss.to_string(), m.lr.to_string()];
        row.extend(tars.first().cloned());
        row.push(m.eval.rank1.to_string());
        row.extend(tars.iter().skip(1).cloned());
        row.push(m.eval.mean_top_negative.to_string());
        row.push(m.loss_median.to_string());
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub encoder: MlpEncoder,
    /// Learnable prototypes `W`, one row per class.
    pub prototypes: Matrix,
    pub bank: EmpiricalPrototypeBank,
    /// One buffer per encoder parameter slice, then one for `W`.
    pub momentum: Vec<Vec<f64>>,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Shuffle stream.
    pub rng: Rng,
    pub metrics: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig, input_dim: usize, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        let root = Rng::new(cfg.seed);
        let mut dims = vec![input_dim];
        dims.extend(&cfg.hidden_dims);
        dims.push(cfg.embedding_dim);
        let encoder = MlpEncoder::new(&dims, &mut root.fork(STREAM_ENCODER))?;
        let mut w_rng = root.fork(STREAM_PROTOTYPES);
        let rows: Vec<_> = (0..num_classes)
            .map(|_| random_unit_vector(cfg.embedding_dim, &mut w_rng))
            .collect();
        let prototypes = Matrix::from_rows(&rows)?;
        let bank = EmpiricalPrototypeBank::new(num_classes, cfg.embedding_dim, cfg.bank, &mut root.fork(STREAM_BANK))?;
        let mut state = Self {
            encoder,
            prototypes,
            bank,
            momentum: Vec::new(),
            epoch: 0,
            rng: root.fork(STREAM_SHUFFLE),
            metrics: Vec::new(),
        };
        state.momentum = state.param_lens().into_iter().map(|n| vec![0.0; n]).collect();
        Ok(state)
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.rows()
    }

    /// Lengths of the parameter slices in momentum-buffer order.
    pub fn param_lens(&self) -> Vec<usize> {
        let mut lens: Vec<usize> = self
            .encoder
            .layers()
            .iter()
            .flat_map(|l| [l.weight.as_slice().len(), l.bias.len()])
            .collect();
        lens.push(self.prototypes.as_slice().len());
        lens
    }
}

fn check_dataset(state: &TrainState, ds: &Dataset) -> Result<()> {
    if ds.num_classes() != state.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: state.num_classes(),
            actual: ds.num_classes(),
        });
    }
    if ds.dim() != state.encoder.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: state.encoder.input_dim(),
            actual: ds.dim(),
        });
    }
    if ds.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    Ok(())
}

/// Loss and gradients of one batch after the (optional) bank update.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, batch: &Dataset, epoch: usize) -> Result<f64> {
    let (features, cache) = state.encoder.forward(&batch.inputs)?;
    let active = cfg.epl_active(epoch);
    if active {
        state.bank.batch_update(&features, &batch.labels)?;
    }
    let out = if active {
        batch_epl_loss(&features, &batch.labels, &state.prototypes, &state.bank, &cfg.epl_config())?
    } else {
        batch_loss(&features, &batch.labels, &state.prototypes, &cfg.loss)?
    };
    if !out.loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {} at epoch {epoch}", out.loss)));
    }
    let (grads, _) = state.encoder.backward(&cache, &out.grad_features)?;
    let lr = lr_at(cfg, epoch);
    let slices = grads.slices();
    let mut buffers = state.momentum.iter_mut();
    for ((param, decays), grad) in state.encoder.parameters_mut().into_iter().zip(slices) {
        let wd = if decays { cfg.weight_decay } else { 0.0 };
        sgd_step(param, grad, buffers.next().expect("buffer per slice"), lr, cfg.momentum, wd)?;
    }
    sgd_step(
        state.prototypes.as_mut_slice(),
        out.grad_prototypes.as_slice(),
        buffers.next().expect("buffer for W"),
        lr,
        cfg.momentum,
        cfg.weight_decay,
    )?;
    Ok(out.loss)
}

/// One full epoch followed by evaluation on `eval` (the training set when
/// absent). Appends and returns the epoch's metrics.
pub fn train_epoch(state: &mut TrainState, cfg: &TrainConfig, train: &Dataset, eval: Option<&Dataset>) -> Result<EpochMetrics> {
    check_dataset(state, train)?;
    let epoch = state.epoch;
    let mut order: Vec<usize> = (0..train.len()).collect();
    state.rng.shuffle(&mut order);
    let mut losses = Vec::with_capacity(train.len().div_ceil(cfg.batch_size));
    for chunk in order.chunks(cfg.batch_size) {
        let batch = train.subset(chunk);
        losses.push(train_step(state, cfg, &batch, epoch)?);
    }
    let loss = losses.iter().sum::<f64>() / losses.len() as f64;
    let report = evaluate(&state.encoder, &state.prototypes, eval.unwrap_or(train), &cfg.eval)?;
    let metrics = EpochMetrics {
        epoch,
        loss,
        loss_median: median(&mut losses),
        lr: lr_at(cfg, epoch),
        eval: report,
    };
    state.epoch += 1;
    state.metrics.push(metrics.clone());
    Ok(metrics)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Train from `state` until `cfg.epochs`, calling `on_epoch` after each
/// completed epoch (e.g. to write checkpoints).
pub fn train_from<F>(mut state: TrainState, cfg: &TrainConfig, train: &Dataset, eval: Option<&Dataset>, mut on_epoch: F) -> Result<TrainState>
where
    F: FnMut(&TrainState) -> Result<()>,
{
    cfg.validate()?;
    while state.epoch < cfg.epochs {
        train_epoch(&mut state, cfg, train, eval)?;
        on_epoch(&state)?;
    }
    Ok(state)
}

/// Fresh training run.
pub fn train(cfg: &TrainConfig, train_set: &Dataset, eval: Option<&Dataset>) -> Result<TrainState> {
    let state = TrainState::init(cfg, train_set.dim(), train_set.num_classes())?;
    train_from(state, cfg, train_set, eval, |_| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn toy() -> Dataset {
        generate_synthetic(&SyntheticSpec {
            num_classes: 4,
            samples_per_class: 12,
            input_dim: 6,
            noise_sigma: 0.2,
            hard_fraction: 0.25,
            hard_pull: 0.5,
            seed: 11,
        })
        .unwrap()
    }

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 4,
            batch_size: 8,
            lr0: 0.05,
            schedule: Schedule::Step {
                milestones: vec![3],
                factor: 0.1,
            },
            hidden_dims: vec![10],
            embedding_dim: 5,
            epl: EplSettings {
                start_epoch: 1,
                ..EplSettings::default()
            },
            eval: EvalOptions {
                pairs_per_kind: 200,
                top_k: 2,
                ..EvalOptions::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn step_schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(&cfg, 0), 0.1);
        assert_eq!(lr_at(&cfg, 15), 0.1);
        assert!((lr_at(&cfg, 16) - 0.01).abs() < 1e-15);
        assert!((lr_at(&cfg, 24) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn polynomial_schedule_values() {
        let cfg = TrainConfig {
            epochs: 20,
            schedule: Schedule::Polynomial { power: 2.0 },
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(&cfg, 0), 0.1);
        assert!((lr_at(&cfg, 10) - 0.025).abs() < 1e-15);
        assert_eq!(lr_at(&cfg, 20), 0.0);
    }

    #[test]
    fn sgd_examples() {
        let mut p = vec![1.0, -2.0];
        let mut buf = vec![0.0; 2];
        sgd_step(&mut p, &[0.0, 0.0], &mut buf, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);

        sgd_step(&mut p, &[0.5, 1.0], &mut buf, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p, vec![1.0 - 0.05, -2.0 - 0.1]);

        assert!(matches!(
            sgd_step(&mut p, &[1.0], &mut buf, 0.1, 0.0, 0.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn sgd_two_steps_match_unrolled_recursion() {
        let (lr, mu, wd) = (0.1, 0.9, 0.01);
        let (g1, g2, p0) = (0.3, -0.2, 1.5);
        let b1 = g1 + wd * p0;
        let p1 = p0 - lr * b1;
        let b2 = mu * b1 + g2 + wd * p1;
        let p2 = p1 - lr * b2;

        let mut p = [p0];
        let mut buf = [0.0];
        sgd_step(&mut p, &[g1], &mut buf, lr, mu, wd).unwrap();
        sgd_step(&mut p, &[g2], &mut buf, lr, mu, wd).unwrap();
        assert_eq!(p[0], p2);
        assert_eq!(buf[0], b2);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let ds = toy();
        let cfg = TrainConfig {
            epochs: 0,
            epl: EplSettings {
                start_epoch: 0,
                ..EplSettings::default()
            },
            ..toy_cfg()
        };
        let init = TrainState::init(&cfg, ds.dim(), ds.num_classes()).unwrap();
        let out = train(&cfg, &ds, None).unwrap();
        assert_eq!(out, init);
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn deterministic_metrics() {
        let ds = toy();
        let a = train(&toy_cfg(), &ds, None).unwrap();
        let b = train(&toy_cfg(), &ds, None).unwrap();
        let opts = &toy_cfg().eval;
        assert_eq!(metrics_csv(&a.metrics, opts), metrics_csv(&b.metrics, opts));
        assert_eq!(a, b);
        let c = train(&TrainConfig { seed: 1, ..toy_cfg() }, &ds, None).unwrap();
        assert_ne!(a.metrics, c.metrics);
    }

    #[test]
    fn disabled_epl_matches_inert_epl() {
        let ds = toy();
        let off = TrainConfig {
            epl: EplSettings {
                enabled: false,
                ..toy_cfg().epl
            },
            ..toy_cfg()
        };
        let inert = TrainConfig {
            epl: EplSettings {
                beta: 0.0,
                ep_term_enabled: false,
                ..toy_cfg().epl
            },
            ..toy_cfg()
        };
        let a = train(&off, &ds, None).unwrap();
        let b = train(&inert, &ds, None).unwrap();
        for (x, y) in a.prototypes.as_slice().iter().zip(b.prototypes.as_slice()) {
            assert!((x - y).abs() < 1e-9);
        }
        for (ma, mb) in a.metrics.iter().zip(&b.metrics) {
            assert!((ma.loss - mb.loss).abs() < 1e-9);
        }
    }

    #[test]
    fn frozen_bank_is_untouched() {
        let ds = toy();
        let cfg = TrainConfig {
            bank: BankConfig {
                update_enabled: false,
                ..BankConfig::default()
            },
            ..toy_cfg()
        };
        let init = TrainState::init(&cfg, ds.dim(), ds.num_classes()).unwrap();
        let out = train(&cfg, &ds, None).unwrap();
        assert_eq!(out.bank, init.bank);
        assert_ne!(out.prototypes, init.prototypes);
    }

    #[test]
    fn bank_updates_only_in_epl_phase() {
        let ds = toy();
        let cfg = toy_cfg();
        let mut state = TrainState::init(&cfg, ds.dim(), ds.num_classes()).unwrap();
        let bank0 = state.bank.clone();
        train_epoch(&mut state, &cfg, &ds, None).unwrap();
        assert_eq!(state.bank, bank0);
        train_epoch(&mut state, &cfg, &ds, None).unwrap();
        assert_eq!(state.bank.update_count().iter().sum::<u64>(), ds.len() as u64);
    }

    #[test]
    fn single_step_moves_w_by_lr_times_gradient() {
        let ds = toy();
        let cfg = TrainConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            epl: EplSettings {
                enabled: false,
                ..EplSettings::default()
            },
            ..toy_cfg()
        };
        let mut state = TrainState::init(&cfg, ds.dim(), ds.num_classes()).unwrap();
        let batch = ds.subset(&[0, 13, 26, 39, 5]);
        let feats = state.encoder.encode(&batch.inputs).unwrap();
        let expected = batch_loss(&feats, &batch.labels, &state.prototypes, &cfg.loss).unwrap();
        let w0 = state.prototypes.clone();
        train_step(&mut state, &cfg, &batch, 0).unwrap();
        let lr = lr_at(&cfg, 0);
        for k in 0..w0.as_slice().len() {
            let want = w0.as_slice()[k] - lr * expected.grad_prototypes.as_slice()[k];
            assert_eq!(state.prototypes.as_slice()[k], want);
        }
    }

    #[test]
    fn metrics_csv_header() {
        let opts = EvalOptions::default();
        let csv = metrics_csv(&[], &opts);
        assert_eq!(csv, "epoch,loss,lr,tar_far2,rank1,tar_far3,neg_top3,loss_median\n");
        assert_eq!(far_column(0.25), "tar_at_0.25");
    }

    #[test]
    fn dataset_shape_is_checked() {
        let ds = toy();
        let cfg = toy_cfg();
        let mut state = TrainState::init(&cfg, ds.dim(), 3).unwrap();
        assert!(matches!(
            train_epoch(&mut state, &cfg, &ds, None),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
