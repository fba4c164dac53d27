//! Synthetic identity datasets with injected hard samples, a plain-text file
//! format, stratified splits and verification pairs.
//!
//! Each class `i` has a center direction `c_i` drawn uniformly on the unit
//! sphere. Normal samples are `normalize(c_i + σ·g)` and hard samples are
//! `normalize((1 − p)·c_i + p·c_j + σ·g)`, where `c_j` is the center closest
//! to `c_i` (its confuser), `p` the hard pull and `g` standard Gaussian noise.
//!
//! File format, one header line then one line per sample:
//!
//! ```text
//! epl-dataset v1 N=<classes> dim=<input dim>
//! <label>,<is_hard 0|1>,<v0>,...,<v{dim-1}>
//! ```
//!
//! Values are written in shortest round-trip decimal form, so a save/load
//! cycle is bit-exact. Every line, including the last, ends with `\n`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, l2_normalize, random_unit_vector, Matrix};
use crate::rng::Rng;

const HEADER_MAGIC: &str = "epl-dataset";
const HEADER_VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    /// Per-coordinate standard deviation of the Gaussian noise.
    pub noise_sigma: f64,
    /// Fraction of each class generated as hard samples, `[0, 1)`.
    pub hard_fraction: f64,
    /// Interpolation weight toward the confuser center, `(0, 1]`.
    pub hard_pull: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 50,
            samples_per_class: 100,
            input_dim: 32,
            noise_sigma: 0.05,
            hard_fraction: 0.1,
            hard_pull: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidSpec(msg));
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.samples_per_class < 1 {
            return fail("samples_per_class must be positive".into());
        }
        if self.input_dim < 2 {
            return fail(format!("input_dim must be at least 2, got {}", self.input_dim));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return fail(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(0.0..1.0).contains(&self.hard_fraction) {
            return fail(format!("hard_fraction must lie in [0, 1), got {}", self.hard_fraction));
        }
        if !(self.hard_pull > 0.0 && self.hard_pull <= 1.0) {
            return fail(format!("hard_pull must lie in (0, 1], got {}", self.hard_pull));
        }
        Ok(())
    }

    /// Number of hard samples in each class.
    pub fn hard_per_class(&self) -> usize {
        (self.hard_fraction * self.samples_per_class as f64).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub is_hard: Vec<bool>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, is_hard: Vec<bool>, num_classes: usize) -> Result<Self> {
        if labels.len() != inputs.rows() || is_hard.len() != inputs.rows() {
            return Err(Error::DimensionMismatch {
                expected: inputs.rows(),
                actual: labels.len().min(is_hard.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: num_classes,
            });
        }
        Ok(Self {
            inputs,
            labels,
            is_hard,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Sample indices of each class, ascending.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (k, &l) in self.labels.iter().enumerate() {
            out[l].push(k);
        }
        out
    }

    /// Fails with `EmptyClass` if some class has no samples.
    pub fn check_classes_nonempty(&self) -> Result<()> {
        match self.class_indices().iter().position(|c| c.is_empty()) {
            Some(i) => Err(Error::EmptyClass(i)),
            None => Ok(()),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&k| self.labels[k]).collect(),
            is_hard: indices.iter().map(|&k| self.is_hard[k]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Class centers and, per class, the index of the closest other center.
pub fn class_centers(spec: &SyntheticSpec, rng: &mut Rng) -> (Matrix, Vec<usize>) {
    let rows: Vec<_> = (0..spec.num_classes)
        .map(|_| random_unit_vector(spec.input_dim, rng))
        .collect();
    let centers = Matrix::from_rows(&rows).expect("equal rows");
    let confusers = (0..spec.num_classes)
        .map(|i| {
            let mut best = usize::MAX;
            let mut best_cos = f64::NEG_INFINITY;
            for j in 0..spec.num_classes {
                if j == i {
                    continue;
                }
                let c = dot(centers.row(i), centers.row(j));
                if c > best_cos {
                    best_cos = c;
                    best = j;
                }
            }
            best
        })
        .collect();
    (centers, confusers)
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let (centers, confusers) = class_centers(spec, &mut rng);
    let hard_count = spec.hard_per_class();
    let total = spec.num_classes * spec.samples_per_class;
    let mut values = Vec::with_capacity(total * spec.input_dim);
    let mut labels = Vec::with_capacity(total);
    let mut is_hard = Vec::with_capacity(total);
    for class in 0..spec.num_classes {
        let own = centers.row(class);
        let other = centers.row(confusers[class]);
        for k in 0..spec.samples_per_class {
            let hard = k >= spec.samples_per_class - hard_count;
            let base: Vec<f64> = if hard {
                own.iter()
                    .zip(other)
                    .map(|(a, b)| (1.0 - spec.hard_pull) * a + spec.hard_pull * b)
                    .collect()
            } else {
                own.to_vec()
            };
            let sample = loop {
                let noisy: Vec<f64> = base
                    .iter()
                    .map(|v| v + spec.noise_sigma * rng.gaussian())
                    .collect();
                if let Ok(u) = l2_normalize(&noisy) {
                    break u;
                }
            };
            values.extend_from_slice(&sample);
            labels.push(class);
            is_hard.push(hard);
        }
    }
    Dataset::new(
        Matrix::from_vec(total, spec.input_dim, values)?,
        labels,
        is_hard,
        spec.num_classes,
    )
}

pub fn dataset_to_string(ds: &Dataset) -> String {
    let mut out = String::new();
    writeln!(out, "{HEADER_MAGIC} {HEADER_VERSION} N={} dim={}", ds.num_classes, ds.dim()).unwrap();
    for k in 0..ds.len() {
        write!(out, "{},{}", ds.labels[k], u8::from(ds.is_hard[k])).unwrap();
        for v in ds.inputs.row(k) {
            write!(out, ",{v:?}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let fmt = |msg: String| Error::Format(msg);
    if !text.ends_with('\n') {
        return Err(fmt("file does not end with a newline (truncated?)".into()));
    }
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| fmt("empty file".into()))?;
    let (num_classes, dim) = parse_header(header)?;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut is_hard = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let lineno = lineno + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(fmt(format!(
                "line {lineno}: expected {} columns, found {}",
                dim + 2,
                fields.len()
            )));
        }
        let label: usize = fields[0]
            .parse()
            .map_err(|_| fmt(format!("line {lineno}: bad label `{}`", fields[0])))?;
        if label >= num_classes {
            return Err(fmt(format!("line {lineno}: label {label} not below N={num_classes}")));
        }
        let hard = match fields[1] {
            "0" => false,
            "1" => true,
            other => return Err(fmt(format!("line {lineno}: bad is_hard flag `{other}`"))),
        };
        for f in &fields[2..] {
            let v: f64 = f
                .parse()
                .map_err(|_| fmt(format!("line {lineno}: bad value `{f}`")))?;
            if !v.is_finite() {
                return Err(fmt(format!("line {lineno}: non-finite value `{f}`")));
            }
            values.push(v);
        }
        labels.push(label);
        is_hard.push(hard);
    }
    let rows = labels.len();
    let ds = Dataset::new(Matrix::from_vec(rows, dim, values)?, labels, is_hard, num_classes)?;
    ds.check_classes_nonempty()
        .map_err(|e| fmt(format!("{e} (file truncated or header N too large)")))?;
    Ok(ds)
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let bad = || Error::Format(format!("malformed header `{line}`"));
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != HEADER_MAGIC || parts[1] != HEADER_VERSION {
        return Err(bad());
    }
    let n = parts[2]
        .strip_prefix("N=")
        .and_then(|v| v.parse::<usize>().ok())
        .ok_or_else(bad)?;
    let d = parts[3]
        .strip_prefix("dim=")
        .and_then(|v| v.parse::<usize>().ok())
        .ok_or_else(bad)?;
    if n == 0 || d == 0 {
        return Err(bad());
    }
    Ok((n, d))
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, dataset_to_string(ds)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

/// Stratified split. Each class contributes `floor(test_fraction · n_c)`
/// samples to the test side; both sides keep ascending original order.
pub fn split(ds: &Dataset, test_fraction: f64, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidSpec(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (class, mut members) in ds.class_indices().into_iter().enumerate() {
        let n = members.len();
        let n_test = (test_fraction * n as f64).floor() as usize;
        if n_test == 0 || n_test == n {
            return Err(Error::InvalidSpec(format!(
                "class {class} with {n} samples would leave an empty side at test_fraction {test_fraction}"
            )));
        }
        rng.shuffle(&mut members);
        test_idx.extend_from_slice(&members[..n_test]);
        train_idx.extend_from_slice(&members[n_test..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((ds.subset(&train_idx), ds.subset(&test_idx)))
}

/// Index pairs into a dataset: same-identity and different-identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerificationPairs {
    pub genuine: Vec<(usize, usize)>,
    pub impostor: Vec<(usize, usize)>,
}

/// `pairs_per_kind` genuine and impostor pairs. The first member is uniform
/// over samples, the second uniform over the admissible partners.
pub fn make_verification_pairs(ds: &Dataset, pairs_per_kind: usize, rng: &mut Rng) -> Result<VerificationPairs> {
    let classes = ds.class_indices();
    if classes.iter().filter(|c| !c.is_empty()).count() < 2 {
        return Err(Error::InvalidSpec("impostor pairs need at least two classes".into()));
    }
    if let Some(i) = classes.iter().position(|c| c.len() == 1) {
        return Err(Error::InvalidSpec(format!("class {i} has a single sample; genuine pairs need two")));
    }
    let m = ds.len();
    let mut genuine = Vec::with_capacity(pairs_per_kind);
    while genuine.len() < pairs_per_kind {
        let a = rng.below(m);
        let members = &classes[ds.labels[a]];
        // uniform over the other members of a's class
        let mut pick = rng.below(members.len() - 1);
        if members[pick] >= a {
            pick += 1;
        }
        genuine.push((a, members[pick]));
    }
    let mut impostor = Vec::with_capacity(pairs_per_kind);
    while impostor.len() < pairs_per_kind {
        let a = rng.below(m);
        let b = rng.below(m);
        if ds.labels[a] != ds.labels[b] {
            impostor.push((a, b));
        }
    }
    Ok(VerificationPairs { genuine, impostor })
}
