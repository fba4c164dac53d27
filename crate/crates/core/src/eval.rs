//! Embedding evaluation: verification TAR@FAR, rank-1 identification, and
//! diagnostics on negative similarities and prototype/centroid alignment.
//!
//! Ties always resolve to the lowest index.

use serde::{Deserialize, Serialize};

use crate::data::{make_verification_pairs, Dataset, VerificationPairs};
use crate::encoder::MlpEncoder;
use crate::error::{Error, Result};
use crate::linalg::{cosine_similarity, dot, l2_normalize, Matrix};
use crate::rng::Rng;

/// Unit-norm embeddings with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub is_hard: Vec<bool>,
    pub num_classes: usize,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> EmbeddingSet {
        EmbeddingSet {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&k| self.labels[k]).collect(),
            is_hard: indices.iter().map(|&k| self.is_hard[k]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Encode and L2-normalize every sample. Has no effect on the encoder.
pub fn embed(encoder: &MlpEncoder, ds: &Dataset) -> Result<EmbeddingSet> {
    let raw = encoder.encode(&ds.inputs)?;
    Ok(EmbeddingSet {
        features: raw.normalized_rows()?,
        labels: ds.labels.clone(),
        is_hard: ds.is_hard.clone(),
        num_classes: ds.num_classes(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TarAtFar {
    pub far: f64,
    pub tar: f64,
    pub threshold: f64,
}

/// True accept rate at a false accept rate.
///
/// The threshold is the smallest impostor score `t` with
/// `#{impostor ≥ t} ≤ floor(far·n)`. With impostors sorted descending and
/// `k = floor(far·n)`, that is the smallest impostor score strictly above
/// the `k`-th (0-based) one; if no impostor score qualifies, the next float
/// above the `k`-th is used. Scores at or above the threshold are accepted.
pub fn tar_at_far(genuine: &[f64], impostor: &[f64], far: f64) -> Result<TarAtFar> {
    if genuine.is_empty() {
        return Err(Error::EmptyInput("genuine scores"));
    }
    if impostor.is_empty() {
        return Err(Error::EmptyInput("impostor scores"));
    }
    if !(far > 0.0 && far < 1.0) {
        return Err(Error::InvalidSpec(format!("far must lie in (0, 1), got {far}")));
    }
    let mut sorted = impostor.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = (far * sorted.len() as f64).floor() as usize;
    let pivot = sorted[k];
    let threshold = sorted[..k]
        .iter()
        .rev()
        .copied()
        .find(|&s| s > pivot)
        .unwrap_or_else(|| next_up(pivot));
    let accepted = genuine.iter().filter(|&&g| g >= threshold).count();
    Ok(TarAtFar {
        far,
        tar: accepted as f64 / genuine.len() as f64,
        threshold,
    })
}

fn next_up(v: f64) -> f64 {
    if v.is_nan() || v == f64::INFINITY {
        return v;
    }
    if v == 0.0 {
        return f64::from_bits(1);
    }
    let bits = v.to_bits();
    f64::from_bits(if v > 0.0 { bits + 1 } else { bits - 1 })
}

/// Cosine scores for genuine and impostor pairs.
pub fn pair_scores(set: &EmbeddingSet, pairs: &VerificationPairs) -> (Vec<f64>, Vec<f64>) {
    let score = |&(a, b): &(usize, usize)| dot(set.features.row(a), set.features.row(b));
    (
        pairs.genuine.iter().map(score).collect(),
        pairs.impostor.iter().map(score).collect(),
    )
}

/// Fraction of probes whose most similar gallery row carries the same label.
pub fn rank1_identification(probe: &EmbeddingSet, gallery: &EmbeddingSet) -> Result<f64> {
    if probe.is_empty() {
        return Err(Error::EmptyInput("probe set"));
    }
    if gallery.is_empty() {
        return Err(Error::EmptyInput("gallery set"));
    }
    let mut hits = 0usize;
    for (k, p) in probe.features.row_iter().enumerate() {
        let mut best = 0;
        let mut best_s = f64::NEG_INFINITY;
        for (g, row) in gallery.features.row_iter().enumerate() {
            let s = cosine_similarity(p, row)?;
            if s > best_s {
                best_s = s;
                best = g;
            }
        }
        if gallery.labels[best] == probe.labels[k] {
            hits += 1;
        }
    }
    Ok(hits as f64 / probe.len() as f64)
}

/// The first sample of each class forms the gallery; the rest are probes.
pub fn gallery_probe_split(set: &EmbeddingSet) -> (EmbeddingSet, EmbeddingSet) {
    let mut seen = vec![false; set.num_classes];
    let mut gallery = Vec::new();
    let mut probe = Vec::new();
    for (k, &l) in set.labels.iter().enumerate() {
        if seen[l] {
            probe.push(k);
        } else {
            seen[l] = true;
            gallery.push(k);
        }
    }
    (set.subset(&gallery), set.subset(&probe))
}

pub const HISTOGRAM_BIN_WIDTH: f64 = 0.01;

/// Fixed-width histogram over `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bin_width: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Self {
        let bins = (2.0 / HISTOGRAM_BIN_WIDTH).round() as usize;
        let mut counts = vec![0; bins];
        for v in values {
            let b = ((v + 1.0) / HISTOGRAM_BIN_WIDTH).floor();
            let b = (b.max(0.0) as usize).min(bins - 1);
            counts[b] += 1;
        }
        Self {
            bin_width: HISTOGRAM_BIN_WIDTH,
            counts,
        }
    }

    pub fn bin_range(&self, b: usize) -> (f64, f64) {
        let lo = -1.0 + b as f64 * self.bin_width;
        (lo, lo + self.bin_width)
    }

    /// Center of the fullest bin.
    pub fn peak(&self) -> f64 {
        let mut best = 0;
        for (b, &c) in self.counts.iter().enumerate() {
            if c > self.counts[best] {
                best = b;
            }
        }
        let (lo, hi) = self.bin_range(best);
        0.5 * (lo + hi)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (b, c) in self.counts.iter().enumerate() {
            let (lo, hi) = self.bin_range(b);
            out.push_str(&format!("{lo:.2},{hi:.2},{c}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSimilarities {
    /// `M × k`, each row descending.
    pub top: Matrix,
    pub histogram: Histogram,
}

impl NegativeSimilarities {
    pub fn mean(&self) -> f64 {
        let v = self.top.as_slice();
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn peak(&self) -> f64 {
        self.histogram.peak()
    }
}

/// Per sample, the `k` largest cosines to prototypes of other classes.
pub fn top_k_negative_similarities(set: &EmbeddingSet, prototypes: &Matrix, k: usize) -> Result<NegativeSimilarities> {
    let n = prototypes.rows();
    if k == 0 || k + 1 > n {
        return Err(Error::InvalidSpec(format!("k must lie in 1..={} for {n} prototypes, got {k}", n.saturating_sub(1))));
    }
    if set.features.cols() != prototypes.cols() {
        return Err(Error::DimensionMismatch {
            expected: prototypes.cols(),
            actual: set.features.cols(),
        });
    }
    let mut top = Matrix::zeros(set.len(), k);
    for (m, x) in set.features.row_iter().enumerate() {
        let mut negs = Vec::with_capacity(n - 1);
        for (j, p) in prototypes.row_iter().enumerate() {
            if j != set.labels[m] {
                negs.push(cosine_similarity(x, p)?);
            }
        }
        negs.sort_by(|a, b| b.total_cmp(a));
        top.row_mut(m).copy_from_slice(&negs[..k]);
    }
    let histogram = Histogram::from_values(top.as_slice().iter().copied());
    Ok(NegativeSimilarities { top, histogram })
}

/// Per class, the cosine between the prototype row and the normalized mean
/// of that class's embeddings (normal samples only if requested).
pub fn centroid_alignment(set: &EmbeddingSet, prototypes: &Matrix, use_normal_only: bool) -> Result<Vec<f64>> {
    let n = prototypes.rows();
    let d = prototypes.cols();
    if set.features.cols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: set.features.cols(),
        });
    }
    let mut sums = Matrix::zeros(n, d);
    let mut counts = vec![0usize; n];
    for (m, x) in set.features.row_iter().enumerate() {
        if use_normal_only && set.is_hard[m] {
            continue;
        }
        let l = set.labels[m];
        if l >= n {
            return Err(Error::IndexOutOfRange { index: l, len: n });
        }
        sums.row_mut(l).iter_mut().zip(x).for_each(|(s, v)| *s += v);
        counts[l] += 1;
    }
    (0..n)
        .map(|i| {
            if counts[i] == 0 {
                return Err(Error::EmptyClass(i));
            }
            let centroid = l2_normalize(sums.row(i))?;
            cosine_similarity(prototypes.row(i), &centroid)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// FAR operating points to report.
    pub fars: Vec<f64>,
    pub pairs_per_kind: usize,
    /// Seed for pair sampling; pairs are identical across epochs and runs.
    pub pair_seed: u64,
    /// `k` of the top-k negative similarity analysis.
    pub top_k: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            fars: vec![1e-2, 1e-3],
            pairs_per_kind: 20_000,
            pair_seed: 7,
            top_k: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tar_at_far: Vec<TarAtFar>,
    pub rank1: f64,
    /// Mean of the top-k negative similarities to the learnable prototypes.
    pub mean_top_negative: f64,
}

impl EvalReport {
    pub fn tar_at(&self, far: f64) -> Option<f64> {
        self.tar_at_far.iter().find(|t| t.far == far).map(|t| t.tar)
    }
}

/// Verification, identification and negative-similarity summary of an
/// encoder on a dataset.
pub fn evaluate(encoder: &MlpEncoder, prototypes: &Matrix, ds: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    let set = embed(encoder, ds)?;
    let pairs = make_verification_pairs(ds, opts.pairs_per_kind, &mut Rng::new(opts.pair_seed))?;
    let (genuine, impostor) = pair_scores(&set, &pairs);
    let tar_at_far = opts
        .fars
        .iter()
        .map(|&far| tar_at_far(&genuine, &impostor, far))
        .collect::<Result<Vec<_>>>()?;
    let (gallery, probe) = gallery_probe_split(&set);
    let rank1 = rank1_identification(&probe, &gallery)?;
    let k = opts.top_k.min(prototypes.rows() - 1);
    let negs = top_k_negative_similarities(&set, prototypes, k)?;
    Ok(EvalReport {
        tar_at_far,
        rank1,
        mean_top_negative: negs.mean(),
    })
}

/// Negative-similarity distribution and per-class alignment of the
/// learnable and empirical prototypes with the class centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    /// Top-k negatives against the learnable prototypes.
    pub negatives: NegativeSimilarities,
    pub w_normal: Vec<f64>,
    pub bank_normal: Vec<f64>,
    pub w_all: Vec<f64>,
    pub bank_all: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl Analysis {
    /// `class,w_normal,bank_normal,w_all,bank_all`
    pub fn alignment_csv(&self) -> String {
        let mut out = String::from("class,w_normal,bank_normal,w_all,bank_all\n");
        for i in 0..self.w_normal.len() {
            out.push_str(&format!(
                "{i},{},{},{},{}\n",
                self.w_normal[i], self.bank_normal[i], self.w_all[i], self.bank_all[i]
            ));
        }
        out
    }

    pub fn summary(&self) -> AnalysisSummary {
        AnalysisSummary {
            top_k: self.negatives.top.cols(),
            negative_mean: self.negatives.mean(),
            negative_peak: self.negatives.peak(),
            w_normal_mean: mean(&self.w_normal),
            bank_normal_mean: mean(&self.bank_normal),
            w_all_mean: mean(&self.w_all),
            bank_all_mean: mean(&self.bank_all),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub top_k: usize,
    pub negative_mean: f64,
    pub negative_peak: f64,
    pub w_normal_mean: f64,
    pub bank_normal_mean: f64,
    pub w_all_mean: f64,
    pub bank_all_mean: f64,
}

pub fn analyze(encoder: &MlpEncoder, prototypes: &Matrix, bank: &Matrix, ds: &Dataset, top_k: usize) -> Result<Analysis> {
    let set = embed(encoder, ds)?;
    Ok(Analysis {
        negatives: top_k_negative_similarities(&set, prototypes, top_k)?,
        w_normal: centroid_alignment(&set, prototypes, true)?,
        bank_normal: centroid_alignment(&set, bank, true)?,
        w_all: centroid_alignment(&set, prototypes, false)?,
        bank_all: centroid_alignment(&set, bank, false)?,
    })
}
