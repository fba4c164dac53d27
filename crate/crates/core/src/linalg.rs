//! Dense vectors and row-major matrices, normalization and cosine similarity.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Norms at or below this are treated as zero.
pub const DEFAULT_EPS_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for FeatureVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for FeatureVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for FeatureVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::InvalidShape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Build from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a zero-column matrix has no meaningful rows anyway
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// New matrix holding the given rows, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) {
        debug_assert_eq!(self.shape(), other.shape());
        axpy(scale, &other.data, &mut self.data);
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy with every row scaled to unit norm.
    pub fn normalized_rows(&self) -> Result<Matrix> {
        let mut out = self.clone();
        for i in 0..self.rows {
            normalize_in_place(out.row_mut(i))?;
        }
        Ok(out)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `y += a * x`
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn check_norm(v: &[f64], eps: f64) -> Result<f64> {
    let n = norm(v);
    // NaN norms fail the comparison and are rejected too
    if !(n > eps) {
        return Err(Error::ZeroVector { norm: n });
    }
    Ok(n)
}

pub(crate) fn normalize_in_place(v: &mut [f64]) -> Result<f64> {
    let n = check_norm(v, DEFAULT_EPS_NORM)?;
    v.iter_mut().for_each(|x| *x /= n);
    Ok(n)
}

pub fn l2_normalize(v: &[f64]) -> Result<FeatureVector> {
    l2_normalize_eps(v, DEFAULT_EPS_NORM)
}

pub fn l2_normalize_eps(v: &[f64], eps: f64) -> Result<FeatureVector> {
    let n = check_norm(v, eps)?;
    Ok(FeatureVector(v.iter().map(|x| x / n).collect()))
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let na = check_norm(a, DEFAULT_EPS_NORM)?;
    let nb = check_norm(b, DEFAULT_EPS_NORM)?;
    // na * nb is commutative, so the result is exactly symmetric
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `B×N` cosine similarities between feature rows and prototype rows.
pub fn similarity_matrix(features: &Matrix, prototypes: &Matrix) -> Result<Matrix> {
    if features.cols() != prototypes.cols() {
        return Err(Error::DimensionMismatch {
            expected: prototypes.cols(),
            actual: features.cols(),
        });
    }
    let mut out = Matrix::zeros(features.rows(), prototypes.rows());
    for (k, f) in features.row_iter().enumerate() {
        for (j, p) in prototypes.row_iter().enumerate() {
            out[(k, j)] = cosine_similarity(f, p)?;
        }
    }
    Ok(out)
}

/// Uniform direction on the unit sphere in `dim` dimensions.
pub fn random_unit_vector(dim: usize, rng: &mut Rng) -> FeatureVector {
    assert!(dim >= 1, "dimension must be positive");
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gaussian()).collect();
        if let Ok(u) = l2_normalize(&v) {
            return u;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gaussian()).collect()).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert_eq!(l2_normalize(&[1.0, 0.0, 0.0]).unwrap().0, vec![1.0, 0.0, 0.0]);
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::ZeroVector { .. })));
        assert!(matches!(
            l2_normalize_eps(&[1e-6, 0.0], 1e-3),
            Err(Error::ZeroVector { .. })
        ));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[2.0, 0.0], &[5.0, 0.0]).unwrap(), 1.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cosine_is_clamped() {
        let a = [0.1, 0.2, 0.3];
        let c = cosine_similarity(&a, &a).unwrap();
        assert!(c <= 1.0);
    }

    #[test]
    fn similarity_matrix_examples() {
        let eye = Matrix::identity(4);
        assert_eq!(similarity_matrix(&eye, &eye).unwrap(), eye);
        let one = Matrix::from_rows(&[[0.3, -0.2, 0.9]]).unwrap();
        assert!((similarity_matrix(&one, &one).unwrap()[(0, 0)] - 1.0).abs() < 1e-15);

        let mut rng = Rng::new(11);
        let f = random_matrix(4, 8, &mut rng);
        let p = random_matrix(3, 8, &mut rng);
        let s = similarity_matrix(&f, &p).unwrap();
        for k in 0..4 {
            for j in 0..3 {
                assert_eq!(s[(k, j)], cosine_similarity(f.row(k), p.row(j)).unwrap());
            }
        }
        assert!(similarity_matrix(&f, &Matrix::zeros(2, 7)).is_err());
    }

    #[test]
    fn similarity_matrix_matches_nested_loop_oracle() {
        let mut rng = Rng::new(5);
        let f = random_matrix(16, 32, &mut rng);
        let p = random_matrix(16, 32, &mut rng);
        let s = similarity_matrix(&f, &p).unwrap();
        for k in 0..16 {
            for j in 0..16 {
                let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
                for t in 0..32 {
                    ab += f[(k, t)] * p[(j, t)];
                    aa += f[(k, t)] * f[(k, t)];
                    bb += p[(j, t)] * p[(j, t)];
                }
                assert!((s[(k, j)] - ab / (aa.sqrt() * bb.sqrt())).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn random_unit_vector_examples() {
        let mut rng = Rng::new(1);
        for _ in 0..20 {
            let v = random_unit_vector(1, &mut rng);
            assert!(v[0] == 1.0 || v[0] == -1.0);
        }
        let a = random_unit_vector(16, &mut Rng::new(99));
        let b = random_unit_vector(16, &mut Rng::new(99));
        assert_eq!(a, b);
    }

    #[test]
    fn random_unit_vectors_are_isotropic() {
        // Mean of n uniform unit vectors has norm ~ 1/sqrt(n) = 0.01 here.
        let mut rng = Rng::new(2024);
        let d = 64;
        let n = 10_000;
        let mut mean = vec![0.0; d];
        for _ in 0..n {
            let v = random_unit_vector(d, &mut rng);
            assert!((norm(&v) - 1.0).abs() < 1e-12);
            axpy(1.0 / n as f64, &v, &mut mean);
        }
        assert!(norm(&mean) < 0.05, "mean norm {}", norm(&mean));
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant(
            a in prop::collection::vec(-10.0f64..10.0, 6),
            b in prop::collection::vec(-10.0f64..10.0, 6),
            alpha in 0.01f64..100.0,
            beta in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let ab = cosine_similarity(&a, &b).unwrap();
            prop_assert_eq!(ab, cosine_similarity(&b, &a).unwrap());
            let sa: Vec<f64> = a.iter().map(|x| alpha * x).collect();
            let sb: Vec<f64> = b.iter().map(|x| beta * x).collect();
            prop_assert!((cosine_similarity(&sa, &sb).unwrap() - ab).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn normalize_gives_unit_norm(v in prop::collection::vec(-1e3f64..1e3, 1..20)) {
            prop_assume!(norm(&v) > 1e-6);
            let u = l2_normalize(&v).unwrap();
            prop_assert!((norm(&u) - 1.0).abs() < 1e-9);
            for (x, y) in v.iter().zip(u.iter()) {
                prop_assert!(x * y >= 0.0);
            }
        }
    }
}
