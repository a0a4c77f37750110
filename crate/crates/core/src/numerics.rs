//! Dense row-major matrices plus the few linear-algebra primitives the rest of
//! the crate needs: column standardization, a two-component PCA and a
//! numerically stable row softmax.

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

/// Columns whose standard deviation falls below this are centered but not scaled.
pub const MIN_STD: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("empty input matrix")]
    EmptyInput,
    #[error("insufficient data: need at least {min_rows} rows and {min_cols} columns, got {rows}x{cols}")]
    InsufficientData {
        min_rows: usize,
        min_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
}

/// A dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
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

    /// A matrix with no rows but a fixed width.
    pub fn empty(cols: usize) -> Self {
        Self::zeros(0, cols)
    }

    /// Wraps a row-major buffer, rejecting wrong lengths and non-finite values.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::Shape(format!(
                "buffer of length {} cannot be viewed as {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(NumericsError::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    /// Stacks matrices of equal width on top of each other.
    pub fn vstack(parts: &[Matrix]) -> Result<Self, NumericsError> {
        let Some(first) = parts.first() else {
            return Err(NumericsError::EmptyInput);
        };
        let cols = first.cols;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        for p in parts {
            if p.cols != cols {
                return Err(NumericsError::Shape(format!(
                    "cannot stack width {} onto width {cols}",
                    p.cols
                )));
            }
            data.extend_from_slice(&p.data);
        }
        let rows = data.len() / cols.max(1);
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Copies the listed rows, in the given order, into a new matrix.
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

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self · rhs`. Panics when the inner dimensions disagree.
    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            vec_mat_into(self.row(i), rhs, out.row_mut(i));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `out = x · m` for a row vector `x`. `out` is overwritten.
#[inline]
pub fn vec_mat_into(x: &[f64], m: &Matrix, out: &mut [f64]) {
    debug_assert_eq!(x.len(), m.rows);
    debug_assert_eq!(out.len(), m.cols);
    out.fill(0.0);
    for (k, &xk) in x.iter().enumerate() {
        if xk == 0.0 {
            continue;
        }
        for (o, &w) in out.iter_mut().zip(m.row(k)) {
            *o += xk * w;
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-column affine map learned from a training matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Population standard deviation, or 1.0 for (near) constant columns.
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(train: &Matrix) -> Result<Self, NumericsError> {
        if train.rows() == 0 || train.cols() == 0 {
            return Err(NumericsError::EmptyInput);
        }
        let n = train.rows() as f64;
        let d = train.cols();
        let mut mean = vec![0.0; d];
        for row in train.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in train.iter_rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                let c = v - m;
                *s += c * c;
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let std = (s / n).sqrt();
                if std < MIN_STD {
                    1.0
                } else {
                    std
                }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn apply_row(&self, row: &[f64], out: &mut [f64]) {
        for (((o, v), m), s) in out.iter_mut().zip(row).zip(&self.mean).zip(&self.scale) {
            *o = (v - m) / s;
        }
    }

    pub fn apply(&self, m: &Matrix) -> Result<Matrix, NumericsError> {
        if m.cols() != self.mean.len() {
            return Err(NumericsError::Shape(format!(
                "standardizer fitted on {} columns, got {}",
                self.mean.len(),
                m.cols()
            )));
        }
        let mut out = Matrix::zeros(m.rows(), m.cols());
        for i in 0..m.rows() {
            self.apply_row(m.row(i), out.row_mut(i));
        }
        Ok(out)
    }
}

/// Fits column statistics on `train` and applies them to `train` and to every
/// matrix in `others`.
pub fn standardize_fit_apply(
    train: &Matrix,
    others: &[Matrix],
) -> Result<(Matrix, Vec<Matrix>, Standardizer), NumericsError> {
    let stats = Standardizer::fit(train)?;
    let train_out = stats.apply(train)?;
    let others_out = others
        .iter()
        .map(|m| stats.apply(m))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((train_out, others_out, stats))
}

/// Top-two principal axes of a point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// 2 x D, unit rows.
    pub components: Matrix,
    /// Variance along each component, nonincreasing.
    pub explained_variance: [f64; 2],
}

impl PcaModel {
    pub fn project(&self, data: &Matrix) -> Result<Matrix, NumericsError> {
        if data.cols() != self.mean.len() {
            return Err(NumericsError::Shape(format!(
                "PCA fitted on {} columns, got {}",
                self.mean.len(),
                data.cols()
            )));
        }
        let mut out = Matrix::zeros(data.rows(), 2);
        let mut centered = vec![0.0; data.cols()];
        for i in 0..data.rows() {
            for ((c, v), m) in centered.iter_mut().zip(data.row(i)).zip(&self.mean) {
                *c = v - m;
            }
            for k in 0..2 {
                out.set(i, k, dot(&centered, self.components.row(k)));
            }
        }
        Ok(out)
    }
}

/// Sample covariance (denominator N-1) and column means.
pub fn covariance(data: &Matrix) -> (Vec<f64>, Matrix) {
    let n = data.rows();
    let d = data.cols();
    let mut mean = vec![0.0; d];
    for row in data.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = Matrix::zeros(d, d);
    let mut c = vec![0.0; d];
    for row in data.iter_rows() {
        for ((ci, v), m) in c.iter_mut().zip(row).zip(&mean) {
            *ci = v - m;
        }
        for a in 0..d {
            let ca = c[a];
            for b in a..d {
                cov.data[a * d + b] += ca * c[b];
            }
        }
    }
    let denom = (n as f64 - 1.0).max(1.0);
    for a in 0..d {
        for b in a..d {
            let v = cov.data[a * d + b] / denom;
            cov.data[a * d + b] = v;
            cov.data[b * d + a] = v;
        }
    }
    (mean, cov)
}

/// Flips `v` so that its entry of largest magnitude (first one on ties) is nonnegative.
pub fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Fits a two-component PCA on `data` and returns the model with the projected
/// coordinates.
pub fn pca_fit_project(data: &Matrix) -> Result<(PcaModel, Matrix), NumericsError> {
    if data.rows() < 2 || data.cols() < 2 {
        return Err(NumericsError::InsufficientData {
            min_rows: 2,
            min_cols: 2,
            rows: data.rows(),
            cols: data.cols(),
        });
    }
    let d = data.cols();
    let (mean, cov) = covariance(data);
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, cov.as_slice()));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut components = Matrix::zeros(2, d);
    let mut explained_variance = [0.0; 2];
    for (k, &idx) in order.iter().take(2).enumerate() {
        let row = components.row_mut(k);
        for (j, r) in row.iter_mut().enumerate() {
            *r = eig.eigenvectors[(j, idx)];
        }
        let norm = dot(row, row).sqrt();
        row.iter_mut().for_each(|r| *r /= norm);
        canonical_sign(row);
        explained_variance[k] = eig.eigenvalues[idx].max(0.0);
    }
    let model = PcaModel {
        mean,
        components,
        explained_variance,
    };
    let coords = model.project(data)?;
    Ok((model, coords))
}

/// In-place softmax with max subtraction.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-3.0..3.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// Cyclic Jacobi eigensolver, used only as an independent oracle.
    fn jacobi_eigen(a: &Matrix) -> (Vec<f64>, Matrix) {
        let n = a.rows();
        let mut m = a.clone();
        let mut v = Matrix::zeros(n, n);
        for i in 0..n {
            v.set(i, i, 1.0);
        }
        for _sweep in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in p + 1..n {
                    off += m.get(p, q).powi(2);
                }
            }
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = m.get(p, q);
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let mkp = m.get(k, p);
                        let mkq = m.get(k, q);
                        m.set(k, p, c * mkp - s * mkq);
                        m.set(k, q, s * mkp + c * mkq);
                    }
                    for k in 0..n {
                        let mpk = m.get(p, k);
                        let mqk = m.get(q, k);
                        m.set(p, k, c * mpk - s * mqk);
                        m.set(q, k, s * mpk + c * mqk);
                    }
                    for k in 0..n {
                        let vkp = v.get(k, p);
                        let vkq = v.get(k, q);
                        v.set(k, p, c * vkp - s * vkq);
                        v.set(k, q, s * vkp + c * vkq);
                    }
                }
            }
        }
        ((0..n).map(|i| m.get(i, i)).collect(), v)
    }

    #[test]
    fn standardize_two_points() {
        let train = Matrix::from_rows(&[[1.0], [3.0]]).unwrap();
        let other = Matrix::from_rows(&[[2.0]]).unwrap();
        let (t, o, stats) = standardize_fit_apply(&train, &[other]).unwrap();
        assert_eq!(t.as_slice(), &[-1.0, 1.0]);
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.scale, vec![1.0]);
        assert_eq!(o[0].as_slice(), &[0.0]);
    }

    #[test]
    fn standardize_constant_column() {
        let train = Matrix::from_rows(&[[5.0], [5.0]]).unwrap();
        let (t, _, stats) = standardize_fit_apply(&train, &[]).unwrap();
        assert_eq!(t.as_slice(), &[0.0, 0.0]);
        assert_eq!(stats.scale, vec![1.0]);
    }

    #[test]
    fn standardize_empty() {
        assert_eq!(
            standardize_fit_apply(&Matrix::empty(3), &[]).unwrap_err(),
            NumericsError::EmptyInput
        );
    }

    #[test]
    fn from_vec_rejects_nan() {
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![0.0, f64::NAN]),
            Err(NumericsError::NonFinite { row: 0, col: 1 })
        ));
    }

    #[test]
    fn pca_collinear() {
        let data = Matrix::from_rows(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [-3.0, -3.0]]).unwrap();
        let (model, coords) = pca_fit_project(&data).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert!((model.components.get(0, 0) - h).abs() < 1e-12);
        assert!((model.components.get(0, 1) - h).abs() < 1e-12);
        assert!(model.explained_variance[1].abs() < 1e-12);
        for i in 0..4 {
            assert!(coords.get(i, 1).abs() < 1e-12);
        }
    }

    #[test]
    fn pca_identity_covariance() {
        // Centered, symmetric, sample covariance exactly I.
        let a = (1.5f64).sqrt();
        let data = Matrix::from_rows(&[[a, 0.0], [-a, 0.0], [0.0, a], [0.0, -a]]).unwrap();
        let (model, _) = pca_fit_project(&data).unwrap();
        assert!((model.explained_variance[0] - 1.0).abs() < 1e-8);
        assert!((model.explained_variance[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn pca_insufficient() {
        let data = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        assert!(matches!(
            pca_fit_project(&data),
            Err(NumericsError::InsufficientData { .. })
        ));
        let data = Matrix::from_rows(&[[1.0], [2.0]]).unwrap();
        assert!(pca_fit_project(&data).is_err());
    }

    #[test]
    fn pca_matches_jacobi_oracle() {
        let data = random_matrix(20, 5, 11);
        let (model, coords) = pca_fit_project(&data).unwrap();
        let (_, cov) = covariance(&data);
        let (vals, vecs) = jacobi_eigen(&cov);
        let mut order: Vec<usize> = (0..5).collect();
        order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
        for k in 0..2 {
            let mut col: Vec<f64> = (0..5).map(|j| vecs.get(j, order[k])).collect();
            canonical_sign(&mut col);
            for j in 0..5 {
                assert!((col[j] - model.components.get(k, j)).abs() < 1e-8);
            }
            assert!((vals[order[k]] - model.explained_variance[k]).abs() < 1e-8);
        }
        // Projected columns are centered.
        for k in 0..2 {
            let s: f64 = (0..20).map(|i| coords.get(i, k)).sum();
            assert!(s.abs() / 20.0 < 1e-10);
        }
    }

    #[test]
    fn softmax_cases() {
        let m = Matrix::from_rows(&[[0.0, 0.0], [1000.0, 0.0]]).unwrap();
        let s = softmax_rows(&m);
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert_eq!(s.get(1, 0), 1.0);
        assert!(s.get(1, 1) >= 0.0 && s.get(1, 1) < 1e-300);
    }

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in prop::collection::vec(-50.0f64..50.0, 1..8), shift in -100.0f64..100.0) {
            let m = Matrix::from_rows(&[row.clone()]).unwrap();
            let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
            let a = softmax_rows(&m);
            let b = softmax_rows(&Matrix::from_rows(&[shifted]).unwrap());
            let sum: f64 = a.row(0).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for (x, y) in a.row(0).iter().zip(b.row(0)) {
                prop_assert!(*x > 0.0 && *x <= 1.0);
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn standardize_is_idempotent(seed in 0u64..1000) {
            let m = random_matrix(12, 4, seed);
            let (once, _, _) = standardize_fit_apply(&m, &[]).unwrap();
            let (twice, _, _) = standardize_fit_apply(&once, &[]).unwrap();
            for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn pca_projection_properties(seed in 0u64..1000) {
            let m = random_matrix(15, 4, seed);
            let (model, coords) = pca_fit_project(&m).unwrap();
            prop_assert!(model.explained_variance[0] >= model.explained_variance[1]);
            let c = &model.components;
            prop_assert!((dot(c.row(0), c.row(1))).abs() < 1e-8);
            prop_assert!((dot(c.row(0), c.row(0)) - 1.0).abs() < 1e-8);
            let (_, cov) = covariance(&m);
            let total: f64 = (0..4).map(|i| cov.get(i, i)).sum();
            let (_, pcov) = covariance(&coords);
            prop_assert!(pcov.get(0, 0) + pcov.get(1, 1) <= total + 1e-9);
            for k in 0..2 {
                let s: f64 = (0..15).map(|i| coords.get(i, k)).sum();
                prop_assert!(s.abs() / 15.0 < 1e-10);
            }
        }
    }
}
