use super::{check_training_set, majority, ClassifierError};
use crate::numerics::{dot, Matrix};

/// `1 - cos(a, b)`; defined as 1 when either vector has zero norm.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot(a, b) / (na * nb)
}

#[derive(Debug, Clone)]
pub struct KnnModel {
    train: Matrix,
    norms: Vec<f64>,
    labels: Vec<usize>,
    pub k: usize,
    pub n_classes: usize,
}

pub fn knn_fit(x: &Matrix, y: &[usize], n_classes: usize, k: usize) -> Result<KnnModel, ClassifierError> {
    check_training_set(x, y, n_classes)?;
    Ok(KnnModel {
        norms: x.iter_rows().map(|r| dot(r, r).sqrt()).collect(),
        train: x.clone(),
        labels: y.to_vec(),
        k: k.max(1),
        n_classes,
    })
}

impl KnnModel {
    pub fn n_features(&self) -> usize {
        self.train.cols()
    }

    fn distance_to(&self, i: usize, q: &[f64], q_norm: f64) -> f64 {
        let n = self.norms[i];
        if n == 0.0 || q_norm == 0.0 {
            1.0
        } else {
            1.0 - dot(self.train.row(i), q) / (n * q_norm)
        }
    }

    /// Majority label among the `k` nearest rows by cosine distance. Distance
    /// ties go to the lower training index, vote ties to the lower class.
    pub fn predict_row(&self, q: &[f64]) -> usize {
        let q_norm = dot(q, q).sqrt();
        let mut dists: Vec<(f64, usize)> = (0..self.train.rows())
            .map(|i| (self.distance_to(i, q, q_norm), i))
            .collect();
        let k = self.k.min(dists.len());
        let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < dists.len() {
            dists.select_nth_unstable_by(k - 1, by_dist);
        }
        let mut votes = vec![0usize; self.n_classes];
        for &(_, i) in &dists[..k] {
            votes[self.labels[i]] += 1;
        }
        majority(&votes)
    }
}

pub fn knn_predict(
    train_x: &Matrix,
    train_y: &[usize],
    queries: &Matrix,
    k: usize,
) -> Result<Vec<usize>, ClassifierError> {
    let n_classes = train_y.iter().max().map_or(0, |m| m + 1);
    let model = knn_fit(train_x, train_y, n_classes, k)?;
    if queries.cols() != model.n_features() {
        return Err(ClassifierError::ShapeError("query width differs from training width".into()));
    }
    Ok(queries.iter_rows().map(|q| model.predict_row(q)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_training_point() {
        let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let q = Matrix::from_rows(&[[-5.0, 0.1], [3.0, 3.0]]).unwrap();
        assert_eq!(knn_predict(&x, &[1], &q, 5).unwrap(), vec![1, 1]);
    }

    #[test]
    fn exact_match_is_nearest() {
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
        let m = knn_fit(&x, &[0, 1, 2], 3, 1).unwrap();
        assert_eq!(m.predict_row(&[0.0, 2.0]), 1);
        assert_eq!(m.predict_row(&[3.0, 3.0]), 2);
    }

    #[test]
    fn zero_norm_rows() {
        assert_eq!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), 1.0);
        assert!(cosine_distance(&[1.0, 0.0], &[2.0, 0.0]).abs() < 1e-15);
    }

    #[test]
    fn empty_train() {
        assert_eq!(
            knn_predict(&Matrix::empty(2), &[], &Matrix::zeros(1, 2), 5).unwrap_err(),
            ClassifierError::EmptyTrain
        );
    }

    #[test]
    fn vote_tie_goes_to_lower_class() {
        // Two of each class among the 4 nearest.
        let x = Matrix::from_rows(&[[1.0, 0.1], [1.0, -0.1], [1.0, 0.2], [1.0, -0.2]]).unwrap();
        let m = knn_fit(&x, &[1, 0, 1, 0], 2, 4).unwrap();
        assert_eq!(m.predict_row(&[1.0, 0.0]), 0);
    }

    #[test]
    fn scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..60).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Matrix::from_vec(20, 3, data.clone()).unwrap();
        let scaled = Matrix::from_vec(20, 3, data.iter().map(|v| v * 7.5).collect()).unwrap();
        let y: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let q = Matrix::from_vec(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        assert_eq!(knn_predict(&x, &y, &q, 5).unwrap(), knn_predict(&scaled, &y, &q, 5).unwrap());
    }
}
