use super::ClassifierError;

/// Row = true class, column = predicted class, over `n_classes` classes.
pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; n_classes]; n_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        m[t][p] += 1;
    }
    m
}

/// Unweighted mean of per-class recall over the classes present in `y_true`.
pub fn balanced_accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64, ClassifierError> {
    if y_true.len() != y_pred.len() {
        return Err(ClassifierError::ShapeError(format!(
            "{} true labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(ClassifierError::ShapeError("no labels to score".into()));
    }
    let c = y_true.iter().max().unwrap() + 1;
    let mut support = vec![0usize; c];
    let mut hits = vec![0usize; c];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        support[t] += 1;
        if t == p {
            hits[t] += 1;
        }
    }
    let (sum, present) = support
        .iter()
        .zip(&hits)
        .filter(|(s, _)| **s > 0)
        .fold((0.0, 0usize), |(acc, n), (s, h)| (acc + *h as f64 / *s as f64, n + 1));
    Ok(sum / present as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect() {
        assert_eq!(balanced_accuracy(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap(), 1.0);
    }

    #[test]
    fn mean_of_recalls() {
        // class 0: 2/2, class 1: 1/2
        assert_eq!(balanced_accuracy(&[0, 0, 1, 1], &[0, 0, 1, 0]).unwrap(), 0.75);
    }

    #[test]
    fn absent_predicted_class_does_not_count() {
        assert_eq!(balanced_accuracy(&[0, 0], &[1, 0]).unwrap(), 0.5);
    }

    #[test]
    fn shape_errors() {
        assert!(matches!(balanced_accuracy(&[0], &[0, 1]), Err(ClassifierError::ShapeError(_))));
        assert!(balanced_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn confusion_counts() {
        let m = confusion_matrix(&[0, 1, 1], &[0, 0, 1], 2);
        assert_eq!(m, vec![vec![1, 0], vec![1, 1]]);
    }
}
