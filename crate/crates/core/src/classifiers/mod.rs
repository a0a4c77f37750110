//! Downstream classifiers with fixed hyper-parameters.
//!
//! Five models with different inductive biases: cosine k-nearest neighbours,
//! L2-regularized multinomial logistic regression, a CART decision tree, a
//! random forest and gradient-boosted trees with a softmax objective. All
//! tie-breaking is specified so results are reproducible across platforms.
//! None of them standardize their inputs; callers decide.

mod gbdt;
mod knn;
mod logreg;
mod metrics;
mod tree;

pub use gbdt::{gbdt_fit, gbdt_fit_traced, softmax_loss, GbdtModel, RegressionTree};
pub use knn::{cosine_distance, knn_fit, knn_predict, KnnModel};
pub use logreg::{logreg_fit, logreg_objective, LogRegModel, LogRegReport};
pub use metrics::{balanced_accuracy, confusion_matrix};
pub use tree::{forest_fit, gini, tree_fit, ForestModel, Node, TreeModel, TreeParams};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifierError {
    #[error("empty training set")]
    EmptyTrain,
    #[error("training labels contain a single class")]
    SingleClassError,
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("invalid hyper-parameters: {0}")]
    InvalidHyperparams(String),
}

/// The five downstream model families, in canonical report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Knn,
    Logreg,
    Tree,
    Forest,
    Gbdt,
}

impl ClassifierKind {
    pub const ALL: [ClassifierKind; 5] = [
        ClassifierKind::Knn,
        ClassifierKind::Logreg,
        ClassifierKind::Tree,
        ClassifierKind::Forest,
        ClassifierKind::Gbdt,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ClassifierKind::Knn => "knn",
            ClassifierKind::Logreg => "logreg",
            ClassifierKind::Tree => "tree",
            ClassifierKind::Forest => "forest",
            ClassifierKind::Gbdt => "gbdt",
        }
    }

    /// Whether raw-feature training benefits from standardization (distance
    /// and gradient based models, as opposed to threshold based ones).
    pub fn scale_sensitive(&self) -> bool {
        matches!(self, ClassifierKind::Knn | ClassifierKind::Logreg)
    }
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassifierKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ClassifierKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown classifier `{s}`"))
    }
}

/// Fixed hyper-parameters shared by every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub knn_k: usize,
    pub logreg_max_iter: usize,
    /// Inverse regularization strength; the penalty on the per-sample mean
    /// loss is `(1 / logreg_l2) / 2 * ||W||^2`.
    pub logreg_l2: f64,
    pub logreg_tol: f64,
    pub tree_max_depth: usize,
    pub tree_min_leaf: usize,
    pub forest_trees: usize,
    pub forest_max_depth: usize,
    pub forest_min_leaf: usize,
    pub gbdt_rounds: usize,
    pub gbdt_lr: f64,
    pub gbdt_depth: usize,
    pub gbdt_lambda: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            knn_k: 5,
            logreg_max_iter: 1000,
            logreg_l2: 1.0,
            logreg_tol: 1e-6,
            tree_max_depth: 3,
            tree_min_leaf: 2,
            forest_trees: 200,
            forest_max_depth: 3,
            forest_min_leaf: 2,
            gbdt_rounds: 200,
            gbdt_lr: 0.3,
            gbdt_depth: 3,
            gbdt_lambda: 1.0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        let counts = [
            ("knn_k", self.knn_k),
            ("logreg_max_iter", self.logreg_max_iter),
            ("tree_min_leaf", self.tree_min_leaf),
            ("forest_trees", self.forest_trees),
            ("forest_min_leaf", self.forest_min_leaf),
            ("gbdt_rounds", self.gbdt_rounds),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ClassifierError::InvalidHyperparams(format!("{name} must be positive")));
        }
        if !(self.gbdt_lr > 0.0 && self.gbdt_lr <= 1.0) {
            return Err(ClassifierError::InvalidHyperparams("gbdt_lr must lie in (0, 1]".into()));
        }
        if !(self.logreg_l2 > 0.0 && self.logreg_l2.is_finite()) {
            return Err(ClassifierError::InvalidHyperparams("logreg_l2 must be positive".into()));
        }
        if !(self.gbdt_lambda >= 0.0 && self.gbdt_lambda.is_finite()) {
            return Err(ClassifierError::InvalidHyperparams("gbdt_lambda must be >= 0".into()));
        }
        Ok(())
    }
}

/// A trained model of any kind.
#[derive(Debug, Clone)]
pub enum FitModel {
    Knn(KnnModel),
    Logreg(LogRegModel),
    Tree(TreeModel),
    Forest(ForestModel),
    Gbdt(GbdtModel),
}

impl FitModel {
    pub fn kind(&self) -> ClassifierKind {
        match self {
            FitModel::Knn(_) => ClassifierKind::Knn,
            FitModel::Logreg(_) => ClassifierKind::Logreg,
            FitModel::Tree(_) => ClassifierKind::Tree,
            FitModel::Forest(_) => ClassifierKind::Forest,
            FitModel::Gbdt(_) => ClassifierKind::Gbdt,
        }
    }

    pub fn class_count(&self) -> usize {
        match self {
            FitModel::Knn(m) => m.n_classes,
            FitModel::Logreg(m) => m.n_classes,
            FitModel::Tree(m) => m.n_classes,
            FitModel::Forest(m) => m.n_classes,
            FitModel::Gbdt(m) => m.n_classes,
        }
    }

    pub fn n_features(&self) -> usize {
        match self {
            FitModel::Knn(m) => m.n_features(),
            FitModel::Logreg(m) => m.n_features(),
            FitModel::Tree(m) => m.n_features,
            FitModel::Forest(m) => m.n_features,
            FitModel::Gbdt(m) => m.n_features,
        }
    }

    pub fn predict_row(&self, x: &[f64]) -> usize {
        match self {
            FitModel::Knn(m) => m.predict_row(x),
            FitModel::Logreg(m) => m.predict_row(x),
            FitModel::Tree(m) => m.predict_row(x),
            FitModel::Forest(m) => m.predict_row(x),
            FitModel::Gbdt(m) => m.predict_row(x),
        }
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>, ClassifierError> {
        if x.cols() != self.n_features() {
            return Err(ClassifierError::ShapeError(format!(
                "model expects {} features, got {}",
                self.n_features(),
                x.cols()
            )));
        }
        Ok(x.iter_rows().map(|r| self.predict_row(r)).collect())
    }
}

pub(crate) fn check_training_set(x: &Matrix, y: &[usize], n_classes: usize) -> Result<(), ClassifierError> {
    if x.rows() == 0 {
        return Err(ClassifierError::EmptyTrain);
    }
    if y.len() != x.rows() {
        return Err(ClassifierError::ShapeError(format!(
            "{} labels for {} rows",
            y.len(),
            x.rows()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
        return Err(ClassifierError::ShapeError(format!(
            "label {bad} outside 0..{n_classes}"
        )));
    }
    Ok(())
}

pub(crate) fn distinct_classes(y: &[usize]) -> usize {
    let mut seen: Vec<usize> = y.to_vec();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

/// Fits a model of the given kind. `seed` is only consumed by the forest.
pub fn fit(
    kind: ClassifierKind,
    x: &Matrix,
    y: &[usize],
    n_classes: usize,
    hp: &Hyperparams,
    seed: u64,
) -> Result<FitModel, ClassifierError> {
    hp.validate()?;
    Ok(match kind {
        ClassifierKind::Knn => FitModel::Knn(knn_fit(x, y, n_classes, hp.knn_k)?),
        ClassifierKind::Logreg => FitModel::Logreg(logreg_fit(x, y, n_classes, hp)?.0),
        ClassifierKind::Tree => FitModel::Tree(tree_fit(
            x,
            y,
            n_classes,
            &TreeParams {
                max_depth: hp.tree_max_depth,
                min_leaf: hp.tree_min_leaf,
            },
        )?),
        ClassifierKind::Forest => FitModel::Forest(forest_fit(
            x,
            y,
            n_classes,
            hp.forest_trees,
            &TreeParams {
                max_depth: hp.forest_max_depth,
                min_leaf: hp.forest_min_leaf,
            },
            seed,
        )?),
        ClassifierKind::Gbdt => FitModel::Gbdt(gbdt_fit(x, y, n_classes, hp)?),
    })
}

/// Index of the most voted class; the lowest class wins ties.
pub(crate) fn majority<T: PartialOrd + Copy>(votes: &[T]) -> usize {
    let mut best = 0;
    for (c, v) in votes.iter().enumerate() {
        if *v > votes[best] {
            best = c;
        }
    }
    best
}
