//! Gradient-boosted regression trees with a softmax objective.
//!
//! Each round fits one regression tree per class to the gradient
//! `g = p - onehot(y)` and hessian `h = max(2 p (1 - p), 1e-16)` of the
//! cross-entropy at the current scores, then adds `lr * leaf_value` to every
//! class score. Leaf values are `-G / (H + lambda)`; a split is accepted only
//! when its gain is strictly positive.

use super::tree::{midpoint, presort, NodeMarks};
use super::{check_training_set, ClassifierError, Hyperparams};
use crate::numerics::{argmax, softmax_in_place, Matrix};

const MIN_HESSIAN: f64 = 1e-16;

#[derive(Debug, Clone, PartialEq)]
pub enum RegressionTree {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: Box<RegressionTree>,
        right: Box<RegressionTree>,
    },
}

impl RegressionTree {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                RegressionTree::Leaf(v) => return *v,
                RegressionTree::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => node = if x[*feature] <= *threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            RegressionTree::Leaf(_) => 0,
            RegressionTree::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GbdtModel {
    /// `trees[round][class]`.
    pub trees: Vec<Vec<RegressionTree>>,
    pub n_classes: usize,
    pub n_features: usize,
    pub lr: f64,
}

impl GbdtModel {
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let mut s = vec![0.0; self.n_classes];
        for round in &self.trees {
            for (sc, t) in s.iter_mut().zip(round) {
                *sc += self.lr * t.predict_row(x);
            }
        }
        s
    }

    pub fn predict_row(&self, x: &[f64]) -> usize {
        argmax(&self.scores(x))
    }
}

/// Mean cross-entropy of row-wise softmax scores (N x C).
pub fn softmax_loss(scores: &Matrix, y: &[usize]) -> f64 {
    let total: f64 = scores
        .iter_rows()
        .zip(y)
        .map(|(s, &yi)| {
            let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            max + s.iter().map(|v| (v - max).exp()).sum::<f64>().ln() - s[yi]
        })
        .sum();
    total / y.len() as f64
}

struct RegBuilder<'a> {
    x: &'a Matrix,
    g: &'a [f64],
    h: &'a [f64],
    order: &'a [Vec<u32>],
    lambda: f64,
    max_depth: usize,
    marks: NodeMarks,
}

impl RegBuilder<'_> {
    fn build(&mut self, rows: Vec<usize>, depth: usize) -> RegressionTree {
        let g_sum: f64 = rows.iter().map(|&r| self.g[r]).sum();
        let h_sum: f64 = rows.iter().map(|&r| self.h[r]).sum();
        let leaf = RegressionTree::Leaf(-g_sum / (h_sum + self.lambda));
        if depth >= self.max_depth || rows.len() < 2 {
            return leaf;
        }
        self.marks.mark(&rows);
        let parent = g_sum * g_sum / (h_sum + self.lambda);
        let mut best: Option<(f64, usize, f64)> = None;
        for (f, order) in self.order.iter().enumerate() {
            let column: Vec<usize> = order
                .iter()
                .map(|&r| r as usize)
                .filter(|&r| self.marks.contains(r))
                .collect();
            let (mut gl, mut hl) = (0.0, 0.0);
            for pair in column.windows(2) {
                let (r, next) = (pair[0], pair[1]);
                gl += self.g[r];
                hl += self.h[r];
                let (lo, hi) = (self.x.get(r, f), self.x.get(next, f));
                if lo == hi {
                    continue;
                }
                let (gr, hr) = (g_sum - gl, h_sum - hl);
                let gain = 0.5 * (gl * gl / (hl + self.lambda) + gr * gr / (hr + self.lambda) - parent);
                if gain > best.map_or(0.0, |b| b.0) {
                    best = Some((gain, f, midpoint(lo, hi)));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return leaf;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows
            .into_iter()
            .partition(|&row| self.x.get(row, feature) <= threshold);
        let left = self.build(l, depth + 1);
        let right = self.build(r, depth + 1);
        RegressionTree::Split {
            feature,
            threshold,
            left: Box::new(left),
            right: Box::new(right),
        }
    }
}

pub fn gbdt_fit(x: &Matrix, y: &[usize], n_classes: usize, hp: &Hyperparams) -> Result<GbdtModel, ClassifierError> {
    gbdt_fit_traced(x, y, n_classes, hp).map(|(m, _)| m)
}

/// Like [`gbdt_fit`], also returning the training loss before the first round
/// and after each round (`gbdt_rounds + 1` values).
pub fn gbdt_fit_traced(
    x: &Matrix,
    y: &[usize],
    n_classes: usize,
    hp: &Hyperparams,
) -> Result<(GbdtModel, Vec<f64>), ClassifierError> {
    check_training_set(x, y, n_classes)?;
    hp.validate()?;
    let n = x.rows();
    let order = presort(x);
    let mut scores = Matrix::zeros(n, n_classes);
    let mut losses = vec![softmax_loss(&scores, y)];
    let mut trees = Vec::with_capacity(hp.gbdt_rounds);
    let mut marks = NodeMarks::new(n);
    let mut probs = vec![0.0; n * n_classes];
    let (mut g, mut h) = (vec![0.0; n], vec![0.0; n]);
    for _ in 0..hp.gbdt_rounds {
        for (i, p) in probs.chunks_mut(n_classes).enumerate() {
            p.copy_from_slice(scores.row(i));
            softmax_in_place(p);
        }
        let mut round = Vec::with_capacity(n_classes);
        for c in 0..n_classes {
            for i in 0..n {
                let p = probs[i * n_classes + c];
                g[i] = p - if y[i] == c { 1.0 } else { 0.0 };
                h[i] = (2.0 * p * (1.0 - p)).max(MIN_HESSIAN);
            }
            let mut b = RegBuilder {
                x,
                g: &g,
                h: &h,
                order: &order,
                lambda: hp.gbdt_lambda,
                max_depth: hp.gbdt_depth,
                marks,
            };
            round.push(b.build((0..n).collect(), 0));
            marks = b.marks;
        }
        for i in 0..n {
            let row = x.row(i);
            for (c, t) in round.iter().enumerate() {
                let v = scores.get(i, c) + hp.gbdt_lr * t.predict_row(row);
                scores.set(i, c, v);
            }
        }
        losses.push(softmax_loss(&scores, y));
        trees.push(round);
    }
    Ok((
        GbdtModel {
            trees,
            n_classes,
            n_features: x.cols(),
            lr: hp.gbdt_lr,
        },
        losses,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn problem() -> (Matrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let y: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let data = (0..360)
            .map(|k| rng.random_range(-1.0..1.0) + if k % 6 == 0 { y[k / 6] as f64 } else { 0.0 })
            .collect();
        (Matrix::from_vec(60, 6, data).unwrap(), y)
    }

    #[test]
    fn initial_loss_is_log_classes() {
        let (x, y) = problem();
        let hp = Hyperparams {
            gbdt_rounds: 1,
            ..Hyperparams::default()
        };
        let (_, losses) = gbdt_fit_traced(&x, &y, 3, &hp).unwrap();
        assert!((losses[0] - 3f64.ln()).abs() < 1e-12);
        assert!(losses[1] < losses[0]);
    }

    #[test]
    fn training_loss_never_increases() {
        let (x, y) = problem();
        let hp = Hyperparams {
            gbdt_rounds: 50,
            ..Hyperparams::default()
        };
        let (m, losses) = gbdt_fit_traced(&x, &y, 3, &hp).unwrap();
        assert_eq!(losses.len(), 51);
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
        }
        assert!(m.trees.iter().flatten().all(|t| t.depth() <= 3));
    }

    #[test]
    fn identical_rows_yield_leaves() {
        let x = Matrix::from_rows(&[[1.0, 2.0]; 4]).unwrap();
        let m = gbdt_fit(&x, &[0, 1, 0, 1], 2, &Hyperparams::default()).unwrap();
        assert!(m.trees.iter().flatten().all(|t| matches!(t, RegressionTree::Leaf(_))));
        assert_eq!(m.predict_row(&[1.0, 2.0]), 0);
    }

    #[test]
    fn separates_a_threshold() {
        let x = Matrix::from_rows(&[[0.0], [1.0], [2.0], [3.0], [4.0], [5.0]]).unwrap();
        let y = [0, 0, 0, 1, 1, 1];
        let m = gbdt_fit(&x, &y, 2, &Hyperparams::default()).unwrap();
        let pred: Vec<usize> = x.iter_rows().map(|r| m.predict_row(r)).collect();
        assert_eq!(pred, y);
    }
}
