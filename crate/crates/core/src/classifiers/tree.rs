//! CART classification trees (Gini impurity) and bagged random forests.
//!
//! Candidate thresholds sit at midpoints between consecutive distinct values
//! present in a node; rows with `x[f] <= threshold` go left. The best split
//! maximizes the Gini decrease, compared in exact integer arithmetic, with
//! ties resolved to the lowest feature index and then the lowest threshold.
//! A node becomes a leaf at `max_depth`, when it holds fewer than
//! `2 * min_leaf` samples, or when no split with both children holding at
//! least `min_leaf` samples has positive gain.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{check_training_set, majority, ClassifierError};
use crate::augmentation::splitmix64;
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Leaf {
        class: usize,
        /// Weighted class counts of the training rows that reached the leaf.
        counts: Vec<u64>,
        gini: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    pub fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn n_leaves(&self) -> usize {
        match self {
            Node::Leaf { .. } => 1,
            Node::Split { left, right, .. } => left.n_leaves() + right.n_leaves(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TreeModel {
    pub root: Node,
    pub n_classes: usize,
    pub n_features: usize,
}

impl TreeModel {
    pub fn leaf_for(&self, x: &[f64]) -> &Node {
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf { .. } => return node,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => node = if x[*feature] <= *threshold { left } else { right },
            }
        }
    }

    pub fn predict_row(&self, x: &[f64]) -> usize {
        match self.leaf_for(x) {
            Node::Leaf { class, .. } => *class,
            Node::Split { .. } => unreachable!(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForestModel {
    pub trees: Vec<TreeModel>,
    pub n_classes: usize,
    pub n_features: usize,
}

impl ForestModel {
    /// Majority vote of the trees; the lowest class wins ties.
    pub fn predict_row(&self, x: &[f64]) -> usize {
        let mut votes = vec![0usize; self.n_classes];
        for t in &self.trees {
            votes[t.predict_row(x)] += 1;
        }
        majority(&votes)
    }
}

pub fn gini(counts: &[u64]) -> f64 {
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

/// Row indices of `x` sorted by each feature (ties by row index).
pub(crate) fn presort(x: &Matrix) -> Vec<Vec<u32>> {
    (0..x.cols())
        .map(|f| {
            let mut idx: Vec<u32> = (0..x.rows() as u32).collect();
            idx.sort_by(|&a, &b| {
                x.get(a as usize, f)
                    .total_cmp(&x.get(b as usize, f))
                    .then(a.cmp(&b))
            });
            idx
        })
        .collect()
}

/// Midpoint of two consecutive distinct values, kept strictly below `hi`.
pub(crate) fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = lo + (hi - lo) / 2.0;
    if m < hi && m >= lo {
        m
    } else {
        lo
    }
}

/// Marks the rows of the node being split so a presorted column can be
/// filtered in one pass.
pub(crate) struct NodeMarks {
    stamp: Vec<u32>,
    current: u32,
}

impl NodeMarks {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            stamp: vec![0; n],
            current: 0,
        }
    }

    pub(crate) fn mark(&mut self, rows: &[usize]) {
        self.current += 1;
        for &r in rows {
            self.stamp[r] = self.current;
        }
    }

    #[inline]
    pub(crate) fn contains(&self, row: usize) -> bool {
        self.stamp[row] == self.current
    }
}

struct Candidate {
    // Score = num / den = sum_c L_c^2 / n_L + sum_c R_c^2 / n_R.
    num: u128,
    den: u128,
    feature: usize,
    threshold: f64,
}

impl Candidate {
    fn beats(&self, num: u128, den: u128) -> bool {
        self.num * den > num * self.den
    }
}

enum FeatureChoice<'r> {
    All,
    Sample { rng: &'r mut ChaCha8Rng, m: usize },
}

struct Builder<'a, 'r> {
    x: &'a Matrix,
    y: &'a [usize],
    weights: &'a [u32],
    order: &'a [Vec<u32>],
    n_classes: usize,
    params: TreeParams,
    marks: NodeMarks,
    features: FeatureChoice<'r>,
}

impl Builder<'_, '_> {
    fn leaf(counts: Vec<u64>) -> Node {
        Node::Leaf {
            class: majority(&counts),
            gini: gini(&counts),
            counts,
        }
    }

    fn candidate_features(&mut self) -> Vec<usize> {
        let d = self.x.cols();
        match &mut self.features {
            FeatureChoice::All => (0..d).collect(),
            FeatureChoice::Sample { rng, m } => {
                let mut f = index::sample(*rng, d, (*m).min(d)).into_vec();
                f.sort_unstable();
                f
            }
        }
    }

    fn build(&mut self, rows: Vec<usize>, depth: usize) -> Node {
        let mut counts = vec![0u64; self.n_classes];
        for &r in &rows {
            counts[self.y[r]] += u64::from(self.weights[r]);
        }
        let n: u64 = counts.iter().sum();
        let min_leaf = self.params.min_leaf as u64;
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if depth >= self.params.max_depth || n < 2 * min_leaf || pure {
            return Self::leaf(counts);
        }

        let features = self.candidate_features();
        self.marks.mark(&rows);
        let parent_sq: u128 = counts.iter().map(|&c| (c as u128) * (c as u128)).sum();
        let mut best: Option<Candidate> = None;
        let mut left = vec![0u64; self.n_classes];
        for f in features {
            left.iter_mut().for_each(|c| *c = 0);
            let mut n_left = 0u64;
            let mut sq_left: u128 = 0;
            let mut sq_right = parent_sq;
            let column: Vec<usize> = self.order[f]
                .iter()
                .map(|&r| r as usize)
                .filter(|&r| self.marks.contains(r))
                .collect();
            for (pos, &r) in column.iter().enumerate() {
                let w = u64::from(self.weights[r]);
                let c = self.y[r];
                let (lc, rc) = (left[c] as u128, (counts[c] - left[c]) as u128);
                let w128 = w as u128;
                sq_left += 2 * lc * w128 + w128 * w128;
                sq_right -= 2 * rc * w128 - w128 * w128;
                left[c] += w;
                n_left += w;
                let Some(&next) = column.get(pos + 1) else { break };
                let (lo, hi) = (self.x.get(r, f), self.x.get(next, f));
                if lo == hi {
                    continue;
                }
                let n_right = n - n_left;
                if n_left < min_leaf || n_right < min_leaf {
                    continue;
                }
                let (nl, nr) = (n_left as u128, n_right as u128);
                let num = sq_left * nr + sq_right * nl;
                let den = nl * nr;
                if best.as_ref().is_none_or(|b| Candidate { num, den, feature: f, threshold: 0.0 }.beats(b.num, b.den)) {
                    best = Some(Candidate {
                        num,
                        den,
                        feature: f,
                        threshold: midpoint(lo, hi),
                    });
                }
            }
        }

        // Positive gain iff the children's score exceeds the parent's sum_c P_c^2 / n.
        let best = match best {
            Some(b) if b.num * n as u128 > parent_sq * b.den => b,
            _ => return Self::leaf(counts),
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows
            .into_iter()
            .partition(|&row| self.x.get(row, best.feature) <= best.threshold);
        let left = self.build(l, depth + 1);
        let right = self.build(r, depth + 1);
        Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left: Box::new(left),
            right: Box::new(right),
        }
    }
}

fn check_params(params: &TreeParams) -> Result<(), ClassifierError> {
    if params.min_leaf == 0 {
        return Err(ClassifierError::InvalidHyperparams("min_leaf must be >= 1".into()));
    }
    Ok(())
}

pub fn tree_fit(x: &Matrix, y: &[usize], n_classes: usize, params: &TreeParams) -> Result<TreeModel, ClassifierError> {
    check_training_set(x, y, n_classes)?;
    check_params(params)?;
    let order = presort(x);
    let weights = vec![1u32; x.rows()];
    let mut b = Builder {
        x,
        y,
        weights: &weights,
        order: &order,
        n_classes,
        params: *params,
        marks: NodeMarks::new(x.rows()),
        features: FeatureChoice::All,
    };
    let root = b.build((0..x.rows()).collect(), 0);
    Ok(TreeModel {
        root,
        n_classes,
        n_features: x.cols(),
    })
}

/// Fits `n_trees` trees, each on a bootstrap sample of size N and with
/// `max(1, floor(sqrt(D)))` features drawn per split. Tree `t` draws from a
/// ChaCha8 stream seeded with `splitmix64(seed ^ t)`, so the forest is the
/// same regardless of how many threads build it.
pub fn forest_fit(
    x: &Matrix,
    y: &[usize],
    n_classes: usize,
    n_trees: usize,
    params: &TreeParams,
    seed: u64,
) -> Result<ForestModel, ClassifierError> {
    check_training_set(x, y, n_classes)?;
    check_params(params)?;
    let n = x.rows();
    let m = ((x.cols() as f64).sqrt().floor() as usize).max(1);
    let order = presort(x);
    let trees = (0..n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ t as u64));
            let mut weights = vec![0u32; n];
            for _ in 0..n {
                weights[rng.random_range(0..n)] += 1;
            }
            let rows: Vec<usize> = (0..n).filter(|&i| weights[i] > 0).collect();
            let mut b = Builder {
                x,
                y,
                weights: &weights,
                order: &order,
                n_classes,
                params: *params,
                marks: NodeMarks::new(n),
                features: FeatureChoice::Sample { rng: &mut rng, m },
            };
            let root = b.build(rows, 0);
            TreeModel {
                root,
                n_classes,
                n_features: x.cols(),
            }
        })
        .collect();
    Ok(ForestModel {
        trees,
        n_classes,
        n_features: x.cols(),
    })
}
