//! Multinomial logistic regression.
//!
//! Objective, over parameters `W` (D x C) and `b` (C):
//!
//! ```text
//! L(W, b) = mean_i CE(softmax(x_i W + b), y_i) + lambda / 2 * ||W||^2
//! ```
//!
//! with `lambda = 1 / logreg_l2`. The bias is not penalized. Because the data
//! term is a mean, duplicating every training row leaves the optimum unchanged.
//! Minimized with full-batch L-BFGS and a backtracking Armijo line search.

use std::collections::VecDeque;

use super::{check_training_set, distinct_classes, ClassifierError, Hyperparams};
use crate::numerics::{argmax, dot, softmax_in_place, Matrix};

const HISTORY: usize = 10;
const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

#[derive(Debug, Clone)]
pub struct LogRegModel {
    /// D x C, row-major.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub n_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRegReport {
    pub iterations: usize,
    pub final_loss: f64,
    pub final_grad_norm: f64,
    pub converged: bool,
}

impl LogRegModel {
    pub fn n_features(&self) -> usize {
        self.weights.rows()
    }

    pub fn scores(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (xj, w) in x.iter().zip(self.weights.iter_rows()) {
            for (o, wc) in out.iter_mut().zip(w) {
                *o += xj * wc;
            }
        }
    }

    pub fn predict_row(&self, x: &[f64]) -> usize {
        let mut s = vec![0.0; self.n_classes];
        self.scores(x, &mut s);
        argmax(&s)
    }
}

/// Loss and gradient at `theta = [W row-major | b]`.
pub fn logreg_objective(theta: &[f64], x: &Matrix, y: &[usize], n_classes: usize, lambda: f64) -> (f64, Vec<f64>) {
    let d = x.cols();
    let c = n_classes;
    let (w, b) = theta.split_at(d * c);
    let mut grad = vec![0.0; theta.len()];
    let n = x.rows() as f64;
    let mut loss = 0.0;
    let mut p = vec![0.0; c];
    for (row, &yi) in x.iter_rows().zip(y) {
        p.copy_from_slice(b);
        for (j, &xj) in row.iter().enumerate() {
            if xj != 0.0 {
                for (pc, wc) in p.iter_mut().zip(&w[j * c..(j + 1) * c]) {
                    *pc += xj * wc;
                }
            }
        }
        let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + p.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        loss += lse - p[yi];
        softmax_in_place(&mut p);
        p[yi] -= 1.0;
        let (gw, gb) = grad.split_at_mut(d * c);
        for (j, &xj) in row.iter().enumerate() {
            if xj != 0.0 {
                for (g, pc) in gw[j * c..(j + 1) * c].iter_mut().zip(&p) {
                    *g += xj * pc;
                }
            }
        }
        for (g, pc) in gb.iter_mut().zip(&p) {
            *g += pc;
        }
    }
    loss /= n;
    grad.iter_mut().for_each(|g| *g /= n);
    loss += 0.5 * lambda * dot(w, w);
    for (g, wv) in grad[..d * c].iter_mut().zip(w) {
        *g += lambda * wv;
    }
    (loss, grad)
}

pub fn logreg_fit(
    x: &Matrix,
    y: &[usize],
    n_classes: usize,
    hp: &Hyperparams,
) -> Result<(LogRegModel, LogRegReport), ClassifierError> {
    check_training_set(x, y, n_classes)?;
    if distinct_classes(y) < 2 {
        return Err(ClassifierError::SingleClassError);
    }
    let lambda = 1.0 / hp.logreg_l2;
    let d = x.cols();
    let mut theta = vec![0.0; d * n_classes + n_classes];
    let (mut loss, mut grad) = logreg_objective(&theta, x, y, n_classes, lambda);
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(HISTORY);
    let mut iterations = 0;
    let mut grad_norm = dot(&grad, &grad).sqrt();

    while iterations < hp.logreg_max_iter && grad_norm >= hp.logreg_tol {
        // Two-loop recursion for the quasi-Newton direction.
        let mut q = grad.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, yv, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(yv).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = match history.back() {
            Some((s, yv, _)) => dot(s, yv) / dot(yv, yv),
            None => 1.0 / grad_norm.max(1.0),
        };
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, yv, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(yv, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.into_iter().map(|v| -v).collect();
        let mut slope = dot(&grad, &dir);
        if slope >= 0.0 {
            // Not a descent direction; restart from steepest descent.
            history.clear();
            dir = grad.iter().map(|g| -g / grad_norm.max(1.0)).collect();
            slope = dot(&grad, &dir);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<f64> = theta.iter().zip(&dir).map(|(t, dv)| t + step * dv).collect();
            let (l, g) = logreg_objective(&trial, x, y, n_classes, lambda);
            if l <= loss + ARMIJO_C1 * step * slope {
                accepted = Some((trial, l, g));
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        let Some((next, next_loss, next_grad)) = accepted else {
            break;
        };
        let s: Vec<f64> = next.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = next_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-12 * dot(&yv, &yv).sqrt() * dot(&s, &s).sqrt() {
            if history.len() == HISTORY {
                history.pop_front();
            }
            history.push_back((s, yv, 1.0 / sy));
        }
        theta = next;
        loss = next_loss;
        grad = next_grad;
        grad_norm = dot(&grad, &grad).sqrt();
    }

    let bias = theta.split_off(d * n_classes);
    let model = LogRegModel {
        weights: Matrix::from_vec(d, n_classes, theta).map_err(|e| ClassifierError::ShapeError(e.to_string()))?,
        bias,
        n_classes,
    };
    let report = LogRegReport {
        iterations,
        final_loss: loss,
        final_grad_norm: grad_norm,
        converged: grad_norm < hp.logreg_tol,
    };
    Ok((model, report))
}
