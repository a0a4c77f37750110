//! In-context subsetting.
//!
//! Every training point is encoded `K` times, each time against a different
//! stratified subset of the training set. The `K` embeddings inherit the
//! point's label, giving a training set `K` times larger in the encoder's
//! embedding space. Evaluation points are encoded once against the full
//! training set.
//!
//! Seeds: point `i` of a training set uses `point_seed(seed, i)`, and its
//! `k`-th context (0-based) uses `splitmix64(point_seed ^ k)`. Nothing depends
//! on `K` itself, so the first `k` contexts of a run with a larger `K` are
//! identical to a run with `K = k`, and parallel generation matches
//! sequential generation bit for bit.

use std::io::Write;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data_io::Dataset;
use crate::encoder::{Context, Encoder, EncoderError};
use crate::numerics::{Matrix, NumericsError};

/// Range of the per-context fraction in trivial-augment mode.
pub const TRIVIAL_AUGMENT_RANGE: (f64, f64) = (0.5, 0.99);

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("context of {n} points cannot hold one sample of each of {classes} classes")]
    ContextTooSmall { n: usize, classes: usize },
    #[error("context of {n} points exceeds the {available} available")]
    ContextTooLarge { n: usize, available: usize },
    #[error("invalid ICS parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the `k`-th context drawn from `base`.
pub fn context_seed(base: u64, k: usize) -> u64 {
    splitmix64(base ^ k as u64)
}

/// Base seed of training point `i`.
pub fn point_seed(base: u64, i: usize) -> u64 {
    splitmix64(splitmix64(base) ^ i as u64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ContextFraction {
    Fixed(f64),
    /// Draw the fraction from `U[0.5, 0.99]` for every context.
    TrivialAugment,
}

impl ContextFraction {
    pub fn is_trivial_augment(&self) -> bool {
        matches!(self, ContextFraction::TrivialAugment)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcsParams {
    pub k_contexts: usize,
    pub fraction: ContextFraction,
    pub seed: u64,
}

impl IcsParams {
    pub fn new(k_contexts: usize, fraction: ContextFraction, seed: u64) -> Result<Self, AugmentError> {
        let p = Self {
            k_contexts,
            fraction,
            seed,
        };
        p.validate()?;
        Ok(p)
    }

    /// One context holding the whole training set.
    pub fn full_context(seed: u64) -> Self {
        Self {
            k_contexts: 1,
            fraction: ContextFraction::Fixed(1.0),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.k_contexts < 1 {
            return Err(AugmentError::InvalidParams("K must be >= 1".into()));
        }
        if let ContextFraction::Fixed(f) = self.fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(AugmentError::InvalidParams(format!(
                    "context fraction {f} outside (0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Per-class sample counts for a stratified draw of `n` points.
///
/// Every present class first gets one seat. The remaining `n - C` seats are
/// split in proportion to class sizes: each class gets the floor of its share,
/// and leftover seats go one at a time to the largest fractional remainders
/// (ties to the lower class index), skipping classes that are already full.
/// Shares are compared in exact integer arithmetic.
pub fn class_quotas(class_counts: &[usize], n: usize) -> Result<Vec<usize>, AugmentError> {
    let total: usize = class_counts.iter().sum();
    let present = class_counts.iter().filter(|&&c| c > 0).count();
    if n < present {
        return Err(AugmentError::ContextTooSmall { n, classes: present });
    }
    if n > total {
        return Err(AugmentError::ContextTooLarge { n, available: total });
    }
    let extra = (n - present) as u128;
    let total_u = total as u128;
    let mut quotas: Vec<usize> = class_counts.iter().map(|&c| usize::from(c > 0)).collect();
    let mut remainders = Vec::with_capacity(class_counts.len());
    let mut assigned = 0usize;
    for (c, &count) in class_counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let share = extra * count as u128;
        let whole = (share / total_u) as usize;
        let take = whole.min(count - 1);
        quotas[c] += take;
        assigned += take;
        remainders.push((share % total_u, c));
    }
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut left = n - present - assigned;
    while left > 0 {
        let before = left;
        for &(_, c) in &remainders {
            if left == 0 {
                break;
            }
            if quotas[c] < class_counts[c] {
                quotas[c] += 1;
                left -= 1;
            }
        }
        debug_assert!(left < before, "n <= total guarantees free capacity");
    }
    Ok(quotas)
}

fn class_counts(labels: &[usize]) -> Vec<usize> {
    let c = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0; c];
    for &y in labels {
        counts[y] += 1;
    }
    counts
}

/// Number of distinct labels.
pub fn n_present_classes(labels: &[usize]) -> usize {
    class_counts(labels).iter().filter(|&&c| c > 0).count()
}

/// Draws `n` indices without replacement, stratified by label according to
/// [`class_quotas`]. Returned indices are sorted.
pub fn stratified_subsample(labels: &[usize], n: usize, seed: u64) -> Result<Vec<usize>, AugmentError> {
    let counts = class_counts(labels);
    let quotas = class_quotas(&counts, n)?;
    let mut members: Vec<Vec<usize>> = counts.iter().map(|&c| Vec::with_capacity(c)).collect();
    for (i, &y) in labels.iter().enumerate() {
        members[y].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for (pool, &q) in members.iter().zip(&quotas) {
        if q == pool.len() {
            out.extend_from_slice(pool);
        } else {
            out.extend(index::sample(&mut rng, pool.len(), q).into_iter().map(|j| pool[j]));
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// `max(C, round(fraction * N))`, capped at `N`.
pub fn context_size(fraction: f64, n_train: usize, n_classes: usize) -> usize {
    let n = (fraction * n_train as f64).round() as usize;
    n.max(n_classes).min(n_train)
}

/// Fraction used by context `k` of a point whose base seed is `base`.
pub fn context_fraction(fraction: ContextFraction, base: u64, k: usize) -> f64 {
    match fraction {
        ContextFraction::Fixed(f) => f,
        ContextFraction::TrivialAugment => {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(context_seed(base, k)));
            let (lo, hi) = TRIVIAL_AUGMENT_RANGE;
            rng.random_range(lo..=hi)
        }
    }
}

/// Training-set indices forming context `k` for a point whose base seed is `base`.
pub fn draw_context(
    labels: &[usize],
    fraction: ContextFraction,
    base: u64,
    k: usize,
) -> Result<Vec<usize>, AugmentError> {
    let f = context_fraction(fraction, base, k);
    let n = context_size(f, labels.len(), n_present_classes(labels));
    stratified_subsample(labels, n, context_seed(base, k))
}

fn single_row(x: &[f64]) -> Result<Matrix, AugmentError> {
    Ok(Matrix::from_vec(1, x.len(), x.to_vec())?)
}

/// Encodes `x` against `K` stratified sub-contexts of `train`. Row `k` of the
/// result is the embedding under context `k`; `params.seed` is this point's
/// base seed.
pub fn ics_augment<E: Encoder + ?Sized>(
    encoder: &E,
    params: &IcsParams,
    train: &Dataset,
    x: &[f64],
) -> Result<Matrix, AugmentError> {
    params.validate()?;
    let query = single_row(x)?;
    let mut out = Matrix::zeros(params.k_contexts, encoder.width());
    let mut full: Option<usize> = None;
    for k in 0..params.k_contexts {
        let idx = draw_context(&train.labels, params.fraction, params.seed, k)?;
        let is_full = idx.len() == train.n_samples();
        if let (true, Some(prev)) = (is_full, full) {
            // Same context as an earlier draw: the embedding is identical.
            let row = out.row(prev).to_vec();
            out.row_mut(k).copy_from_slice(&row);
            continue;
        }
        let ctx = Context::from_indices(&train.features, &train.labels, &idx)?;
        let e = encoder.embed(&ctx, &query)?;
        out.row_mut(k).copy_from_slice(e.row(0));
        if is_full {
            full = Some(k);
        }
    }
    Ok(out)
}

/// An augmented training set in embedding space.
///
/// Rows are ordered point-major: row `i * K + k` is point `i` under context `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedDataset {
    pub embeddings: Matrix,
    pub labels: Vec<usize>,
    /// `(source_index, context_index)` per row.
    pub provenance: Vec<(usize, usize)>,
    pub k_contexts: usize,
}

impl AugmentedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Keeps only contexts `0..k`. Equal to building with `K = k` directly.
    pub fn truncate_contexts(&self, k: usize) -> AugmentedDataset {
        assert!(k >= 1 && k <= self.k_contexts, "cannot truncate {} contexts to {k}", self.k_contexts);
        let rows: Vec<usize> = (0..self.len())
            .filter(|&r| self.provenance[r].1 < k)
            .collect();
        AugmentedDataset {
            embeddings: self.embeddings.select_rows(&rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            provenance: rows.iter().map(|&r| self.provenance[r]).collect(),
            k_contexts: k,
        }
    }

    /// CSV with columns `source_index,context_index,label,e0,...`.
    pub fn write_csv<W: Write>(&self, writer: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["source_index".to_owned(), "context_index".to_owned(), "label".to_owned()];
        header.extend((0..self.embeddings.cols()).map(|j| format!("e{j}")));
        w.write_record(&header)?;
        for r in 0..self.len() {
            let (i, k) = self.provenance[r];
            let mut rec = vec![i.to_string(), k.to_string(), self.labels[r].to_string()];
            rec.extend(self.embeddings.row(r).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()
    }
}

/// Applies [`ics_augment`] to every training point, in parallel, and
/// replicates labels `K` times.
pub fn build_augmented_trainset<E: Encoder + ?Sized>(
    encoder: &E,
    params: &IcsParams,
    train: &Dataset,
) -> Result<AugmentedDataset, AugmentError> {
    params.validate()?;
    let k = params.k_contexts;
    let blocks: Vec<Matrix> = (0..train.n_samples())
        .into_par_iter()
        .map(|i| {
            let p = IcsParams {
                seed: point_seed(params.seed, i),
                ..*params
            };
            ics_augment(encoder, &p, train, train.features.row(i))
        })
        .collect::<Result<_, _>>()?;
    let embeddings = if blocks.is_empty() {
        Matrix::empty(encoder.width())
    } else {
        Matrix::vstack(&blocks)?
    };
    let mut labels = Vec::with_capacity(train.n_samples() * k);
    let mut provenance = Vec::with_capacity(train.n_samples() * k);
    for (i, &y) in train.labels.iter().enumerate() {
        for c in 0..k {
            labels.push(y);
            provenance.push((i, c));
        }
    }
    Ok(AugmentedDataset {
        embeddings,
        labels,
        provenance,
        k_contexts: k,
    })
}

/// Encodes evaluation points against the full training set.
pub fn embed_eval_points<E: Encoder + ?Sized>(
    encoder: &E,
    train: &Dataset,
    points: &Matrix,
) -> Result<Matrix, AugmentError> {
    if points.cols() != train.n_features() {
        return Err(EncoderError::ShapeError(format!(
            "points have {} features, training set has {}",
            points.cols(),
            train.n_features()
        ))
        .into());
    }
    if points.rows() == 0 {
        return Ok(Matrix::empty(encoder.width()));
    }
    let ctx = Context::new(train.features.clone(), train.labels.clone())?;
    Ok(encoder.embed(&ctx, points)?)
}
