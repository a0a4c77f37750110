use super::{Context, Encoder, EncoderError};
use crate::numerics::{Matrix, Standardizer};

/// Score given to classes that have no member in the context.
pub const ABSENT_CLASS_SCORE: f64 = -1e6;

/// Encodes each query as the negated Euclidean distance to every class
/// centroid of the context, after standardizing with context statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CentroidEncoder {
    pub n_classes: usize,
}

impl CentroidEncoder {
    pub fn new(n_classes: usize) -> Self {
        Self { n_classes }
    }
}

impl Encoder for CentroidEncoder {
    fn width(&self) -> usize {
        self.n_classes
    }

    fn embed(&self, ctx: &Context, queries: &Matrix) -> Result<Matrix, EncoderError> {
        centroid_embed(ctx, queries, self.n_classes)
    }
}

pub fn centroid_embed(ctx: &Context, queries: &Matrix, c_total: usize) -> Result<Matrix, EncoderError> {
    if ctx.is_empty() {
        return Err(EncoderError::EmptyContext);
    }
    let d = ctx.features.cols();
    if queries.cols() != d {
        return Err(EncoderError::ShapeError(format!(
            "queries have {} features, context has {d}",
            queries.cols()
        )));
    }
    if let Some(&y) = ctx.labels.iter().find(|&&y| y >= c_total) {
        return Err(EncoderError::TooManyClasses { label: y, c_max: c_total });
    }
    let stats = Standardizer::fit(&ctx.features)?;
    let mut sums = Matrix::zeros(c_total, d);
    let mut counts = vec![0usize; c_total];
    let mut buf = vec![0.0; d];
    for (row, &y) in ctx.features.iter_rows().zip(&ctx.labels) {
        stats.apply_row(row, &mut buf);
        counts[y] += 1;
        for (s, v) in sums.row_mut(y).iter_mut().zip(&buf) {
            *s += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            sums.row_mut(c).iter_mut().for_each(|s| *s /= n as f64);
        }
    }
    let mut out = Matrix::zeros(queries.rows(), c_total);
    for i in 0..queries.rows() {
        stats.apply_row(queries.row(i), &mut buf);
        for c in 0..c_total {
            let score = if counts[c] == 0 {
                ABSENT_CLASS_SCORE
            } else {
                -buf.iter()
                    .zip(sums.row(c))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            };
            out.set(i, c, score);
        }
    }
    Ok(out)
}
