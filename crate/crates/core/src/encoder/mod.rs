//! In-context encoders.
//!
//! An encoder maps a labeled *context* and a batch of unlabeled *query* rows
//! to one embedding per query. The embedding of a query depends on the
//! context it was encoded against, which is what in-context subsetting
//! exploits. Two implementations share the [`Encoder`] trait:
//!
//! - [`TransformerEncoder`]: a prior-data-fitted-network style transformer
//!   (pre-norm blocks, no positional encoding, queries attend to the context
//!   and to themselves only).
//! - [`CentroidEncoder`]: negative distances to per-class context centroids,
//!   a transparent reference that needs no weights.

mod centroid;
mod transformer;
mod weights;

pub use centroid::{centroid_embed, CentroidEncoder, ABSENT_CLASS_SCORE};
pub use transformer::{embed, gelu, LabelPolicy, TransformerEncoder};
pub use weights::{
    generate_synthetic_weights, load_weights, read_weights, save_weights, write_weights,
    EncoderConfig, EncoderWeights, LayerWeights, WEIGHT_FILE_MAGIC, WEIGHT_FILE_VERSION,
};

use thiserror::Error;

use crate::numerics::{Matrix, NumericsError};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("{d} features exceed the encoder limit of {f_max}")]
    TooManyFeatures { d: usize, f_max: usize },
    #[error("context label {label} exceeds the encoder class limit of {c_max}")]
    TooManyClasses { label: usize, c_max: usize },
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("empty context")]
    EmptyContext,
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("not an encoder weight file")]
    NotAWeightFile,
    #[error("corrupt weight file: {0}")]
    CorruptWeights(String),
    #[error("unsupported weight file version {0}")]
    VersionError(u32),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Labeled rows presented to an encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Context {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self, EncoderError> {
        if features.rows() == 0 {
            return Err(EncoderError::EmptyContext);
        }
        if labels.len() != features.rows() {
            return Err(EncoderError::ShapeError(format!(
                "{} context labels for {} rows",
                labels.len(),
                features.rows()
            )));
        }
        Ok(Self { features, labels })
    }

    /// Builds a context from the listed rows of `features`/`labels`.
    pub fn from_indices(
        features: &Matrix,
        labels: &[usize],
        indices: &[usize],
    ) -> Result<Self, EncoderError> {
        Self::new(
            features.select_rows(indices),
            indices.iter().map(|&i| labels[i]).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Anything that embeds queries against a labeled context.
///
/// Implementations must be pure: the output row for a query depends only on
/// the encoder state, the context and that query row.
pub trait Encoder: Send + Sync {
    /// Embedding width D'.
    fn width(&self) -> usize;

    fn embed(&self, ctx: &Context, queries: &Matrix) -> Result<Matrix, EncoderError>;
}

impl<E: Encoder + ?Sized> Encoder for &E {
    fn width(&self) -> usize {
        (**self).width()
    }

    fn embed(&self, ctx: &Context, queries: &Matrix) -> Result<Matrix, EncoderError> {
        (**self).embed(ctx, queries)
    }
}

impl<E: Encoder + ?Sized> Encoder for Box<E> {
    fn width(&self) -> usize {
        (**self).width()
    }

    fn embed(&self, ctx: &Context, queries: &Matrix) -> Result<Matrix, EncoderError> {
        (**self).embed(ctx, queries)
    }
}
