use rayon::prelude::*;

use super::{Context, Encoder, EncoderConfig, EncoderError, EncoderWeights, LayerWeights};
use crate::numerics::{dot, vec_mat_into, Matrix, Standardizer};

/// How context labels at or above `c_max` are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelPolicy {
    /// Reject with [`EncoderError::TooManyClasses`].
    #[default]
    Strict,
    /// Map label `y` to `y mod c_max`.
    Fold,
}

/// The reference transformer encoder bound to its weights.
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    pub config: EncoderConfig,
    pub weights: EncoderWeights,
    pub label_policy: LabelPolicy,
}

impl TransformerEncoder {
    pub fn new(config: EncoderConfig, weights: EncoderWeights) -> Result<Self, EncoderError> {
        config.validate()?;
        weights.check_shapes(&config)?;
        Ok(Self {
            config,
            weights,
            label_policy: LabelPolicy::Strict,
        })
    }

    pub fn with_label_policy(mut self, policy: LabelPolicy) -> Self {
        self.label_policy = policy;
        self
    }
}

impl Encoder for TransformerEncoder {
    fn width(&self) -> usize {
        self.config.d_model
    }

    fn embed(&self, ctx: &Context, queries: &Matrix) -> Result<Matrix, EncoderError> {
        forward(&self.weights, &self.config, ctx, queries, self.label_policy)
    }
}

/// Embeds `queries` against `ctx` with strict label checking.
pub fn embed(
    weights: &EncoderWeights,
    cfg: &EncoderConfig,
    ctx: &Context,
    queries: &Matrix,
) -> Result<Matrix, EncoderError> {
    forward(weights, cfg, ctx, queries, LabelPolicy::Strict)
}

/// GELU, tanh approximation.
#[inline]
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64, out: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for (((o, v), g), b) in out.iter_mut().zip(x).zip(gain).zip(bias) {
        *o = (v - mean) * inv * g + b;
    }
}

/// Keys and values of the context tokens at one layer's input.
struct LayerCache {
    keys: Matrix,
    values: Matrix,
}

struct Scratch {
    normed: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
    proj: Vec<f64>,
    hidden: Vec<f64>,
    scores: Vec<f64>,
}

impl Scratch {
    fn new(cfg: &EncoderConfig, n_keys: usize) -> Self {
        let d = cfg.d_model;
        Self {
            normed: vec![0.0; d],
            q: vec![0.0; d],
            k: vec![0.0; d],
            v: vec![0.0; d],
            attn: vec![0.0; d],
            proj: vec![0.0; d],
            hidden: vec![0.0; cfg.d_ff],
            scores: vec![0.0; n_keys],
        }
    }
}

/// Multi-head attention of one query vector over `keys`/`values`, plus an
/// optional extra (self) key/value pair. Writes the concatenated heads into
/// `out`.
fn attend(
    cfg: &EncoderConfig,
    q: &[f64],
    keys: &Matrix,
    values: &Matrix,
    own: Option<(&[f64], &[f64])>,
    scores: &mut Vec<f64>,
    out: &mut [f64],
) {
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let n = keys.rows();
    scores.resize(n + usize::from(own.is_some()), 0.0);
    for h in 0..cfg.n_heads {
        let span = h * hd..(h + 1) * hd;
        let qh = &q[span.clone()];
        for (j, s) in scores.iter_mut().take(n).enumerate() {
            *s = dot(qh, &keys.row(j)[span.clone()]) * scale;
        }
        if let Some((k, _)) = own {
            scores[n] = dot(qh, &k[span.clone()]) * scale;
        }
        crate::numerics::softmax_in_place(scores);
        let oh = &mut out[span.clone()];
        oh.fill(0.0);
        for (j, &p) in scores.iter().take(n).enumerate() {
            for (o, v) in oh.iter_mut().zip(&values.row(j)[span.clone()]) {
                *o += p * v;
            }
        }
        if let Some((_, v)) = own {
            let p = scores[n];
            for (o, v) in oh.iter_mut().zip(&v[span.clone()]) {
                *o += p * v;
            }
        }
    }
}

fn feed_forward(cfg: &EncoderConfig, layer: &LayerWeights, token: &mut [f64], s: &mut Scratch) {
    layer_norm(token, &layer.norm2_gain, &layer.norm2_bias, cfg.layer_norm_eps, &mut s.normed);
    vec_mat_into(&s.normed, &layer.ff_in, &mut s.hidden);
    for (h, b) in s.hidden.iter_mut().zip(&layer.ff_in_bias) {
        *h = gelu(*h + b);
    }
    vec_mat_into(&s.hidden, &layer.ff_out, &mut s.proj);
    for ((t, p), b) in token.iter_mut().zip(&s.proj).zip(&layer.ff_out_bias) {
        *t += p + b;
    }
}

/// Projects standardized, zero-padded features (scaled by f_max/D) into the
/// token space. Padding columns contribute nothing, so only the first D rows
/// of the projection are touched.
fn input_token(
    weights: &EncoderWeights,
    stats: &Standardizer,
    feature_scale: f64,
    row: &[f64],
    buf: &mut [f64],
    out: &mut [f64],
) {
    stats.apply_row(row, buf);
    out.fill(0.0);
    for (j, &x) in buf.iter().enumerate() {
        let x = x * feature_scale;
        for (o, w) in out.iter_mut().zip(weights.input_projection.row(j)) {
            *o += x * w;
        }
    }
}

fn forward(
    weights: &EncoderWeights,
    cfg: &EncoderConfig,
    ctx: &Context,
    queries: &Matrix,
    policy: LabelPolicy,
) -> Result<Matrix, EncoderError> {
    let d_in = ctx.features.cols();
    if ctx.is_empty() {
        return Err(EncoderError::EmptyContext);
    }
    if queries.cols() != d_in {
        return Err(EncoderError::ShapeError(format!(
            "queries have {} features, context has {d_in}",
            queries.cols()
        )));
    }
    if d_in > cfg.f_max {
        return Err(EncoderError::TooManyFeatures { d: d_in, f_max: cfg.f_max });
    }
    let labels: Vec<usize> = ctx
        .labels
        .iter()
        .map(|&y| match policy {
            _ if y < cfg.c_max => Ok(y),
            LabelPolicy::Fold => Ok(y % cfg.c_max),
            LabelPolicy::Strict => Err(EncoderError::TooManyClasses { label: y, c_max: cfg.c_max }),
        })
        .collect::<Result<_, _>>()?;

    let d = cfg.d_model;
    let m = ctx.len();
    let stats = Standardizer::fit(&ctx.features)?;
    let feature_scale = cfg.f_max as f64 / d_in as f64;
    let mut buf = vec![0.0; d_in];

    let mut tokens = Matrix::zeros(m, d);
    for i in 0..m {
        input_token(weights, &stats, feature_scale, ctx.features.row(i), &mut buf, tokens.row_mut(i));
        for (t, e) in tokens.row_mut(i).iter_mut().zip(weights.label_embedding.row(labels[i])) {
            *t += e;
        }
    }

    // Context tokens only see each other, so their trajectory is independent
    // of the queries. Run them first and keep each layer's keys and values.
    let mut caches = Vec::with_capacity(cfg.n_layers);
    let mut s = Scratch::new(cfg, m + 1);
    let mut qs = Matrix::zeros(m, d);
    for layer in &weights.layers {
        let mut keys = Matrix::zeros(m, d);
        let mut values = Matrix::zeros(m, d);
        for i in 0..m {
            layer_norm(tokens.row(i), &layer.norm1_gain, &layer.norm1_bias, cfg.layer_norm_eps, &mut s.normed);
            vec_mat_into(&s.normed, &layer.query, qs.row_mut(i));
            vec_mat_into(&s.normed, &layer.key, keys.row_mut(i));
            vec_mat_into(&s.normed, &layer.value, values.row_mut(i));
        }
        for i in 0..m {
            attend(cfg, qs.row(i), &keys, &values, None, &mut s.scores, &mut s.attn);
            vec_mat_into(&s.attn, &layer.output, &mut s.proj);
            for (t, p) in tokens.row_mut(i).iter_mut().zip(&s.proj) {
                *t += p;
            }
            feed_forward(cfg, layer, tokens.row_mut(i), &mut s);
        }
        caches.push(LayerCache { keys, values });
    }

    let rows: Vec<Vec<f64>> = (0..queries.rows())
        .into_par_iter()
        .map(|qi| {
            let mut s = Scratch::new(cfg, m + 1);
            let mut buf = vec![0.0; d_in];
            let mut token = vec![0.0; d];
            input_token(weights, &stats, feature_scale, queries.row(qi), &mut buf, &mut token);
            for (layer, cache) in weights.layers.iter().zip(&caches) {
                layer_norm(&token, &layer.norm1_gain, &layer.norm1_bias, cfg.layer_norm_eps, &mut s.normed);
                vec_mat_into(&s.normed, &layer.query, &mut s.q);
                vec_mat_into(&s.normed, &layer.key, &mut s.k);
                vec_mat_into(&s.normed, &layer.value, &mut s.v);
                attend(
                    cfg,
                    &s.q,
                    &cache.keys,
                    &cache.values,
                    Some((&s.k, &s.v)),
                    &mut s.scores,
                    &mut s.attn,
                );
                vec_mat_into(&s.attn, &layer.output, &mut s.proj);
                for (t, p) in token.iter_mut().zip(&s.proj) {
                    *t += p;
                }
                feed_forward(cfg, layer, &mut token, &mut s);
            }
            token
        })
        .collect();

    let out = Matrix::from_vec(queries.rows(), d, rows.concat())?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::generate_synthetic_weights;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            f_max: 5,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            c_max: 3,
            layer_norm_eps: 1e-5,
        }
    }

    fn random_ctx(rng: &mut ChaCha8Rng, m: usize, d: usize, c: usize) -> Context {
        let data = (0..m * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels = (0..m).map(|i| i % c).collect();
        Context::new(Matrix::from_vec(m, d, data).unwrap(), labels).unwrap()
    }

    #[test]
    fn batch_independence_is_bitwise() {
        let cfg = cfg();
        let w = generate_synthetic_weights(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ctx = random_ctx(&mut rng, 7, 4, 3);
        let q = random_ctx(&mut rng, 5, 4, 1).features;
        let all = embed(&w, &cfg, &ctx, &q).unwrap();
        for i in 0..5 {
            let one = embed(&w, &cfg, &ctx, &q.select_rows(&[i])).unwrap();
            assert_eq!(one.row(0), all.row(i));
        }
    }

    #[test]
    fn errors() {
        let cfg = cfg();
        let w = generate_synthetic_weights(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let wide = random_ctx(&mut rng, 4, 6, 2);
        assert!(matches!(
            embed(&w, &cfg, &wide, &wide.features),
            Err(EncoderError::TooManyFeatures { d: 6, f_max: 5 })
        ));
        let many = random_ctx(&mut rng, 4, 2, 4);
        assert!(matches!(
            embed(&w, &cfg, &many, &many.features),
            Err(EncoderError::TooManyClasses { label: 3, c_max: 3 })
        ));
        let ctx = random_ctx(&mut rng, 4, 2, 2);
        let q = Matrix::zeros(1, 3);
        assert!(matches!(embed(&w, &cfg, &ctx, &q), Err(EncoderError::ShapeError(_))));
    }

    #[test]
    fn fold_policy_accepts_extra_classes() {
        let cfg = cfg();
        let w = generate_synthetic_weights(&cfg, 1).unwrap();
        let enc = TransformerEncoder::new(cfg, w).unwrap().with_label_policy(LabelPolicy::Fold);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ctx = random_ctx(&mut rng, 8, 2, 4);
        let folded = Context::new(ctx.features.clone(), ctx.labels.iter().map(|y| y % 3).collect()).unwrap();
        let a = enc.embed(&ctx, &ctx.features).unwrap();
        let b = enc.embed(&folded, &ctx.features).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_query_batch() {
        let cfg = cfg();
        let w = generate_synthetic_weights(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ctx = random_ctx(&mut rng, 3, 2, 2);
        let out = embed(&w, &cfg, &ctx, &Matrix::empty(2)).unwrap();
        assert_eq!((out.rows(), out.cols()), (0, 8));
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_191_990_607_477_6).abs() < 1e-12);
        assert!(gelu(-10.0).abs() < 1e-12);
    }
}
