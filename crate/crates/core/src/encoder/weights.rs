//! Encoder configuration, parameter tensors, the seeded synthetic weight
//! generator and the `PFNW` weight file format.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "PFNW"            4 bytes magic
//! version           u32, currently 1
//! header_len        u32
//! header            header_len bytes of UTF-8 JSON: every EncoderConfig
//!                   field plus "tensors": [{"name", "shape"}, ...]
//! payload           each tensor's f64 values, row-major, in manifest order
//! payload_len       u64, byte length of payload
//! ```

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::EncoderError;
use crate::numerics::Matrix;

pub const WEIGHT_FILE_MAGIC: &[u8; 4] = b"PFNW";
pub const WEIGHT_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Maximum number of input features; inputs are zero-padded to this width.
    pub f_max: usize,
    /// Embedding width D'.
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Maximum number of distinct context labels.
    pub c_max: usize,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            f_max: 100,
            d_model: 512,
            n_layers: 2,
            n_heads: 4,
            d_ff: 1024,
            c_max: 10,
            layer_norm_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |msg: &str| Err(EncoderError::InvalidConfig(msg.to_owned()));
        if self.f_max < 1 {
            return bad("f_max must be >= 1");
        }
        if self.c_max < 2 {
            return bad("c_max must be >= 2");
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("d_model, n_heads and d_ff must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if !(self.layer_norm_eps.is_finite() && self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Ordered (name, shape) manifest of every tensor for this config.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out = vec![
            ("input_projection".to_owned(), vec![self.f_max, d]),
            ("label_embedding".to_owned(), vec![self.c_max, d]),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.extend([
                (p("attn.query"), vec![d, d]),
                (p("attn.key"), vec![d, d]),
                (p("attn.value"), vec![d, d]),
                (p("attn.output"), vec![d, d]),
                (p("norm1.gain"), vec![d]),
                (p("norm1.bias"), vec![d]),
                (p("norm2.gain"), vec![d]),
                (p("norm2.bias"), vec![d]),
                (p("ff.in"), vec![d, self.d_ff]),
                (p("ff.in_bias"), vec![self.d_ff]),
                (p("ff.out"), vec![self.d_ff, d]),
                (p("ff.out_bias"), vec![d]),
            ]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
    pub output: Matrix,
    pub norm1_gain: Vec<f64>,
    pub norm1_bias: Vec<f64>,
    pub norm2_gain: Vec<f64>,
    pub norm2_bias: Vec<f64>,
    pub ff_in: Matrix,
    pub ff_in_bias: Vec<f64>,
    pub ff_out: Matrix,
    pub ff_out_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    /// f_max x d_model.
    pub input_projection: Matrix,
    /// c_max x d_model, one row per context label.
    pub label_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
}

impl EncoderWeights {
    /// Flat tensor buffers in manifest order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            self.input_projection.as_slice(),
            self.label_embedding.as_slice(),
        ];
        for l in &self.layers {
            out.extend([
                l.query.as_slice(),
                l.key.as_slice(),
                l.value.as_slice(),
                l.output.as_slice(),
                &l.norm1_gain[..],
                &l.norm1_bias[..],
                &l.norm2_gain[..],
                &l.norm2_bias[..],
                l.ff_in.as_slice(),
                &l.ff_in_bias[..],
                l.ff_out.as_slice(),
                &l.ff_out_bias[..],
            ]);
        }
        out
    }

    /// Rebuilds weights from buffers laid out as `cfg.manifest()`.
    pub fn from_tensors(cfg: &EncoderConfig, buffers: Vec<Vec<f64>>) -> Result<Self, EncoderError> {
        let manifest = cfg.manifest();
        if buffers.len() != manifest.len() {
            return Err(EncoderError::ShapeError(format!(
                "expected {} tensors, got {}",
                manifest.len(),
                buffers.len()
            )));
        }
        for ((name, shape), buf) in manifest.iter().zip(&buffers) {
            let n: usize = shape.iter().product();
            if buf.len() != n {
                return Err(EncoderError::ShapeError(format!(
                    "tensor {name} has {} values, expected {n}",
                    buf.len()
                )));
            }
        }
        let mut bufs = buffers.into_iter();
        let mut mat = |rows: usize, cols: usize| -> Result<Matrix, EncoderError> {
            Ok(Matrix::from_vec(rows, cols, bufs.next().unwrap())?)
        };
        let input_projection = mat(cfg.f_max, cfg.d_model)?;
        let label_embedding = mat(cfg.c_max, cfg.d_model)?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        let d = cfg.d_model;
        for _ in 0..cfg.n_layers {
            let query = mat(d, d)?;
            let key = mat(d, d)?;
            let value = mat(d, d)?;
            let output = mat(d, d)?;
            let norm1_gain = mat(1, d)?.into_vec();
            let norm1_bias = mat(1, d)?.into_vec();
            let norm2_gain = mat(1, d)?.into_vec();
            let norm2_bias = mat(1, d)?.into_vec();
            let ff_in = mat(d, cfg.d_ff)?;
            let ff_in_bias = mat(1, cfg.d_ff)?.into_vec();
            let ff_out = mat(cfg.d_ff, d)?;
            let ff_out_bias = mat(1, d)?.into_vec();
            layers.push(LayerWeights {
                query,
                key,
                value,
                output,
                norm1_gain,
                norm1_bias,
                norm2_gain,
                norm2_bias,
                ff_in,
                ff_in_bias,
                ff_out,
                ff_out_bias,
            });
        }
        Ok(Self {
            input_projection,
            label_embedding,
            layers,
        })
    }

    /// Checks tensor shapes against `cfg`.
    pub fn check_shapes(&self, cfg: &EncoderConfig) -> Result<(), EncoderError> {
        let manifest = cfg.manifest();
        let tensors = self.tensors();
        if manifest.len() != tensors.len() {
            return Err(EncoderError::ShapeError(format!(
                "weights have {} tensors, config expects {}",
                tensors.len(),
                manifest.len()
            )));
        }
        for ((name, shape), t) in manifest.iter().zip(tensors) {
            if t.len() != shape.iter().product::<usize>() {
                return Err(EncoderError::ShapeError(format!("tensor {name} has the wrong size")));
            }
        }
        let d = cfg.d_model;
        let ok = self.input_projection.rows() == cfg.f_max
            && self.input_projection.cols() == d
            && self.label_embedding.rows() == cfg.c_max
            && self.label_embedding.cols() == d
            && self.layers.iter().all(|l| {
                l.query.rows() == d
                    && l.query.cols() == d
                    && l.ff_in.rows() == d
                    && l.ff_in.cols() == cfg.d_ff
            });
        if ok {
            Ok(())
        } else {
            Err(EncoderError::ShapeError("tensor shapes disagree with config".into()))
        }
    }
}

/// Fills every weight matrix from `N(0, 1/fan_in)` using a ChaCha8 stream
/// seeded with `seed`, in manifest order. Layer-norm gains are 1 and all
/// biases 0. Label embeddings are lookups of a one-hot input, so their
/// fan-in is 1.
pub fn generate_synthetic_weights(cfg: &EncoderConfig, seed: u64) -> Result<EncoderWeights, EncoderError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let buffers = cfg
        .manifest()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            if name.ends_with("gain") {
                vec![1.0; n]
            } else if name.ends_with("bias") {
                vec![0.0; n]
            } else {
                let fan_in = if name == "label_embedding" { 1 } else { shape[0] };
                let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).unwrap();
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
        })
        .collect();
    EncoderWeights::from_tensors(cfg, buffers)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    #[serde(flatten)]
    config: EncoderConfig,
    tensors: Vec<TensorEntry>,
}

/// Serializes weights into the `PFNW` format.
pub fn write_weights<W: Write>(
    cfg: &EncoderConfig,
    weights: &EncoderWeights,
    mut out: W,
) -> Result<(), EncoderError> {
    cfg.validate()?;
    weights.check_shapes(cfg)?;
    let header = Header {
        config: cfg.clone(),
        tensors: cfg
            .manifest()
            .into_iter()
            .map(|(name, shape)| TensorEntry { name, shape })
            .collect(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| EncoderError::CorruptWeights(e.to_string()))?;
    out.write_all(WEIGHT_FILE_MAGIC)?;
    out.write_all(&WEIGHT_FILE_VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    let mut payload_len = 0u64;
    let mut buf = Vec::new();
    for t in weights.tensors() {
        buf.clear();
        for v in t {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
        payload_len += buf.len() as u64;
    }
    out.write_all(&payload_len.to_le_bytes())?;
    out.flush()?;
    Ok(())
}

pub fn save_weights(
    cfg: &EncoderConfig,
    weights: &EncoderWeights,
    path: impl AsRef<Path>,
) -> Result<(), EncoderError> {
    let file = std::fs::File::create(path)?;
    write_weights(cfg, weights, std::io::BufWriter::new(file))
}

fn corrupt(msg: impl Into<String>) -> EncoderError {
    EncoderError::CorruptWeights(msg.into())
}

/// Parses a complete `PFNW` byte buffer.
pub fn read_weights(bytes: &[u8]) -> Result<(EncoderConfig, EncoderWeights), EncoderError> {
    if bytes.len() < 4 || &bytes[..4] != WEIGHT_FILE_MAGIC {
        return Err(EncoderError::NotAWeightFile);
    }
    let u32_at = |pos: usize| -> Result<u32, EncoderError> {
        bytes
            .get(pos..pos + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| corrupt("truncated preamble"))
    };
    let version = u32_at(4)?;
    if version != WEIGHT_FILE_VERSION {
        return Err(EncoderError::VersionError(version));
    }
    let header_len = u32_at(8)? as usize;
    let header_end = 12usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt("header extends past end of file"))?;
    let header: Header = serde_json::from_slice(&bytes[12..header_end])
        .map_err(|e| corrupt(format!("bad header: {e}")))?;
    let cfg = header.config;
    cfg.validate().map_err(|e| corrupt(e.to_string()))?;

    let manifest = cfg.manifest();
    if manifest.len() != header.tensors.len()
        || manifest
            .iter()
            .zip(&header.tensors)
            .any(|((name, shape), t)| *name != t.name || *shape != t.shape)
    {
        return Err(corrupt("tensor manifest disagrees with config"));
    }
    let expected_payload: usize = manifest
        .iter()
        .map(|(_, s)| s.iter().product::<usize>() * 8)
        .sum();
    let rest = &bytes[header_end..];
    if rest.len() != expected_payload + 8 {
        return Err(corrupt(format!(
            "expected {} payload bytes plus trailer, found {}",
            expected_payload,
            rest.len()
        )));
    }
    let trailer = u64::from_le_bytes(rest[expected_payload..].try_into().unwrap());
    if trailer != expected_payload as u64 {
        return Err(corrupt(format!(
            "trailer declares {trailer} payload bytes, manifest implies {expected_payload}"
        )));
    }
    let mut pos = 0;
    let mut buffers = Vec::with_capacity(manifest.len());
    for (name, shape) in &manifest {
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = rest[pos..pos + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(corrupt(format!("non-finite value in {name}")));
        }
        pos += n * 8;
        buffers.push(vals);
    }
    let weights = EncoderWeights::from_tensors(&cfg, buffers)?;
    Ok((cfg, weights))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<(EncoderConfig, EncoderWeights), EncoderError> {
    let bytes = std::fs::read(path)?;
    read_weights(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig {
            f_max: 6,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            c_max: 3,
            layer_norm_eps: 1e-5,
        }
    }

    fn encode(cfg: &EncoderConfig, w: &EncoderWeights) -> Vec<u8> {
        let mut buf = Vec::new();
        write_weights(cfg, w, &mut buf).unwrap();
        buf
    }

    #[test]
    fn synthetic_weights_are_deterministic() {
        let cfg = small();
        let a = generate_synthetic_weights(&cfg, 7).unwrap();
        let b = generate_synthetic_weights(&cfg, 7).unwrap();
        let c = generate_synthetic_weights(&cfg, 8).unwrap();
        assert_eq!(encode(&cfg, &a), encode(&cfg, &b));
        assert_ne!(a, c);
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let cfg = small();
        let w = generate_synthetic_weights(&cfg, 3).unwrap();
        let bytes = encode(&cfg, &w);
        let (cfg2, w2) = read_weights(&bytes).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(encode(&cfg2, &w2), bytes);
    }

    #[test]
    fn header_echoes_config() {
        let cfg = EncoderConfig {
            layer_norm_eps: 1.2345678901234567e-6,
            ..small()
        };
        let w = generate_synthetic_weights(&cfg, 1).unwrap();
        let (back, _) = read_weights(&encode(&cfg, &w)).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.layer_norm_eps.to_bits(), cfg.layer_norm_eps.to_bits());
    }

    #[test]
    fn corruption_classes() {
        let cfg = small();
        let w = generate_synthetic_weights(&cfg, 3).unwrap();
        let good = encode(&cfg, &w);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(read_weights(&bad_magic), Err(EncoderError::NotAWeightFile)));
        assert!(matches!(read_weights(b"PF"), Err(EncoderError::NotAWeightFile)));

        let mut bad_version = good.clone();
        bad_version[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(read_weights(&bad_version), Err(EncoderError::VersionError(2))));

        let truncated = &good[..good.len() - 20];
        assert!(matches!(read_weights(truncated), Err(EncoderError::CorruptWeights(_))));

        let mut bad_trailer = good.clone();
        let n = bad_trailer.len();
        bad_trailer[n - 8..].copy_from_slice(&1u64.to_le_bytes());
        assert!(matches!(read_weights(&bad_trailer), Err(EncoderError::CorruptWeights(_))));

        let mut extra = good.clone();
        extra.extend_from_slice(&[0u8; 8]);
        assert!(matches!(read_weights(&extra), Err(EncoderError::CorruptWeights(_))));
    }

    #[test]
    fn invalid_config() {
        let cfg = EncoderConfig {
            n_heads: 3,
            ..small()
        };
        assert!(matches!(
            generate_synthetic_weights(&cfg, 0),
            Err(EncoderError::InvalidConfig(_))
        ));
    }
}
