//! Cross-attention aggregation of a variable-length bag of patch features
//! into a fixed set of `m` tokens.
//!
//! Each layer is a pre-norm block:
//!
//! ```text
//! kv  = LN_patch(F)
//! x  += MultiHead(LN_query(x) W_Q, kv W_K, kv W_V) W_O
//! x  += GELU(LN_ff(x) W_1) W_2
//! ```
//!
//! starting from the learned query tokens. Attention is
//! `softmax(q kᵀ / sqrt(d / h))` per head with no positional encoding, so the
//! output does not depend on patch order. A row-wise affine projector
//! (`x P_w + P_b`) follows the last layer. Matrices multiply from the right
//! (`x W`), so `W_Q` is `d × d`, `W_1` is `d × d_ff` and `W_2` is `d_ff × d`.
//!
//! # Weight file format
//!
//! Magic `WSIW`, version `u32 = 1`, then `layers, heads, d, d_ff, m` as `u32`,
//! then `f32` tensors, all little-endian and row-major, in this order:
//!
//! 1. query tokens `m × d`
//! 2. per layer: `ln_query.scale`, `ln_query.bias`, `ln_patch.scale`,
//!    `ln_patch.bias` (each `d`), `w_q`, `w_k`, `w_v`, `w_o` (each `d × d`),
//!    `ln_ff.scale`, `ln_ff.bias` (each `d`), `w_1` (`d × d_ff`),
//!    `w_2` (`d_ff × d`)
//! 3. projector `proj_w` (`d × d`), `proj_b` (`d`)

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binfmt::{self, Reader, Writer};
use crate::corpus::PatchFeatures;
use crate::error::{Error, Result};
use crate::linalg::{gemm_into, matmul, Mat, View};

const WEIGHT_MAGIC: &[u8; 4] = b"WSIW";
const LN_EPS: f64 = 1e-5;
const SEED_RANGE: f32 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregatorConfig {
    /// Number of query tokens.
    pub m: usize,
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub d_ff: usize,
}

impl AggregatorConfig {
    /// `m = 32`, two layers, eight heads, `d_ff = 4d`.
    pub fn with_dim(d: usize) -> Self {
        Self {
            m: 32,
            layers: 2,
            heads: 8,
            d,
            d_ff: 4 * d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.layers == 0 || self.heads == 0 || self.d == 0 || self.d_ff == 0 {
            return Err(Error::ShapeMismatch(format!(
                "aggregator dimensions must be positive: {self:?}"
            )));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::ShapeMismatch(format!(
                "d = {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub scale: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LayerNorm {
    pub fn identity(d: usize) -> Self {
        Self {
            scale: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln_query: LayerNorm,
    pub ln_patch: LayerNorm,
    pub w_q: Vec<f32>,
    pub w_k: Vec<f32>,
    pub w_v: Vec<f32>,
    pub w_o: Vec<f32>,
    pub ln_ff: LayerNorm,
    pub w_1: Vec<f32>,
    pub w_2: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorWeights {
    pub config: AggregatorConfig,
    /// `m × d` learned query tokens.
    pub queries: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub proj_w: Vec<f32>,
    pub proj_b: Vec<f32>,
}

impl AggregatorWeights {
    /// Deterministic weights: every matrix, query token and bias uniform in
    /// `[-0.05, 0.05]` from a ChaCha8 stream, layer-norm scales 1 and biases 0.
    pub fn seeded(seed: u64, config: AggregatorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |len: usize| -> Vec<f32> {
            (0..len)
                .map(|_| rng.random_range(-SEED_RANGE..=SEED_RANGE))
                .collect()
        };
        let AggregatorConfig { m, d, d_ff, .. } = config;
        let queries = uniform(m * d);
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                ln_query: LayerNorm::identity(d),
                ln_patch: LayerNorm::identity(d),
                w_q: uniform(d * d),
                w_k: uniform(d * d),
                w_v: uniform(d * d),
                w_o: uniform(d * d),
                ln_ff: LayerNorm::identity(d),
                w_1: uniform(d * d_ff),
                w_2: uniform(d_ff * d),
            })
            .collect();
        let proj_w = uniform(d * d);
        let proj_b = uniform(d);
        Ok(Self {
            config,
            queries,
            layers,
            proj_w,
            proj_b,
        })
    }

    /// Checks every tensor length against the config and that all values are finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let AggregatorConfig {
            m, d, d_ff, layers, ..
        } = self.config;
        let check = |name: String, t: &[f32], len: usize| -> Result<()> {
            if t.len() != len {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: expected {len} values, found {}",
                    t.len()
                )));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::BadWeightFile(format!("{name} has non-finite values")));
            }
            Ok(())
        };
        check("queries".into(), &self.queries, m * d)?;
        if self.layers.len() != layers {
            return Err(Error::ShapeMismatch(format!(
                "expected {layers} layers, found {}",
                self.layers.len()
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t, len) in [
                ("ln_query.scale", &l.ln_query.scale, d),
                ("ln_query.bias", &l.ln_query.bias, d),
                ("ln_patch.scale", &l.ln_patch.scale, d),
                ("ln_patch.bias", &l.ln_patch.bias, d),
                ("w_q", &l.w_q, d * d),
                ("w_k", &l.w_k, d * d),
                ("w_v", &l.w_v, d * d),
                ("w_o", &l.w_o, d * d),
                ("ln_ff.scale", &l.ln_ff.scale, d),
                ("ln_ff.bias", &l.ln_ff.bias, d),
                ("w_1", &l.w_1, d * d_ff),
                ("w_2", &l.w_2, d_ff * d),
            ] {
                check(format!("layer {i} {name}"), t, len)?;
            }
        }
        check("proj_w".into(), &self.proj_w, d * d)?;
        check("proj_b".into(), &self.proj_b, d)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let c = self.config;
        let mut w = Writer::new(WEIGHT_MAGIC);
        for v in [c.layers, c.heads, c.d, c.d_ff, c.m] {
            w.u32(binfmt::to_u32(v, "aggregator dimension")?);
        }
        w.f32s(&self.queries);
        for l in &self.layers {
            for t in [
                &l.ln_query.scale,
                &l.ln_query.bias,
                &l.ln_patch.scale,
                &l.ln_patch.bias,
                &l.w_q,
                &l.w_k,
                &l.w_v,
                &l.w_o,
                &l.ln_ff.scale,
                &l.ln_ff.bias,
                &l.w_1,
                &l.w_2,
            ] {
                w.f32s(t);
            }
        }
        w.f32s(&self.proj_w);
        w.f32s(&self.proj_b);
        Ok(w.buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |e: Error| match e {
            Error::TruncatedFile(msg) => Error::BadWeightFile(msg),
            Error::BadMagic(what) => Error::BadWeightFile(format!("bad magic in {what}")),
            other => other,
        };
        let mut r = Reader::new(bytes, "weight file");
        r.header(WEIGHT_MAGIC).map_err(bad)?;
        let mut dims = [0usize; 5];
        for v in &mut dims {
            *v = r.u32().map_err(bad)? as usize;
        }
        let [layers, heads, d, d_ff, m] = dims;
        let config = AggregatorConfig {
            m,
            layers,
            heads,
            d,
            d_ff,
        };
        config.validate()?;
        let mut read = |len: usize| r.f32s(len).map_err(bad);
        let queries = read(m * d)?;
        let mut layer_weights = Vec::with_capacity(layers);
        for _ in 0..layers {
            let ln_query = LayerNorm {
                scale: read(d)?,
                bias: read(d)?,
            };
            let ln_patch = LayerNorm {
                scale: read(d)?,
                bias: read(d)?,
            };
            let w_q = read(d * d)?;
            let w_k = read(d * d)?;
            let w_v = read(d * d)?;
            let w_o = read(d * d)?;
            let ln_ff = LayerNorm {
                scale: read(d)?,
                bias: read(d)?,
            };
            let w_1 = read(d * d_ff)?;
            let w_2 = read(d_ff * d)?;
            layer_weights.push(LayerWeights {
                ln_query,
                ln_patch,
                w_q,
                w_k,
                w_v,
                w_o,
                ln_ff,
                w_1,
                w_2,
            });
        }
        let proj_w = read(d * d)?;
        let proj_b = read(d)?;
        if r.remaining() != 0 {
            return Err(Error::BadWeightFile(format!(
                "{} trailing bytes",
                r.remaining()
            )));
        }
        let weights = Self {
            config,
            queries,
            layers: layer_weights,
            proj_w,
            proj_b,
        };
        weights.validate()?;
        Ok(weights)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&binfmt::read_file(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binfmt::write_atomic(path, &self.encode()?)
    }
}

/// Aggregated representation of one slide: projected `m × d` tokens plus the
/// unit-norm retrieval embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    m: usize,
    d: usize,
    tokens: Vec<f32>,
    pooled: Vec<f32>,
}

impl TokenSet {
    /// Builds a token set whose retrieval embedding is pooled from `tokens`.
    pub fn new(m: usize, d: usize, tokens: Vec<f32>) -> Result<Self> {
        let pooled = pool(m, d, &tokens)?;
        Ok(Self {
            m,
            d,
            tokens,
            pooled,
        })
    }

    /// Builds a token set with an externally computed retrieval embedding,
    /// which is re-normalised.
    pub fn with_embedding(m: usize, d: usize, tokens: Vec<f32>, embedding: &[f32]) -> Result<Self> {
        check_matrix(m, d, &tokens)?;
        if embedding.len() != d {
            return Err(Error::ShapeMismatch(format!(
                "embedding has {} values, expected {d}",
                embedding.len()
            )));
        }
        Ok(Self {
            m,
            d,
            tokens,
            pooled: normalize(embedding)?,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn tokens(&self) -> &[f32] {
        &self.tokens
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.tokens[i * self.d..(i + 1) * self.d]
    }

    pub fn pooled(&self) -> &[f32] {
        &self.pooled
    }
}

fn check_matrix(m: usize, d: usize, tokens: &[f32]) -> Result<()> {
    if m == 0 || d == 0 || tokens.len() != m * d {
        return Err(Error::ShapeMismatch(format!(
            "{m}x{d} token matrix with {} values",
            tokens.len()
        )));
    }
    if let Some(pos) = tokens.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue {
            row: pos / d,
            col: pos % d,
        });
    }
    Ok(())
}

fn normalize(v: &[f32]) -> Result<Vec<f32>> {
    let norm = v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|&x| (f64::from(x) / norm) as f32).collect())
}

/// Mean over the `m` rows, then L2-normalised.
pub fn pool(m: usize, d: usize, tokens: &[f32]) -> Result<Vec<f32>> {
    check_matrix(m, d, tokens)?;
    let mut mean = vec![0.0f64; d];
    for row in tokens.chunks_exact(d) {
        for (acc, &v) in mean.iter_mut().zip(row) {
            *acc += f64::from(v);
        }
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroVector);
    }
    // mean/m then divide by its norm; the 1/m factor cancels.
    Ok(mean.iter().map(|v| (v / norm) as f32).collect())
}

/// Which token matrix feeds the retrieval embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolSource {
    /// Tokens after the projector (what the generator consumes).
    #[default]
    Projected,
    /// Tokens straight out of the transformer blocks.
    Contextualized,
}

/// Full forward-pass output, including per-layer, per-head attention maps.
#[derive(Debug, Clone)]
pub struct Forward {
    pub m: usize,
    pub d: usize,
    pub contextualized: Vec<f32>,
    pub projected: Vec<f32>,
    /// `attention[layer][head]` is an `m × n` row-major matrix.
    pub attention: Vec<Vec<Vec<f64>>>,
}

impl Forward {
    pub fn token_set(&self, source: PoolSource) -> Result<TokenSet> {
        match source {
            PoolSource::Projected => TokenSet::new(self.m, self.d, self.projected.clone()),
            PoolSource::Contextualized => {
                let embedding = pool(self.m, self.d, &self.contextualized)?;
                TokenSet::with_embedding(self.m, self.d, self.projected.clone(), &embedding)
            }
        }
    }
}

struct PreparedLayer {
    ln_query: (Vec<f64>, Vec<f64>),
    ln_patch: (Vec<f64>, Vec<f64>),
    w_q: Mat,
    w_k: Mat,
    w_v: Mat,
    w_o: Mat,
    ln_ff: (Vec<f64>, Vec<f64>),
    w_1: Mat,
    w_2: Mat,
}

/// Weights converted once for repeated forward passes. `Sync`, so one
/// instance can serve concurrent `aggregate` calls.
pub struct Aggregator {
    config: AggregatorConfig,
    queries: Mat,
    layers: Vec<PreparedLayer>,
    proj_w: Mat,
    proj_b: Vec<f64>,
    pool_source: PoolSource,
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

fn layer_norm(x: &Mat, (scale, bias): &(Vec<f64>, Vec<f64>)) -> Mat {
    let mut out = x.clone();
    let d = x.cols as f64;
    for row in out.rows_mut() {
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for ((v, s), b) in row.iter_mut().zip(scale).zip(bias) {
            *v = (*v - mean) * inv * s + b;
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn softmax_rows(scores: &mut Mat) {
    for row in scores.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

impl Aggregator {
    pub fn new(weights: &AggregatorWeights) -> Result<Self> {
        weights.validate()?;
        let AggregatorConfig { m, d, d_ff, .. } = weights.config;
        let ln = |l: &LayerNorm| (to_f64(&l.scale), to_f64(&l.bias));
        let layers = weights
            .layers
            .iter()
            .map(|l| PreparedLayer {
                ln_query: ln(&l.ln_query),
                ln_patch: ln(&l.ln_patch),
                w_q: Mat::from_f32(d, d, &l.w_q),
                w_k: Mat::from_f32(d, d, &l.w_k),
                w_v: Mat::from_f32(d, d, &l.w_v),
                w_o: Mat::from_f32(d, d, &l.w_o),
                ln_ff: ln(&l.ln_ff),
                w_1: Mat::from_f32(d, d_ff, &l.w_1),
                w_2: Mat::from_f32(d_ff, d, &l.w_2),
            })
            .collect();
        Ok(Self {
            config: weights.config,
            queries: Mat::from_f32(m, d, &weights.queries),
            layers,
            proj_w: Mat::from_f32(d, d, &weights.proj_w),
            proj_b: to_f64(&weights.proj_b),
            pool_source: PoolSource::Projected,
        })
    }

    pub fn with_pool_source(mut self, source: PoolSource) -> Self {
        self.pool_source = source;
        self
    }

    pub fn config(&self) -> &AggregatorConfig {
        &self.config
    }

    pub fn aggregate(&self, features: &PatchFeatures) -> Result<TokenSet> {
        self.forward(features)?.token_set(self.pool_source)
    }

    pub fn forward(&self, features: &PatchFeatures) -> Result<Forward> {
        let AggregatorConfig { m, d, heads, .. } = self.config;
        if features.d() != d {
            return Err(Error::DimensionMismatch {
                id: "patch features".into(),
                expected: d,
                found: features.d(),
            });
        }
        let n = features.n();
        let head_dim = self.config.head_dim();
        let scale = 1.0 / (head_dim as f64).sqrt();
        let patches = Mat::from_f32(n, d, features.data());

        let mut x = self.queries.clone();
        let mut attention = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let kv = layer_norm(&patches, &layer.ln_patch);
            let q = matmul(&layer_norm(&x, &layer.ln_query), &layer.w_q);
            let k = matmul(&kv, &layer.w_k);
            let v = matmul(&kv, &layer.w_v);

            let mut heads_out = Mat::zeros(m, d);
            let mut layer_maps = Vec::with_capacity(heads);
            for h in 0..heads {
                let cols = h * head_dim;
                let mut scores = Mat::zeros(m, n);
                gemm_into(
                    View::columns(&q, cols, head_dim),
                    View::columns(&k, cols, head_dim).t(),
                    &mut scores,
                    0,
                );
                scores.data.iter_mut().for_each(|s| *s *= scale);
                softmax_rows(&mut scores);
                gemm_into(
                    View::of(&scores),
                    View::columns(&v, cols, head_dim),
                    &mut heads_out,
                    cols,
                );
                layer_maps.push(scores.data);
            }
            attention.push(layer_maps);
            x.add_assign(&matmul(&heads_out, &layer.w_o));

            let mut hidden = matmul(&layer_norm(&x, &layer.ln_ff), &layer.w_1);
            hidden.data.iter_mut().for_each(|v| *v = gelu(*v));
            x.add_assign(&matmul(&hidden, &layer.w_2));

            if !x.all_finite() {
                return Err(Error::NonFiniteIntermediate(format!("layer {li}")));
            }
        }

        let mut projected = matmul(&x, &self.proj_w);
        for row in projected.rows_mut() {
            for (v, b) in row.iter_mut().zip(&self.proj_b) {
                *v += b;
            }
        }
        if !projected.all_finite() {
            return Err(Error::NonFiniteIntermediate("projector".into()));
        }
        let contextualized = x.to_f32();
        let projected = projected.to_f32();
        if contextualized.iter().chain(&projected).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteIntermediate("f32 conversion".into()));
        }
        Ok(Forward {
            m,
            d,
            contextualized,
            projected,
            attention,
        })
    }
}

/// One-shot forward pass; prefer [`Aggregator`] when aggregating many slides.
pub fn aggregate(features: &PatchFeatures, weights: &AggregatorWeights) -> Result<TokenSet> {
    Aggregator::new(weights)?.aggregate(features)
}

const TOKENS_MAGIC: &[u8; 4] = b"WSIT";

/// Token sets for many records, keyed by record id.
///
/// On disk: magic `WSIT`, version 1, `count`, `m`, `d` (`u32`), then per
/// record a `u32`-length-prefixed UTF-8 id, `m·d` token values and the `d`
/// retrieval embedding values (`f32`), all little-endian.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TokenStore {
    entries: Vec<(String, TokenSet)>,
    by_id: std::collections::HashMap<String, usize>,
}

impl TokenStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, tokens: TokenSet) -> Result<()> {
        let id = id.into();
        if let Some((_, first)) = self.entries.first() {
            if (first.m, first.d) != (tokens.m, tokens.d) {
                return Err(Error::ShapeMismatch(format!(
                    "token set for {id:?} is {}x{}, store holds {}x{}",
                    tokens.m, tokens.d, first.m, first.d
                )));
            }
        }
        if self.by_id.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        self.by_id.insert(id.clone(), self.entries.len());
        self.entries.push((id, tokens));
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&TokenSet> {
        self.by_id.get(id).map(|&i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TokenSet)> {
        self.entries.iter().map(|(id, t)| (id.as_str(), t))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let (m, d) = self
            .entries
            .first()
            .map(|(_, t)| (t.m, t.d))
            .unwrap_or((0, 0));
        let mut w = Writer::new(TOKENS_MAGIC);
        w.u32(binfmt::to_u32(self.entries.len(), "token store size")?);
        w.u32(binfmt::to_u32(m, "m")?);
        w.u32(binfmt::to_u32(d, "d")?);
        for (id, t) in &self.entries {
            w.string(id);
            w.f32s(&t.tokens);
            w.f32s(&t.pooled);
        }
        Ok(w.buf)
    }

    pub fn decode(bytes: &[u8], what: &str) -> Result<Self> {
        let mut r = Reader::new(bytes, what);
        r.header(TOKENS_MAGIC)?;
        let count = r.u32()? as usize;
        let m = r.u32()? as usize;
        let d = r.u32()? as usize;
        let mut store = Self::new();
        for _ in 0..count {
            let id = r.string()?;
            let tokens = r.f32s(m.saturating_mul(d))?;
            let pooled = r.f32s(d)?;
            check_matrix(m, d, &tokens)?;
            if pooled.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue { row: 0, col: 0 });
            }
            store.insert(id, TokenSet { m, d, tokens, pooled })?;
        }
        if r.remaining() != 0 {
            return Err(Error::TruncatedFile(format!("{what}: trailing bytes")));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binfmt::write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&binfmt::read_file(path)?, &path.display().to_string())
    }
}
