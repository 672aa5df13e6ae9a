//! Minimal Llama-style decoder: RMSNorm, rotary multi-head causal attention,
//! SiLU-gated MLP. Used for calibration forwards and perplexity.
//!
//! Each block exposes four activation capture sites, one per distinct linear
//! input: `attn_in` (shared by q, k, v), `o_in`, `mlp_in` (shared by gate and
//! up) and `down_in`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::container::{Container, TensorRecord, KIND_KEY};
use crate::error::{Error, Result};
use crate::masker::MaskSet;
use crate::tensor::Matrix;

pub const DEFAULT_MAX_SEQ_LEN: usize = 2048;
pub const DEFAULT_ROPE_THETA: f64 = 10_000.0;
pub const DEFAULT_RMS_EPS: f64 = 1e-5;
pub const MODEL_KIND: &str = "model";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SiteKind {
    AttnIn,
    OIn,
    MlpIn,
    DownIn,
}

impl SiteKind {
    pub const ALL: [SiteKind; 4] = [
        SiteKind::AttnIn,
        SiteKind::OIn,
        SiteKind::MlpIn,
        SiteKind::DownIn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SiteKind::AttnIn => "attn_in",
            SiteKind::OIn => "o_in",
            SiteKind::MlpIn => "mlp_in",
            SiteKind::DownIn => "down_in",
        }
    }
}

impl FromStr for SiteKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SiteKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown site kind `{s}`")))
    }
}

/// A capture site: block index plus site kind. Displays as `blk.<n>.<kind>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SiteId {
    pub block: usize,
    pub kind: SiteKind,
}

impl SiteId {
    pub fn new(block: usize, kind: SiteKind) -> Self {
        Self { block, kind }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blk.{}.{}", self.block, self.kind.as_str())
    }
}

impl FromStr for SiteId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("malformed site id `{s}`"));
        let rest = s.strip_prefix("blk.").ok_or_else(bad)?;
        let (block, kind) = rest.split_once('.').ok_or_else(bad)?;
        Ok(SiteId {
            block: block.parse().map_err(|_| bad())?,
            kind: kind.parse()?,
        })
    }
}

/// The seven prunable linear projections of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Proj {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Proj {
    pub const ALL: [Proj; 7] = [
        Proj::Q,
        Proj::K,
        Proj::V,
        Proj::O,
        Proj::Gate,
        Proj::Up,
        Proj::Down,
    ];

    /// The capture site whose activations feed this projection.
    pub fn site_kind(self) -> SiteKind {
        match self {
            Proj::Q | Proj::K | Proj::V => SiteKind::AttnIn,
            Proj::O => SiteKind::OIn,
            Proj::Gate | Proj::Up => SiteKind::MlpIn,
            Proj::Down => SiteKind::DownIn,
        }
    }

    pub fn weight_name(self, block: usize) -> String {
        let leaf = match self {
            Proj::Q => "self_attn.q_proj",
            Proj::K => "self_attn.k_proj",
            Proj::V => "self_attn.v_proj",
            Proj::O => "self_attn.o_proj",
            Proj::Gate => "mlp.gate_proj",
            Proj::Up => "mlp.up_proj",
            Proj::Down => "mlp.down_proj",
        };
        format!("model.layers.{block}.{leaf}.weight")
    }
}

pub const EMBED_NAME: &str = "model.embed_tokens.weight";
pub const FINAL_NORM_NAME: &str = "model.norm.weight";
pub const LM_HEAD_NAME: &str = "lm_head.weight";

pub fn attn_norm_name(block: usize) -> String {
    format!("model.layers.{block}.input_layernorm.weight")
}

pub fn mlp_norm_name(block: usize) -> String {
    format!("model.layers.{block}.post_attention_layernorm.weight")
}

/// Decoder topology. `n_layers` counts blocks (L+1 in layer-index terms).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub tie_embeddings: bool,
    pub rms_eps: f64,
    pub rope_theta: f64,
    pub max_seq_len: usize,
}

impl ModelGraph {
    pub fn new(
        vocab_size: usize,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        d_ff: usize,
    ) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::Shape(format!(
                "d_model {d_model} is not divisible by n_heads {n_heads}"
            )));
        }
        let graph = Self {
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            d_head: d_model / n_heads,
            d_ff,
            tie_embeddings: false,
            rms_eps: DEFAULT_RMS_EPS,
            rope_theta: DEFAULT_ROPE_THETA,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
        };
        graph.validate()?;
        Ok(graph)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::Shape(format!(
                "n_heads {} x d_head {} != d_model {}",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        if self.d_head % 2 != 0 {
            return Err(Error::Shape(format!(
                "rotary embeddings need an even d_head, got {}",
                self.d_head
            )));
        }
        if self.vocab_size == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::Shape("zero-sized model dimension".into()));
        }
        Ok(())
    }

    pub fn sites(&self) -> Vec<SiteId> {
        (0..self.n_layers)
            .flat_map(|b| SiteKind::ALL.into_iter().map(move |k| SiteId::new(b, k)))
            .collect()
    }

    /// Input feature count (C_in) observed at a site.
    pub fn site_width(&self, kind: SiteKind) -> usize {
        match kind {
            SiteKind::DownIn => self.d_ff,
            _ => self.d_model,
        }
    }

    /// `[out, in]` shape of a projection.
    pub fn proj_shape(&self, proj: Proj) -> (usize, usize) {
        match proj {
            Proj::Q | Proj::K | Proj::V | Proj::O => (self.d_model, self.d_model),
            Proj::Gate | Proj::Up => (self.d_ff, self.d_model),
            Proj::Down => (self.d_model, self.d_ff),
        }
    }

    /// Every prunable weight as (block, projection, name).
    pub fn prunable(&self) -> Vec<(usize, Proj, String)> {
        (0..self.n_layers)
            .flat_map(|b| Proj::ALL.into_iter().map(move |p| (b, p, p.weight_name(b))))
            .collect()
    }

    /// All expected tensors with their shapes.
    pub fn expected_tensors(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out = vec![
            (EMBED_NAME.to_string(), vec![self.vocab_size, d]),
            (FINAL_NORM_NAME.to_string(), vec![d]),
        ];
        if !self.tie_embeddings {
            out.push((LM_HEAD_NAME.to_string(), vec![self.vocab_size, d]));
        }
        for b in 0..self.n_layers {
            out.push((attn_norm_name(b), vec![d]));
            out.push((mlp_norm_name(b), vec![d]));
            for p in Proj::ALL {
                let (o, i) = self.proj_shape(p);
                out.push((p.weight_name(b), vec![o, i]));
            }
        }
        out
    }

    pub fn write_metadata(&self, c: &mut Container) {
        c.set_meta(KIND_KEY, MODEL_KIND);
        c.set_meta("vocab_size", self.vocab_size.to_string());
        c.set_meta("d_model", self.d_model.to_string());
        c.set_meta("n_layers", self.n_layers.to_string());
        c.set_meta("n_heads", self.n_heads.to_string());
        c.set_meta("d_head", self.d_head.to_string());
        c.set_meta("d_ff", self.d_ff.to_string());
        c.set_meta("tie_embeddings", self.tie_embeddings.to_string());
        c.set_meta("rms_eps", self.rms_eps.to_string());
        c.set_meta("rope_theta", self.rope_theta.to_string());
        c.set_meta("max_seq_len", self.max_seq_len.to_string());
    }

    pub fn from_metadata(c: &Container) -> Result<Self> {
        fn num<T: FromStr>(c: &Container, key: &str) -> Result<T> {
            let raw = c.require_meta(key)?;
            raw.parse()
                .map_err(|_| Error::Header(format!("metadata `{key}` is not numeric: `{raw}`")))
        }
        fn opt<T: FromStr>(c: &Container, key: &str, default: T) -> Result<T> {
            match c.meta(key) {
                Some(_) => num(c, key),
                None => Ok(default),
            }
        }
        let tie = match c.require_meta("tie_embeddings")? {
            "true" => true,
            "false" => false,
            other => {
                return Err(Error::Header(format!(
                    "tie_embeddings must be \"true\" or \"false\", got `{other}`"
                )))
            }
        };
        let graph = Self {
            vocab_size: num(c, "vocab_size")?,
            d_model: num(c, "d_model")?,
            n_layers: num(c, "n_layers")?,
            n_heads: num(c, "n_heads")?,
            d_head: num(c, "d_head")?,
            d_ff: num(c, "d_ff")?,
            tie_embeddings: tie,
            rms_eps: opt(c, "rms_eps", DEFAULT_RMS_EPS)?,
            rope_theta: opt(c, "rope_theta", DEFAULT_ROPE_THETA)?,
            max_seq_len: opt(c, "max_seq_len", DEFAULT_MAX_SEQ_LEN)?,
        };
        graph.validate()?;
        Ok(graph)
    }

    /// Uniform(-1/√fan_in, 1/√fan_in) weights and unit norms, seeded.
    pub fn random_weights(&self, seed: u64) -> WeightStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = Container::new();
        self.write_metadata(&mut c);
        for (name, shape) in self.expected_tensors() {
            let data = if shape.len() == 1 {
                vec![1.0; shape[0]]
            } else {
                let bound = 1.0 / (shape[1] as f32).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                (0..shape[0] * shape[1]).map(|_| dist.sample(&mut rng)).collect()
            };
            c.insert(name, TensorRecord::new(shape, data).expect("consistent shape"))
                .expect("unique names");
        }
        WeightStore {
            graph: self.clone(),
            container: c,
        }
    }
}

/// Model weights validated against their graph.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore {
    graph: ModelGraph,
    container: Container,
}

impl WeightStore {
    pub fn from_container(container: Container) -> Result<Self> {
        let graph = ModelGraph::from_metadata(&container)?;
        for (name, shape) in graph.expected_tensors() {
            let rec = container.require(&name)?;
            if rec.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "`{name}` has shape {:?}, expected {shape:?}",
                    rec.shape()
                )));
            }
        }
        Ok(Self { graph, container })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.container.save(path)
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    pub fn container(&self) -> &Container {
        &self.container
    }

    pub fn into_container(self) -> Container {
        self.container
    }

    pub fn tensor(&self, name: &str) -> Result<&TensorRecord> {
        self.container.require(name)
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        self.tensor(name)?.to_matrix()
    }

    /// Replaces a tensor's values, keeping its shape.
    pub fn set_tensor(&mut self, name: &str, data: Vec<f32>) -> Result<()> {
        let shape = self.tensor(name)?.shape().to_vec();
        let rec = TensorRecord::new(shape, data)?;
        self.container.replace(name, rec);
        Ok(())
    }

    /// Sets an arbitrary metadata key; graph keys are rejected.
    pub fn set_meta(&mut self, key: &str, value: &str) -> Result<()> {
        let mut probe = Container::new();
        self.graph.write_metadata(&mut probe);
        if probe.meta(key).is_some() {
            return Err(Error::Invalid(format!("`{key}` is a model-graph key")));
        }
        self.container.set_meta(key, value);
        Ok(())
    }

    fn slice(&self, name: &str) -> &[f32] {
        self.container
            .get(name)
            .expect("validated at construction")
            .data()
    }
}

/// One token sequence tagged with its language.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub language: String,
}

impl TokenBatch {
    pub fn new(language: impl Into<String>, ids: Vec<u32>) -> Self {
        Self {
            ids,
            language: language.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// One token per UTF-8 byte (vocabulary of 256).
pub fn byte_tokenize(text: &str) -> TokenBatch {
    TokenBatch::new("", text.bytes().map(u32::from).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteActivations {
    pub site: SiteId,
    pub matrix: Matrix,
}

/// Receives the input activations of every capture site during a forward pass.
pub trait ActivationSink {
    fn observe(&mut self, site: SiteId, activations: &Matrix) -> Result<()>;
}

/// Discards all activations.
pub struct NoCapture;

impl ActivationSink for NoCapture {
    fn observe(&mut self, _: SiteId, _: &Matrix) -> Result<()> {
        Ok(())
    }
}

impl ActivationSink for Vec<SiteActivations> {
    fn observe(&mut self, site: SiteId, activations: &Matrix) -> Result<()> {
        self.push(SiteActivations {
            site,
            matrix: activations.clone(),
        });
        Ok(())
    }
}

/// `x · wᵀ` for a weight stored row-major as `[out, x.cols()]`.
fn linear(x: &Matrix, w: &[f32], out: usize) -> Matrix {
    debug_assert_eq!(w.len(), out * x.cols());
    let mut y = Matrix::zeros(x.rows(), out);
    for i in 0..x.rows() {
        let xi = x.row(i);
        for (o, wr) in y.row_mut(i).iter_mut().zip(w.chunks_exact(x.cols())) {
            *o = crate::tensor::dot(xi, wr) as f32;
        }
    }
    y
}

fn rms_norm(x: &Matrix, weight: &[f32], eps: f64) -> Matrix {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = x.row(i);
        let ms = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        for ((o, &v), &g) in out.row_mut(i).iter_mut().zip(row).zip(weight) {
            *o = (v as f64 * inv * g as f64) as f32;
        }
    }
    out
}

/// Rotate-half rotary embedding applied in place to every head of `x`.
fn apply_rope(x: &mut Matrix, n_heads: usize, d_head: usize, theta: f64) {
    let half = d_head / 2;
    let inv_freq: Vec<f64> = (0..half)
        .map(|i| theta.powf(-((2 * i) as f64) / d_head as f64))
        .collect();
    for pos in 0..x.rows() {
        let row = x.row_mut(pos);
        for h in 0..n_heads {
            let head = &mut row[h * d_head..(h + 1) * d_head];
            for i in 0..half {
                let (sin, cos) = (pos as f64 * inv_freq[i]).sin_cos();
                let a = head[i] as f64;
                let b = head[i + half] as f64;
                head[i] = (a * cos - b * sin) as f32;
                head[i + half] = (b * cos + a * sin) as f32;
            }
        }
    }
}

fn causal_attention(q: &Matrix, k: &Matrix, v: &Matrix, n_heads: usize, d_head: usize) -> Matrix {
    let t = q.rows();
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut out = Matrix::zeros(t, n_heads * d_head);
    let mut weights = vec![0.0f64; t];
    for h in 0..n_heads {
        let cols = h * d_head..(h + 1) * d_head;
        for i in 0..t {
            let qi = &q.row(i)[cols.clone()];
            let mut max = f64::NEG_INFINITY;
            for (j, w) in weights.iter_mut().enumerate().take(i + 1) {
                *w = crate::tensor::dot(qi, &k.row(j)[cols.clone()]) * scale;
                max = max.max(*w);
            }
            let mut total = 0.0;
            for w in weights.iter_mut().take(i + 1) {
                *w = (*w - max).exp();
                total += *w;
            }
            let dst = &mut out.row_mut(i)[cols.clone()];
            for (d, o) in dst.iter_mut().enumerate() {
                let acc: f64 = (0..=i)
                    .map(|j| weights[j] * v.row(j)[h * d_head + d] as f64)
                    .sum();
                *o = (acc / total) as f32;
            }
        }
    }
    out
}

fn add_in_place(h: &mut Matrix, delta: &Matrix) {
    for (a, b) in h.as_mut_slice().iter_mut().zip(delta.as_slice()) {
        *a += *b;
    }
}

fn silu(x: f32) -> f32 {
    let x = x as f64;
    (x / (1.0 + (-x).exp())) as f32
}

/// Runs the decoder over one sequence, returning `[tokens, vocab]` logits.
/// Capture sites are reported to `sink` in block order.
pub fn forward_with_sink(
    weights: &WeightStore,
    tokens: &[u32],
    sink: &mut dyn ActivationSink,
) -> Result<Matrix> {
    let g = weights.graph();
    if tokens.len() > g.max_seq_len {
        return Err(Error::Shape(format!(
            "sequence of {} tokens exceeds maximum {}",
            tokens.len(),
            g.max_seq_len
        )));
    }
    let d = g.d_model;
    let embed = weights.slice(EMBED_NAME);
    let mut h = Matrix::zeros(tokens.len(), d);
    for (i, &tok) in tokens.iter().enumerate() {
        if tok as usize >= g.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: tok,
                vocab: g.vocab_size,
            });
        }
        let t = tok as usize;
        h.row_mut(i).copy_from_slice(&embed[t * d..(t + 1) * d]);
    }

    for b in 0..g.n_layers {
        let x = rms_norm(&h, weights.slice(&attn_norm_name(b)), g.rms_eps);
        sink.observe(SiteId::new(b, SiteKind::AttnIn), &x)?;
        let mut q = linear(&x, weights.slice(&Proj::Q.weight_name(b)), d);
        let mut k = linear(&x, weights.slice(&Proj::K.weight_name(b)), d);
        let v = linear(&x, weights.slice(&Proj::V.weight_name(b)), d);
        apply_rope(&mut q, g.n_heads, g.d_head, g.rope_theta);
        apply_rope(&mut k, g.n_heads, g.d_head, g.rope_theta);
        let attn = causal_attention(&q, &k, &v, g.n_heads, g.d_head);
        sink.observe(SiteId::new(b, SiteKind::OIn), &attn)?;
        add_in_place(&mut h, &linear(&attn, weights.slice(&Proj::O.weight_name(b)), d));

        let x = rms_norm(&h, weights.slice(&mlp_norm_name(b)), g.rms_eps);
        sink.observe(SiteId::new(b, SiteKind::MlpIn), &x)?;
        let gate = linear(&x, weights.slice(&Proj::Gate.weight_name(b)), g.d_ff);
        let mut up = linear(&x, weights.slice(&Proj::Up.weight_name(b)), g.d_ff);
        for (u, &gv) in up.as_mut_slice().iter_mut().zip(gate.as_slice()) {
            *u *= silu(gv);
        }
        sink.observe(SiteId::new(b, SiteKind::DownIn), &up)?;
        add_in_place(&mut h, &linear(&up, weights.slice(&Proj::Down.weight_name(b)), d));
    }

    let h = rms_norm(&h, weights.slice(FINAL_NORM_NAME), g.rms_eps);
    let head = if g.tie_embeddings {
        embed
    } else {
        weights.slice(LM_HEAD_NAME)
    };
    Ok(linear(&h, head, g.vocab_size))
}

/// Forward pass with an optional mask; returns logits and all `4 × n_layers`
/// site activations.
pub fn forward(
    weights: &WeightStore,
    batch: &TokenBatch,
    mask: Option<&MaskSet>,
) -> Result<(Matrix, Vec<SiteActivations>)> {
    let masked;
    let weights = match mask {
        Some(m) => {
            masked = crate::masker::apply(weights, m)?;
            &masked
        }
        None => weights,
    };
    let mut captures = Vec::with_capacity(4 * weights.graph().n_layers);
    let logits = forward_with_sink(weights, &batch.ids, &mut captures)?;
    Ok((logits, captures))
}

/// Sum of next-token negative log-likelihoods and the number of predicted positions.
pub fn sequence_nll(logits: &Matrix, tokens: &[u32]) -> (f64, usize) {
    let mut total = 0.0;
    for pos in 0..tokens.len().saturating_sub(1) {
        let row = logits.row(pos);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
        total += lse - row[tokens[pos + 1] as usize] as f64;
    }
    (total, tokens.len().saturating_sub(1))
}

/// Per-corpus NLL totals: (sum of NLL, predicted token count).
pub fn corpus_nll(
    weights: &WeightStore,
    corpus: &[TokenBatch],
    mask: Option<&MaskSet>,
) -> Result<(f64, usize)> {
    if corpus.is_empty() {
        return Err(Error::Insufficient("empty corpus".into()));
    }
    if let Some(short) = corpus.iter().find(|b| b.len() < 2) {
        return Err(Error::Insufficient(format!(
            "sequence of length {} cannot be scored (need at least 2 tokens)",
            short.len()
        )));
    }
    let masked;
    let weights = match mask {
        Some(m) => {
            masked = crate::masker::apply(weights, m)?;
            &masked
        }
        None => weights,
    };
    let parts = corpus
        .par_iter()
        .map(|b| {
            let logits = forward_with_sink(weights, &b.ids, &mut NoCapture)?;
            Ok(sequence_nll(&logits, &b.ids))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts
        .into_iter()
        .fold((0.0, 0), |(s, n), (ps, pn)| (s + ps, n + pn)))
}

/// exp(mean next-token NLL) pooled over every predicted position of the corpus.
pub fn perplexity(
    weights: &WeightStore,
    corpus: &[TokenBatch],
    mask: Option<&MaskSet>,
) -> Result<f64> {
    let (total, count) = corpus_nll(weights, corpus, mask)?;
    Ok((total / count as f64).exp())
}

/// Per-language pooled perplexity, keyed by language tag.
pub fn perplexity_by_language(
    weights: &WeightStore,
    corpus: &[TokenBatch],
    mask: Option<&MaskSet>,
) -> Result<BTreeMap<String, f64>> {
    let mut groups: BTreeMap<String, Vec<TokenBatch>> = BTreeMap::new();
    for b in corpus {
        groups.entry(b.language.clone()).or_default().push(b.clone());
    }
    groups
        .into_iter()
        .map(|(lang, batches)| Ok((lang, perplexity(weights, &batches, mask)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> WeightStore {
        ModelGraph::new(16, 8, 2, 2, 12).unwrap().random_weights(7)
    }

    #[test]
    fn tokenizer_is_bytewise() {
        assert!(byte_tokenize("").is_empty());
        assert_eq!(byte_tokenize("ab").ids, vec![97, 98]);
        assert_eq!(byte_tokenize("é").ids, vec![195, 169]);
    }

    #[test]
    fn site_ids_round_trip_through_strings() {
        for site in ModelGraph::new(16, 8, 3, 2, 12).unwrap().sites() {
            assert_eq!(site.to_string().parse::<SiteId>().unwrap(), site);
        }
        assert!("layer.0.attn_in".parse::<SiteId>().is_err());
        assert!("blk.0.foo".parse::<SiteId>().is_err());
    }

    #[test]
    fn single_token_captures_have_one_row() {
        let w = tiny();
        let (logits, caps) = forward(&w, &TokenBatch::new("en", vec![3]), None).unwrap();
        assert_eq!(logits.shape(), (1, 16));
        assert_eq!(caps.len(), 8);
        for c in &caps {
            assert_eq!(c.matrix.rows(), 1);
            assert_eq!(c.matrix.cols(), w.graph().site_width(c.site.kind));
        }
    }

    #[test]
    fn token_out_of_range_rejected() {
        let w = tiny();
        assert!(matches!(
            forward(&w, &TokenBatch::new("en", vec![16]), None),
            Err(Error::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn over_long_sequence_rejected() {
        let mut g = ModelGraph::new(16, 8, 1, 2, 12).unwrap();
        g.max_seq_len = 4;
        let w = g.random_weights(1);
        assert!(forward(&w, &TokenBatch::new("en", vec![0; 5]), None).is_err());
    }

    #[test]
    fn uniform_logits_give_vocab_perplexity() {
        let mut w = tiny();
        let n = 16 * 8;
        w.set_tensor(LM_HEAD_NAME, vec![0.0; n]).unwrap();
        let corpus = vec![TokenBatch::new("en", vec![1, 2, 3, 4, 5])];
        let ppl = perplexity(&w, &corpus, None).unwrap();
        assert!((ppl - 16.0).abs() < 1e-6, "{ppl}");
    }

    #[test]
    fn confident_correct_logits_give_unit_perplexity() {
        let tokens = [0u32, 2, 1];
        let mut logits = Matrix::zeros(3, 4);
        logits.row_mut(0)[2] = 1e4;
        logits.row_mut(1)[1] = 1e4;
        let (nll, n) = sequence_nll(&logits, &tokens);
        assert_eq!(n, 2);
        assert!(((nll / n as f64).exp() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn perplexity_input_errors() {
        let w = tiny();
        assert!(perplexity(&w, &[], None).is_err());
        assert!(perplexity(&w, &[TokenBatch::new("en", vec![1])], None).is_err());
    }

    #[test]
    fn perplexity_ignores_corpus_order() {
        let w = tiny();
        let a = TokenBatch::new("en", vec![1, 5, 9, 2]);
        let b = TokenBatch::new("en", vec![3, 3, 7]);
        let c = TokenBatch::new("en", vec![0, 15, 4, 4, 8]);
        let p1 = perplexity(&w, &[a.clone(), b.clone(), c.clone()], None).unwrap();
        let p2 = perplexity(&w, &[c, a, b], None).unwrap();
        assert!((p1 - p2).abs() <= 1e-12 * p1);
    }

    #[test]
    fn metadata_round_trip_and_validation() {
        let w = tiny();
        let back = WeightStore::from_container(w.container().clone()).unwrap();
        assert_eq!(back.graph(), w.graph());

        let mut c = w.container().clone();
        c.set_meta("n_heads", "3");
        assert!(WeightStore::from_container(c).is_err());

        let mut c = Container::new();
        w.graph().write_metadata(&mut c);
        assert!(matches!(
            WeightStore::from_container(c),
            Err(Error::MissingTensor(_))
        ));
    }
}
