//! Neural n-gram language model: embed the previous `context` tokens, concatenate,
//! one tanh hidden layer, softmax over the vocabulary. Gradients are derived by hand.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sample::SampleBatch;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model dims: {0}")]
    InvalidDims(String),
    #[error("token id {token} out of range for vocab size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("sequence length {seq_len} leaves no prediction position for context {context}")]
    SequenceTooShort { seq_len: usize, context: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Number of conditioning tokens.
    pub context: usize,
    pub hidden_dim: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<(), ModelError> {
        let d = self;
        if d.vocab_size == 0 || d.embed_dim == 0 || d.context == 0 || d.hidden_dim == 0 {
            return Err(ModelError::InvalidDims(format!("all dims must be >= 1, got {d:?}")));
        }
        Ok(())
    }

    pub fn embeddings_len(&self) -> usize {
        self.vocab_size * self.embed_dim
    }

    pub fn input_dim(&self) -> usize {
        self.context * self.embed_dim
    }

    pub fn param_count(&self) -> usize {
        let (v, d, n, h) = (self.vocab_size, self.embed_dim, self.context, self.hidden_dim);
        v * d + n * d * h + h + h * v + v
    }
}

/// Parameters of the n-gram model. Matrices are row-major:
/// `embeddings[token * d + k]`, `w1[i * h + j]`, `w2[j * vocab + v]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub embeddings: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Gradients share the parameter layout.
pub type Gradients = ModelParams;

pub const FIELD_NAMES: [&str; 5] = ["embeddings", "w1", "b1", "w2", "b2"];

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            dims,
            embeddings: vec![0.0; dims.embeddings_len()],
            w1: vec![0.0; dims.input_dim() * dims.hidden_dim],
            b1: vec![0.0; dims.hidden_dim],
            w2: vec![0.0; dims.hidden_dim * dims.vocab_size],
            b2: vec![0.0; dims.vocab_size],
        }
    }

    /// Weights ~ N(0, 1/fan_in), biases zero. Embeddings are a one-hot lookup, so fan_in = 1.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self, ModelError> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(dims);
        let mut fill = |buf: &mut [f64], fan_in: usize| {
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("finite std");
            for x in buf.iter_mut() {
                *x = normal.sample(&mut rng);
            }
        };
        fill(&mut p.embeddings, 1);
        fill(&mut p.w1, dims.input_dim());
        fill(&mut p.w2, dims.hidden_dim);
        Ok(p)
    }

    pub fn fields(&self) -> [(&'static str, &[f64]); 5] {
        [
            (FIELD_NAMES[0], &self.embeddings),
            (FIELD_NAMES[1], &self.w1),
            (FIELD_NAMES[2], &self.b1),
            (FIELD_NAMES[3], &self.w2),
            (FIELD_NAMES[4], &self.b2),
        ]
    }

    pub fn fields_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 5] {
        [
            (FIELD_NAMES[0], &mut self.embeddings),
            (FIELD_NAMES[1], &mut self.w1),
            (FIELD_NAMES[2], &mut self.b1),
            (FIELD_NAMES[3], &mut self.w2),
            (FIELD_NAMES[4], &mut self.b2),
        ]
    }

    pub fn len(&self) -> usize {
        self.fields().iter().map(|(_, f)| f.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self
                .fields()
                .iter()
                .zip(other.fields().iter())
                .all(|((_, a), (_, b))| a.len() == b.len())
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> + '_ {
        self.embeddings
            .iter()
            .chain(&self.w1)
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.embeddings
            .iter_mut()
            .chain(self.w1.iter_mut())
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn from_flat(dims: ModelDims, flat: &[f64]) -> Result<Self, ModelError> {
        if flat.len() != dims.param_count() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} values, got {}",
                dims.param_count(),
                flat.len()
            )));
        }
        let mut p = Self::zeros(dims);
        for (dst, src) in p.iter_mut().zip(flat) {
            *dst = *src;
        }
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.iter().zip(other.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self += scale * other`
    pub fn axpy(&mut self, scale: f64, other: &Self) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in self.iter_mut() {
            *a *= factor;
        }
    }

    /// Flat binary checkpoint: five little-endian u64 header words
    /// (vocab, embed, context, hidden, parameter count) then every value as f64 LE
    /// in field order.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        write_header(&mut w, &self.dims)?;
        for x in self.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, ModelError> {
        let dims = read_header(&mut r)?;
        let flat = read_f64s(&mut r, dims.param_count())?;
        Self::from_flat(dims, &flat)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(f)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

pub(crate) fn write_header<W: Write>(w: &mut W, dims: &ModelDims) -> Result<(), ModelError> {
    for v in [dims.vocab_size, dims.embed_dim, dims.context, dims.hidden_dim, dims.param_count()] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_header<R: Read>(r: &mut R) -> Result<ModelDims, ModelError> {
    let mut words = [0u64; 5];
    for w in words.iter_mut() {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        *w = u64::from_le_bytes(buf);
    }
    let dims = ModelDims {
        vocab_size: words[0] as usize,
        embed_dim: words[1] as usize,
        context: words[2] as usize,
        hidden_dim: words[3] as usize,
    };
    dims.validate()?;
    if dims.param_count() as u64 != words[4] {
        return Err(ModelError::Checkpoint(format!(
            "header parameter count {} does not match dims ({})",
            words[4],
            dims.param_count()
        )));
    }
    Ok(dims)
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>, ModelError> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn check_batch(dims: &ModelDims, batch: &SampleBatch) -> Result<(), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if batch.seq_len() <= dims.context {
        return Err(ModelError::SequenceTooShort { seq_len: batch.seq_len(), context: dims.context });
    }
    if let Some(max) = batch.max_token() {
        if max as usize >= dims.vocab_size {
            return Err(ModelError::TokenOutOfRange { token: max, vocab: dims.vocab_size });
        }
    }
    Ok(())
}

/// Scratch space for one prediction position.
struct Workspace {
    input: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    d_hidden: Vec<f64>,
    d_input: Vec<f64>,
}

impl Workspace {
    fn new(dims: &ModelDims) -> Self {
        Self {
            input: vec![0.0; dims.input_dim()],
            hidden: vec![0.0; dims.hidden_dim],
            logits: vec![0.0; dims.vocab_size],
            d_hidden: vec![0.0; dims.hidden_dim],
            d_input: vec![0.0; dims.input_dim()],
        }
    }
}

/// Fills `ws.input`, `ws.hidden`, `ws.logits`; returns `-log softmax(logits)[target]`.
fn forward_position(p: &ModelParams, ctx: &[u32], target: u32, ws: &mut Workspace) -> f64 {
    let d = p.dims.embed_dim;
    let h = p.dims.hidden_dim;
    let v = p.dims.vocab_size;
    for (c, &tok) in ctx.iter().enumerate() {
        let t = tok as usize;
        ws.input[c * d..(c + 1) * d].copy_from_slice(&p.embeddings[t * d..(t + 1) * d]);
    }
    ws.hidden.copy_from_slice(&p.b1);
    for (i, &x) in ws.input.iter().enumerate() {
        let row = &p.w1[i * h..(i + 1) * h];
        for (acc, w) in ws.hidden.iter_mut().zip(row) {
            *acc += x * w;
        }
    }
    for a in ws.hidden.iter_mut() {
        *a = a.tanh();
    }
    ws.logits.copy_from_slice(&p.b2);
    for (j, &a) in ws.hidden.iter().enumerate() {
        let row = &p.w2[j * v..(j + 1) * v];
        for (acc, w) in ws.logits.iter_mut().zip(row) {
            *acc += a * w;
        }
    }
    let max = ws.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = ws.logits.iter().map(|z| (z - max).exp()).sum();
    max + sum_exp.ln() - ws.logits[target as usize]
}

/// Mean next-token cross-entropy (nats) over positions `context..seq_len` of every row.
pub fn loss(params: &ModelParams, batch: &SampleBatch) -> Result<f64, ModelError> {
    check_batch(&params.dims, batch)?;
    let n = params.dims.context;
    let mut ws = Workspace::new(&params.dims);
    let mut total = 0.0;
    let mut count = 0usize;
    for row in batch.rows() {
        for t in n..row.len() {
            total += forward_position(params, &row[t - n..t], row[t], &mut ws);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Loss and its exact gradient with respect to every parameter.
pub fn loss_and_grad(params: &ModelParams, batch: &SampleBatch) -> Result<(f64, Gradients), ModelError> {
    check_batch(&params.dims, batch)?;
    let dims = params.dims;
    let (d, h, v, n) = (dims.embed_dim, dims.hidden_dim, dims.vocab_size, dims.context);
    let positions = batch.num_rows() * (batch.seq_len() - n);
    let inv = 1.0 / positions as f64;
    let mut g = ModelParams::zeros(dims);
    let mut ws = Workspace::new(&dims);
    let mut total = 0.0;
    for row in batch.rows() {
        for t in n..row.len() {
            let ctx = &row[t - n..t];
            let target = row[t] as usize;
            total += forward_position(params, ctx, row[t], &mut ws);

            // d loss / d logits = (softmax - onehot) / positions, reusing the logits buffer.
            let max = ws.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum_exp = 0.0;
            for z in ws.logits.iter_mut() {
                *z = (*z - max).exp();
                sum_exp += *z;
            }
            let norm = inv / sum_exp;
            for z in ws.logits.iter_mut() {
                *z *= norm;
            }
            ws.logits[target] -= inv;
            let d_logits = &ws.logits;

            for (gb, dl) in g.b2.iter_mut().zip(d_logits) {
                *gb += dl;
            }
            for j in 0..h {
                let a = ws.hidden[j];
                let w_row = &params.w2[j * v..(j + 1) * v];
                let g_row = &mut g.w2[j * v..(j + 1) * v];
                let mut dh = 0.0;
                for k in 0..v {
                    g_row[k] += a * d_logits[k];
                    dh += w_row[k] * d_logits[k];
                }
                // through tanh
                ws.d_hidden[j] = dh * (1.0 - a * a);
            }
            for (gb, dz) in g.b1.iter_mut().zip(&ws.d_hidden) {
                *gb += dz;
            }
            for i in 0..dims.input_dim() {
                let x = ws.input[i];
                let w_row = &params.w1[i * h..(i + 1) * h];
                let g_row = &mut g.w1[i * h..(i + 1) * h];
                let mut dx = 0.0;
                for j in 0..h {
                    g_row[j] += x * ws.d_hidden[j];
                    dx += w_row[j] * ws.d_hidden[j];
                }
                ws.d_input[i] = dx;
            }
            for (c, &tok) in ctx.iter().enumerate() {
                let t = tok as usize;
                let g_row = &mut g.embeddings[t * d..(t + 1) * d];
                for (ge, dx) in g_row.iter_mut().zip(&ws.d_input[c * d..(c + 1) * d]) {
                    *ge += dx;
                }
            }
        }
    }
    Ok((total * inv, g))
}
