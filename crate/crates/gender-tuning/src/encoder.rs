//! Small bidirectional transformer encoder with token/position embeddings,
//! an MLM head, and a sequence-classification head.
//!
//! The model is a parameter map plus a config; forward passes are either
//! recorded on an autodiff [`Tape`] (training) or computed as plain tensor
//! math (evaluation). `ModelState` is immutable during evaluation, so
//! read-only passes may run in parallel across sentences.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::corpus::{TokenSequence, Vocab};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Position-0 ([CLS]) hidden state.
    Cls,
    /// Mean over all positions.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub num_classes: usize,
    pub pooling: Pooling,
}

impl EncoderConfig {
    /// Desk-scale default: trains in seconds, large enough to pick up
    /// co-occurrence signal.
    pub fn desk_scale(vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_len: 24,
            num_classes: 2,
            pooling: Pooling::Cls,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.vocab_size < 5 || self.max_len < 2 || self.n_layers == 0 || self.d_ff == 0 {
            return Err(Error::Config("degenerate encoder dimensions".into()));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameter names and shapes in creation order.
    fn inventory(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut inv = vec![
            ("embed.tok".to_string(), vec![self.vocab_size, d]),
            ("embed.pos".to_string(), vec![self.max_len, d]),
        ];
        for i in 0..self.n_layers {
            for mat in ["wq", "wk", "wv", "wo"] {
                inv.push((format!("layer{i}.attn.{mat}"), vec![d, d]));
                inv.push((format!("layer{i}.attn.{}", mat.replace('w', "b")), vec![1, d]));
            }
            inv.push((format!("layer{i}.ln1.gamma"), vec![1, d]));
            inv.push((format!("layer{i}.ln1.beta"), vec![1, d]));
            inv.push((format!("layer{i}.ffn.w1"), vec![d, self.d_ff]));
            inv.push((format!("layer{i}.ffn.b1"), vec![1, self.d_ff]));
            inv.push((format!("layer{i}.ffn.w2"), vec![self.d_ff, d]));
            inv.push((format!("layer{i}.ffn.b2"), vec![1, d]));
            inv.push((format!("layer{i}.ln2.gamma"), vec![1, d]));
            inv.push((format!("layer{i}.ln2.beta"), vec![1, d]));
        }
        inv.push(("mlm.w".to_string(), vec![d, self.vocab_size]));
        inv.push(("mlm.b".to_string(), vec![1, self.vocab_size]));
        inv.push(("cls.w".to_string(), vec![d, self.num_classes]));
        inv.push(("cls.b".to_string(), vec![1, self.num_classes]));
        inv
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelState {
    pub config: EncoderConfig,
    params: BTreeMap<String, Tensor>,
}

impl ModelState {
    /// Seeded init: weight matrices uniform(-0.05, 0.05), biases zero,
    /// layer-norm gamma one / beta zero.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<ModelState> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in config.inventory() {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".gamma") {
                vec![1.0; numel]
            } else if name.ends_with(".beta") || name.contains(".b") {
                vec![0.0; numel]
            } else {
                (0..numel).map(|_| rng.gen_range(-0.05..0.05)).collect()
            };
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(ModelState { config, params })
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor {
        self.params.get_mut(name).expect("unknown parameter")
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Register every parameter as a trainable tape leaf, in name order.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let ids = self
            .params
            .iter()
            .map(|(name, value)| (name.clone(), tape.leaf(value.clone())))
            .collect();
        BoundModel { config: self.config.clone(), ids }
    }

    /// Hidden states `[len x d_model]`, deterministic in (params, seq).
    pub fn encode(&self, seq: &TokenSequence) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let hidden = bound.encode(&mut tape, seq)?;
        Ok(tape.value(hidden).clone())
    }

    /// Hidden states plus per-layer-per-head attention rows (each `[len x len]`).
    pub fn encode_with_attention(&self, seq: &TokenSequence) -> Result<(Tensor, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let (hidden, attn) = bound.encode_with_attention(&mut tape, seq)?;
        Ok((
            tape.value(hidden).clone(),
            attn.into_iter().map(|id| tape.value(id).clone()).collect(),
        ))
    }

    /// MLM logits `[|positions| x vocab]` computed from hidden states.
    pub fn mlm_logits(&self, hidden: &Tensor, positions: &[usize]) -> Result<Tensor> {
        let (len, d) = hidden.dims2();
        for &p in positions {
            if p >= len {
                return Err(Error::IndexOutOfRange { op: "mlm_logits", index: p, bound: len });
            }
        }
        let w = self.param("mlm.w");
        let b = self.param("mlm.b");
        let v = self.config.vocab_size;
        let mut data = Vec::with_capacity(positions.len() * v);
        for &p in positions {
            let row = &hidden.data()[p * d..(p + 1) * d];
            for j in 0..v {
                let mut acc = b.data()[j];
                for (k, &h) in row.iter().enumerate() {
                    acc += h * w.data()[k * v + j];
                }
                data.push(acc);
            }
        }
        Tensor::matrix(positions.len(), v, data)
    }

    fn pooled(&self, hidden: &Tensor) -> Vec<f64> {
        let (len, d) = hidden.dims2();
        match self.config.pooling {
            Pooling::Cls => hidden.data()[..d].to_vec(),
            Pooling::Mean => {
                let mut out = vec![0.0; d];
                for i in 0..len {
                    for j in 0..d {
                        out[j] += hidden.data()[i * d + j];
                    }
                }
                for v in out.iter_mut() {
                    *v /= len as f64;
                }
                out
            }
        }
    }

    /// Classification logits (length `num_classes`) from pooled hidden state.
    pub fn cls_logits(&self, hidden: &Tensor) -> Result<Tensor> {
        let pooled = self.pooled(hidden);
        let w = self.param("cls.w");
        let b = self.param("cls.b");
        let c = self.config.num_classes;
        let mut out = b.data().to_vec();
        for (k, &h) in pooled.iter().enumerate() {
            for j in 0..c {
                out[j] += h * w.data()[k * c + j];
            }
        }
        Tensor::new(vec![c], out)
    }

    /// Pooled sentence representation (length `d_model`).
    pub fn sentence_embedding(&self, seq: &TokenSequence) -> Result<Tensor> {
        let hidden = self.encode(seq)?;
        Tensor::new(vec![self.config.d_model], self.pooled(&hidden))
    }

    /// Argmax class for a sequence; ties break to the lowest class index.
    pub fn classify(&self, seq: &TokenSequence) -> Result<usize> {
        let hidden = self.encode(seq)?;
        let logits = self.cls_logits(&hidden)?;
        Ok(argmax(logits.data()))
    }
}

/// First index of the maximum value; deterministic under ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Model parameters registered as leaves on one tape. Forward passes for
/// any number of sequences may be recorded against the same binding, so a
/// whole batch shares parameter nodes and one backward pass.
pub struct BoundModel {
    config: EncoderConfig,
    ids: BTreeMap<String, NodeId>,
}

impl BoundModel {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn node(&self, name: &str) -> NodeId {
        self.ids[name]
    }

    pub fn param_nodes(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(n, &id)| (n.as_str(), id))
    }

    pub fn encode(&self, tape: &mut Tape, seq: &TokenSequence) -> Result<NodeId> {
        Ok(self.encode_inner(tape, seq)?.0)
    }

    pub fn encode_with_attention(
        &self,
        tape: &mut Tape,
        seq: &TokenSequence,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        self.encode_inner(tape, seq)
    }

    fn encode_inner(&self, tape: &mut Tape, seq: &TokenSequence) -> Result<(NodeId, Vec<NodeId>)> {
        if seq.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        if seq.len() > self.config.max_len {
            return Err(Error::Validation(format!(
                "sequence length {} exceeds max_len {}",
                seq.len(),
                self.config.max_len
            )));
        }
        let len = seq.len();
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let tok = tape.gather_rows(self.node("embed.tok"), seq.ids.clone())?;
        let pos = tape.gather_rows(self.node("embed.pos"), (0..len).collect())?;
        let mut x = tape.add(tok, pos)?;

        let mut attn_probs = Vec::new();
        for i in 0..self.config.n_layers {
            let q0 = tape.matmul(x, self.node(&format!("layer{i}.attn.wq")))?;
            let q = tape.add_bias(q0, self.node(&format!("layer{i}.attn.bq")))?;
            let k0 = tape.matmul(x, self.node(&format!("layer{i}.attn.wk")))?;
            let k = tape.add_bias(k0, self.node(&format!("layer{i}.attn.bk")))?;
            let v0 = tape.matmul(x, self.node(&format!("layer{i}.attn.wv")))?;
            let v = tape.add_bias(v0, self.node(&format!("layer{i}.attn.bv")))?;

            let mut heads = Vec::with_capacity(self.config.n_heads);
            for h in 0..self.config.n_heads {
                let qh = tape.slice_cols(q, h * dh, dh)?;
                let kh = tape.slice_cols(k, h * dh, dh)?;
                let vh = tape.slice_cols(v, h * dh, dh)?;
                let kt = tape.transpose(kh);
                let scores = tape.matmul(qh, kt)?;
                let scaled = tape.scale(scores, scale);
                let probs = tape.softmax(scaled);
                attn_probs.push(probs);
                heads.push(tape.matmul(probs, vh)?);
            }
            let concat = tape.concat_cols(&heads)?;
            let proj0 = tape.matmul(concat, self.node(&format!("layer{i}.attn.wo")))?;
            let proj = tape.add_bias(proj0, self.node(&format!("layer{i}.attn.bo")))?;
            let res1 = tape.add(x, proj)?;
            let x1 = tape.layer_norm(
                res1,
                self.node(&format!("layer{i}.ln1.gamma")),
                self.node(&format!("layer{i}.ln1.beta")),
                LAYER_NORM_EPS,
            )?;

            let f0 = tape.matmul(x1, self.node(&format!("layer{i}.ffn.w1")))?;
            let f1 = tape.add_bias(f0, self.node(&format!("layer{i}.ffn.b1")))?;
            let act = tape.gelu(f1);
            let f2 = tape.matmul(act, self.node(&format!("layer{i}.ffn.w2")))?;
            let f3 = tape.add_bias(f2, self.node(&format!("layer{i}.ffn.b2")))?;
            let res2 = tape.add(x1, f3)?;
            x = tape.layer_norm(
                res2,
                self.node(&format!("layer{i}.ln2.gamma")),
                self.node(&format!("layer{i}.ln2.beta")),
                LAYER_NORM_EPS,
            )?;
        }
        Ok((x, attn_probs))
    }

    /// MLM logits node `[|positions| x vocab]` for masked positions.
    pub fn mlm_logits(&self, tape: &mut Tape, hidden: NodeId, positions: &[usize]) -> Result<NodeId> {
        let picked = tape.gather_rows(hidden, positions.to_vec())?;
        let proj = tape.matmul(picked, self.node("mlm.w"))?;
        tape.add_bias(proj, self.node("mlm.b"))
    }

    /// Classification logits node `[1 x num_classes]`.
    pub fn cls_logits(&self, tape: &mut Tape, hidden: NodeId) -> Result<NodeId> {
        let pooled = match self.config.pooling {
            Pooling::Cls => tape.gather_rows(hidden, vec![0])?,
            Pooling::Mean => tape.mean_rows(hidden),
        };
        let proj = tape.matmul(pooled, self.node("cls.w"))?;
        tape.add_bias(proj, self.node("cls.b"))
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Versioned JSON container for a model and the vocabulary it was trained
/// with. f64 values survive the round-trip losslessly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelState,
    pub vocab: Vocab,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(model: ModelState, vocab: Vocab) -> Checkpoint {
        Checkpoint { format_version: CHECKPOINT_VERSION, model, vocab }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let content = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&content)?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported checkpoint version {}",
                ckpt.format_version
            )));
        }
        let expected: BTreeMap<String, Vec<usize>> =
            ckpt.model.config.inventory().into_iter().collect();
        let actual: BTreeMap<String, Vec<usize>> = ckpt
            .model
            .params
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        if expected != actual {
            return Err(Error::Validation(
                "checkpoint parameters do not match its config".into(),
            ));
        }
        if ckpt.vocab.len() != ckpt.model.config.vocab_size {
            return Err(Error::Validation(
                "checkpoint vocabulary size does not match its config".into(),
            ));
        }
        for (name, t) in &ckpt.model.params {
            t.assert_finite(name)?;
        }
        Ok(ckpt)
    }
}
