//! Personalized decoder-only transformer.
//!
//! The input sequence is `[profile token, a_0, a_1, ...]` where the profile
//! token is a learned linear projection of the user's action histogram and
//! `a_0` is the trigger. Pre-norm blocks with causal multi-head attention
//! and a GELU feed-forward follow; the output projection is tied to the
//! token embedding. Trigger, PAD and PROFILE ids are never predicted.

mod checkpoint;
mod train;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{EpochLog, TrainConfig, TrainExample, TrainLog};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{softmax_in_place, AutodiffError, Graph, NodeId, Real, Tensor};
use crate::flow::{encode_prefix, ActionId, ActionKind, ActionVocabulary};

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("invalid model config: {0}")]
    ConfigInvalid(String),
    #[error("sequence of {len} actions exceeds the {max} allowed")]
    TooLong { len: usize, max: usize },
    #[error("token {0} is not a predictable action id")]
    InvalidToken(u32),
    #[error("profile has {got} entries, expected {expected}")]
    ProfileSize { got: usize, expected: usize },
    #[error("no training examples")]
    EmptyTrainingSet,
    #[error("invalid training config: {0}")]
    TrainConfigInvalid(String),
    #[error("vocabulary hash mismatch: checkpoint {checkpoint}, vocabulary {vocab}")]
    HashMismatch { checkpoint: String, vocab: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Token ids, reserved ids included.
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Two layers, width 256 over two heads, 4x feed-forward, 64 positions.
    pub fn production(vocab_size: usize) -> Self {
        Self::new(vocab_size, 256, 2, 2)
    }

    pub fn new(vocab_size: usize, embed_dim: usize, n_layers: usize, n_heads: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim,
            n_layers,
            n_heads,
            ffn_dim: 4 * embed_dim,
            max_len: 64,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), DecoderError> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(DecoderError::ConfigInvalid(format!("{name} must be positive")));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(DecoderError::ConfigInvalid(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.max_len < 2 {
            return Err(DecoderError::ConfigInvalid("max_len must leave room for one action".into()));
        }
        if self.vocab_size <= ActionId::FIRST as usize {
            return Err(DecoderError::ConfigInvalid("vocabulary has no actions".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count of the architecture.
    pub fn parameter_count(&self) -> usize {
        let (v, d, f) = (self.vocab_size, self.embed_dim, self.ffn_dim);
        let embeddings = v * d + self.max_len * d;
        let profile = v * d + d;
        let attention = 4 * (d * d + d);
        let ffn = d * f + f + f * d + d;
        let norms = 2 * 2 * d;
        embeddings + profile + self.n_layers * (attention + ffn + norms) + 2 * d
    }

    fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T = f32> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

const BLOCK_NAMES: [&str; 16] = [
    "ln1.gamma", "ln1.beta", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
    "attn.wo", "attn.bo", "ln2.gamma", "ln2.beta", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
];

impl<T: Real> Block<T> {
    fn tensors(&self) -> [&Tensor<T>; 16] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv,
            &self.wo, &self.bo, &self.ln2_g, &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 16] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.wq, &mut self.bq, &mut self.wk,
            &mut self.bk, &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo,
            &mut self.ln2_g, &mut self.ln2_b, &mut self.w1, &mut self.b1, &mut self.w2,
            &mut self.b2,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PersonalizedDecoder<T = f32> {
    config: ModelConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub profile_w: Tensor<T>,
    pub profile_b: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub lnf_g: Tensor<T>,
    pub lnf_b: Tensor<T>,
    /// `true` for ids that are never predicted.
    output_mask: Vec<bool>,
}

/// Graph handles of every parameter, in [`PersonalizedDecoder::named_parameters`] order.
struct ParamNodes {
    ids: Vec<NodeId>,
}

impl ParamNodes {
    const TOK: usize = 0;
    const POS: usize = 1;
    const PROFILE_W: usize = 2;
    const PROFILE_B: usize = 3;
    const BLOCKS: usize = 4;

    fn block(&self, layer: usize, field: usize) -> NodeId {
        self.ids[Self::BLOCKS + 16 * layer + field]
    }

    fn final_norm(&self) -> (NodeId, NodeId) {
        let n = self.ids.len();
        (self.ids[n - 2], self.ids[n - 1])
    }
}

fn normal<T: Real>(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches")
}

fn filled<T: Real>(shape: Vec<usize>, value: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape, vec![T::from_f64(value); n]).expect("shape matches")
}

/// Token ids the model never predicts: reserved ids and, given a
/// vocabulary, every trigger.
pub fn output_mask(vocab_size: usize, vocab: Option<&ActionVocabulary>) -> Vec<bool> {
    (0..vocab_size)
        .map(|i| {
            let id = ActionId(i as u32);
            id.is_reserved() || vocab.and_then(|v| v.kind(id)) == Some(ActionKind::Trigger)
        })
        .collect()
}

impl<T: Real> PersonalizedDecoder<T> {
    /// Weights ~ N(0, 0.02^2); residual output projections scaled by
    /// 1/sqrt(2L); norms start at identity; biases at zero.
    pub fn build(config: &ModelConfig) -> Result<Self, DecoderError> {
        config.validate()?;
        let (v, d, f) = (config.vocab_size, config.embed_dim, config.ffn_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let tok_emb = normal(&mut rng, vec![v, d], std);
        let pos_emb = normal(&mut rng, vec![config.max_len, d], std);
        let profile_w = normal(&mut rng, vec![v, d], std);
        let profile_b = filled(vec![d], 0.0);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1_g: filled(vec![d], 1.0),
                ln1_b: filled(vec![d], 0.0),
                wq: normal(&mut rng, vec![d, d], std),
                bq: filled(vec![d], 0.0),
                wk: normal(&mut rng, vec![d, d], std),
                bk: filled(vec![d], 0.0),
                wv: normal(&mut rng, vec![d, d], std),
                bv: filled(vec![d], 0.0),
                wo: normal(&mut rng, vec![d, d], resid_std),
                bo: filled(vec![d], 0.0),
                ln2_g: filled(vec![d], 1.0),
                ln2_b: filled(vec![d], 0.0),
                w1: normal(&mut rng, vec![d, f], std),
                b1: filled(vec![f], 0.0),
                w2: normal(&mut rng, vec![f, d], resid_std),
                b2: filled(vec![d], 0.0),
            })
            .collect();
        Ok(PersonalizedDecoder {
            config: config.clone(),
            tok_emb,
            pos_emb,
            profile_w,
            profile_b,
            blocks,
            lnf_g: filled(vec![d], 1.0),
            lnf_b: filled(vec![d], 0.0),
            output_mask: output_mask(v, None),
        })
    }

    /// [`build`](Self::build) for a concrete vocabulary, masking triggers.
    pub fn build_for(config: &ModelConfig, vocab: &ActionVocabulary) -> Result<Self, DecoderError> {
        if config.vocab_size != vocab.size() {
            return Err(DecoderError::ConfigInvalid(format!(
                "vocab_size {} but vocabulary has {} ids",
                config.vocab_size,
                vocab.size()
            )));
        }
        let mut model = Self::build(config)?;
        model.output_mask = output_mask(config.vocab_size, Some(vocab));
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn output_mask(&self) -> &[bool] {
        &self.output_mask
    }

    pub fn set_output_mask(&mut self, mask: Vec<bool>) {
        assert_eq!(mask.len(), self.config.vocab_size);
        self.output_mask = mask;
    }

    pub fn named_parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
            ("profile.weight".to_string(), &self.profile_w),
            ("profile.bias".to_string(), &self.profile_b),
        ];
        for (l, block) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_NAMES.iter().zip(block.tensors()) {
                out.push((format!("blocks.{l}.{name}"), t));
            }
        }
        out.push(("ln_f.gamma".to_string(), &self.lnf_g));
        out.push(("ln_f.beta".to_string(), &self.lnf_b));
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![
            &mut self.tok_emb,
            &mut self.pos_emb,
            &mut self.profile_w,
            &mut self.profile_b,
        ];
        for block in &mut self.blocks {
            out.extend(block.tensors_mut());
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out
    }

    /// Sum of all stored tensor sizes.
    pub fn num_parameters(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_parameters().iter().all(|(_, t)| t.all_finite())
    }

    pub fn cast<U: Real>(&self) -> PersonalizedDecoder<U> {
        let mut out = PersonalizedDecoder::<U>::build(&self.config).expect("valid config");
        for (dst, (_, src)) in out.parameters_mut().into_iter().zip(self.named_parameters()) {
            *dst = src.cast();
        }
        out.output_mask = self.output_mask.clone();
        out
    }

    fn check_tokens(&self, tokens: &[ActionId]) -> Result<(), DecoderError> {
        let max = self.config.max_len - 1;
        if tokens.len() > max {
            return Err(DecoderError::TooLong {
                len: tokens.len(),
                max,
            });
        }
        if let Some(bad) = tokens
            .iter()
            .find(|t| t.is_reserved() || t.index() >= self.config.vocab_size)
        {
            return Err(DecoderError::InvalidToken(bad.0));
        }
        Ok(())
    }

    fn profile_tensor(&self, profile: &[f64]) -> Result<Tensor<T>, DecoderError> {
        if profile.len() != self.config.vocab_size {
            return Err(DecoderError::ProfileSize {
                got: profile.len(),
                expected: self.config.vocab_size,
            });
        }
        Ok(Tensor::from_f64(vec![1, profile.len()], profile)?)
    }

    fn register<'p>(&'p self, g: &mut Graph<'p, T>) -> ParamNodes {
        ParamNodes {
            ids: self.named_parameters().into_iter().map(|(_, t)| g.param(t)).collect(),
        }
    }

    /// Input sequence: projected profile at position 0, then token embeddings,
    /// each plus its positional embedding.
    fn embed<'p>(
        &'p self,
        g: &mut Graph<'p, T>,
        p: &ParamNodes,
        tokens: &[ActionId],
        profile: &[f64],
    ) -> Result<NodeId, DecoderError> {
        self.check_tokens(tokens)?;
        let hist = g.constant(self.profile_tensor(profile)?);
        let projected = g.matmul(hist, p.ids[ParamNodes::PROFILE_W])?;
        let projected = g.add_row(projected, p.ids[ParamNodes::PROFILE_B])?;
        let ids: Vec<usize> = tokens.iter().map(|t| t.index()).collect();
        let x = if ids.is_empty() {
            projected
        } else {
            let tok = g.gather(p.ids[ParamNodes::TOK], &ids)?;
            g.concat_rows(projected, tok)?
        };
        let positions: Vec<usize> = (0..=tokens.len()).collect();
        let pos = g.gather(p.ids[ParamNodes::POS], &positions)?;
        Ok(g.add(x, pos)?)
    }

    fn attention<'p>(&self, g: &mut Graph<'p, T>, p: &ParamNodes, layer: usize, h: NodeId) -> Result<NodeId, DecoderError> {
        let b = |f: usize| p.block(layer, f);
        let q = g.matmul(h, b(2))?;
        let q = g.add_row(q, b(3))?;
        let k = g.matmul(h, b(4))?;
        let k = g.add_row(k, b(5))?;
        let v = g.matmul(h, b(6))?;
        let v = g.add_row(v, b(7))?;
        let dh = self.config.head_dim();
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for i in 0..self.config.n_heads {
            let (qh, kh, vh) = if self.config.n_heads == 1 {
                (q, k, v)
            } else {
                let r = (i * dh, (i + 1) * dh);
                (g.slice_cols(q, r.0, r.1)?, g.slice_cols(k, r.0, r.1)?, g.slice_cols(v, r.0, r.1)?)
            };
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let scores = g.causal_mask(scores)?;
            let weights = g.softmax(scores);
            heads.push(g.matmul(weights, vh)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let out = g.matmul(merged, b(8))?;
        Ok(g.add_row(out, b(9))?)
    }

    fn feed_forward<'p>(&self, g: &mut Graph<'p, T>, p: &ParamNodes, layer: usize, h: NodeId) -> Result<NodeId, DecoderError> {
        let b = |f: usize| p.block(layer, f);
        let u = g.matmul(h, b(12))?;
        let u = g.add_row(u, b(13))?;
        let u = g.gelu(u);
        let o = g.matmul(u, b(14))?;
        Ok(g.add_row(o, b(15))?)
    }

    /// Masked logits `[len + 1, V]` for every position of the sequence.
    fn logits<'p>(
        &'p self,
        g: &mut Graph<'p, T>,
        tokens: &[ActionId],
        profile: &[f64],
    ) -> Result<(NodeId, ParamNodes), DecoderError> {
        let p = self.register(g);
        let mut x = self.embed(g, &p, tokens, profile)?;
        for layer in 0..self.config.n_layers {
            let h = g.layer_norm(x, p.block(layer, 0), p.block(layer, 1))?;
            let a = self.attention(g, &p, layer, h)?;
            x = g.add(x, a)?;
            let h = g.layer_norm(x, p.block(layer, 10), p.block(layer, 11))?;
            let f = self.feed_forward(g, &p, layer, h)?;
            x = g.add(x, f)?;
        }
        let (gamma, beta) = p.final_norm();
        let x = g.layer_norm(x, gamma, beta)?;
        let logits = g.matmul_nt(x, p.ids[ParamNodes::TOK])?;
        let logits = g.mask_cols(logits, &self.output_mask)?;
        Ok((logits, p))
    }

    /// Scalar training loss of one sequence: mean cross-entropy of every
    /// next action after the trigger.
    pub fn sequence_loss<'p>(
        &'p self,
        g: &mut Graph<'p, T>,
        tokens: &[ActionId],
        profile: &[f64],
    ) -> Result<(NodeId, Vec<NodeId>), DecoderError> {
        let (logits, p) = self.logits(g, tokens, profile)?;
        let targets = sequence_targets(tokens);
        let loss = g.cross_entropy(logits, &targets)?;
        Ok((loss, p.ids))
    }

    /// The embedded input sequence `[len + 1, d]`.
    pub fn embed_input(&self, tokens: &[ActionId], profile: &[f64]) -> Result<Tensor<T>, DecoderError> {
        let mut g = Graph::new();
        let p = self.register(&mut g);
        let x = self.embed(&mut g, &p, tokens, profile)?;
        Ok(g.value(x).clone())
    }

    /// Next-action distribution after `prefix`.
    pub fn forward(&self, prefix: &[ActionId], profile: &[f64]) -> Result<Vec<T>, DecoderError> {
        if prefix.is_empty() {
            return Err(DecoderError::InvalidToken(ActionId::PAD.0));
        }
        let mut rows = self.distributions_along(prefix, profile)?;
        Ok(rows.pop().expect("non-empty prefix"))
    }

    /// `out[t]` is the next-action distribution after `path[..=t]`; one pass
    /// scores every prefix of a path.
    pub fn distributions_along(&self, path: &[ActionId], profile: &[f64]) -> Result<Vec<Vec<T>>, DecoderError> {
        let mut g = Graph::new();
        let (logits, _) = self.logits(&mut g, path, profile)?;
        let logits = g.value(logits);
        Ok((1..=path.len())
            .map(|r| {
                let mut row = logits.row(r).to_vec();
                softmax_in_place(&mut row);
                row
            })
            .collect())
    }

    /// Top-`k` actions by probability (ties by ascending id); never-predicted
    /// ids are excluded. Long prefixes keep their most recent actions.
    pub fn suggest(&self, prefix: &[ActionId], profile: &[f64], k: usize) -> Result<Vec<(ActionId, T)>, DecoderError> {
        let prefix = encode_prefix(prefix, self.config.max_len);
        let dist = self.forward(&prefix, profile)?;
        Ok(rank_distribution(&dist, &self.output_mask, k))
    }

    /// Row `i` is the projected profile `i` (before positions and attention).
    pub fn export_user_embeddings(&self, profiles: &[&[f64]]) -> Result<Tensor<T>, DecoderError> {
        let d = self.config.embed_dim;
        let mut data = Vec::with_capacity(profiles.len() * d);
        for profile in profiles {
            let mut g = Graph::new();
            let hist = g.constant(self.profile_tensor(profile)?);
            let w = g.constant_ref(&self.profile_w);
            let b = g.constant_ref(&self.profile_b);
            let row = g.matmul(hist, w)?;
            let row = g.add_row(row, b)?;
            data.extend_from_slice(g.value(row).data());
        }
        Ok(Tensor::new(vec![profiles.len(), d], data)?)
    }
}

/// Row `t >= 1` of the logits has seen `tokens[..t]` and predicts
/// `tokens[t]`. The profile row would predict the trigger, and the last row
/// has nothing to predict.
pub(crate) fn sequence_targets(tokens: &[ActionId]) -> Vec<Option<usize>> {
    (0..=tokens.len())
        .map(|row| {
            if row >= 1 && row < tokens.len() {
                Some(tokens[row].index())
            } else {
                None
            }
        })
        .collect()
}

/// Sorts unmasked ids by probability (descending, ties ascending id).
pub fn rank_distribution<T: Real>(dist: &[T], mask: &[bool], k: usize) -> Vec<(ActionId, T)> {
    let mut ranked: Vec<(ActionId, T)> = dist
        .iter()
        .enumerate()
        .filter(|(i, _)| !mask[*i])
        .map(|(i, &p)| (ActionId(i as u32), p))
        .collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    ranked.truncate(k);
    ranked
}

#[cfg(test)]
mod tests;
