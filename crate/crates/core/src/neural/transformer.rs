//! Pre-norm transformer encoder shared by the scorer and the generator.
//!
//! The input representation is the sum of token, segment and role
//! embeddings; positions enter only through a bucketed relative bias shared
//! by all layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::BoolMatrix;
use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamStore};
use super::{NeuralError, SeededRng};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn_multiplier: usize,
    pub max_len: usize,
    pub relative_buckets: usize,
    pub dropout: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            hidden: 128,
            ffn_multiplier: 4,
            max_len: 256,
            relative_buckets: 32,
            dropout: 0.1,
        }
    }
}

impl TransformerConfig {
    /// Small configuration used by tests and quick experiments.
    pub fn toy() -> Self {
        Self {
            layers: 2,
            heads: 4,
            hidden: 32,
            ffn_multiplier: 4,
            max_len: 96,
            relative_buckets: 16,
            dropout: 0.0,
        }
    }

    /// The 32-layer, 32-head, 2048-wide shape of the full-size models.
    /// Not trainable on CPU; kept for reference and config validation.
    pub fn full_size() -> Self {
        Self {
            layers: 32,
            heads: 32,
            hidden: 2048,
            ffn_multiplier: 4,
            max_len: 512,
            relative_buckets: 32,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        let positive = self.layers > 0
            && self.heads > 0
            && self.hidden > 0
            && self.ffn_multiplier > 0
            && self.max_len > 0
            && self.relative_buckets > 0;
        if !positive {
            return Err(NeuralError::InvalidConfig(
                "all transformer sizes must be positive".into(),
            ));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(NeuralError::InvalidConfig(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NeuralError::InvalidConfig(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Token, segment and role ids for one sequence.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SequenceInput {
    pub tokens: Vec<u32>,
    pub segments: Vec<u8>,
    pub roles: Vec<u8>,
}

impl SequenceInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn push(&mut self, token: u32, segment: u8, role: u8) {
        self.tokens.push(token);
        self.segments.push(segment);
        self.roles.push(role);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        params: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = if std == 0.0 {
            params.add_zeros(format!("{name}.weight"), &[fan_in, fan_out])
        } else {
            params.add_normal(format!("{name}.weight"), &[fan_in, fan_out], std, rng)
        };
        let bias = params.add_zeros(format!("{name}.bias"), &[fan_out]);
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> NodeId {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: params.add_filled(format!("{name}.gamma"), &[dim], 1.0),
            beta: params.add_zeros(format!("{name}.beta"), &[dim]),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> NodeId {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln_attn: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    attn_out: Linear,
    ln_ffn: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
}

const TOKEN_EMB_STD: f64 = 1.0;
const TYPE_EMB_STD: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct Transformer {
    config: TransformerConfig,
    vocab_size: usize,
    token_emb: ParamId,
    segment_emb: ParamId,
    role_emb: ParamId,
    rel_table: ParamId,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
}

impl Transformer {
    pub fn new<R: Rng>(
        params: &mut ParamStore,
        config: &TransformerConfig,
        vocab_size: usize,
        segments: usize,
        roles: usize,
        rng: &mut R,
    ) -> Result<Self, NeuralError> {
        config.validate()?;
        let h = config.hidden;
        // Token identity dominates the summed embedding so that identical
        // tokens in different segments start out nearly parallel.
        let token_emb = params.add_normal("emb.token", &[vocab_size, h], TOKEN_EMB_STD, rng);
        let segment_emb = params.add_normal("emb.segment", &[segments, h], TYPE_EMB_STD, rng);
        let role_emb = params.add_normal("emb.role", &[roles, h], TYPE_EMB_STD, rng);
        let rel_table = params.add_zeros("relpos.table", &[config.relative_buckets, config.heads]);
        let std_in = 1.0 / (h as f64).sqrt();
        let ffn = h * config.ffn_multiplier;
        let std_res = std_in / ((2 * config.layers) as f64).sqrt();
        let std_ffn_out = 1.0 / (ffn as f64).sqrt() / ((2 * config.layers) as f64).sqrt();
        let blocks = (0..config.layers)
            .map(|i| {
                let p = format!("block{i}");
                Block {
                    ln_attn: LayerNorm::new(params, &format!("{p}.ln_attn"), h),
                    query: Linear::new(params, &format!("{p}.query"), h, h, std_in, rng),
                    key: Linear::new(params, &format!("{p}.key"), h, h, std_in, rng),
                    value: Linear::new(params, &format!("{p}.value"), h, h, std_in, rng),
                    attn_out: Linear::new(params, &format!("{p}.attn_out"), h, h, std_res, rng),
                    ln_ffn: LayerNorm::new(params, &format!("{p}.ln_ffn"), h),
                    ffn_in: Linear::new(params, &format!("{p}.ffn_in"), h, ffn, std_in, rng),
                    ffn_out: Linear::new(params, &format!("{p}.ffn_out"), ffn, h, std_ffn_out, rng),
                }
            })
            .collect();
        let final_ln = LayerNorm::new(params, "final_ln", h);
        Ok(Self {
            config: config.clone(),
            vocab_size,
            token_emb,
            segment_emb,
            role_emb,
            rel_table,
            blocks,
            final_ln,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn segment_table(&self) -> ParamId {
        self.segment_emb
    }

    pub fn role_table(&self) -> ParamId {
        self.role_emb
    }

    pub fn token_table(&self) -> ParamId {
        self.token_emb
    }

    /// Final hidden states, `len x hidden`. `dropout_rng` enables dropout
    /// (training); pass `None` for deterministic inference.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        input: &SequenceInput,
        mask: &BoolMatrix,
        mut dropout_rng: Option<&mut SeededRng>,
    ) -> Result<NodeId, NeuralError> {
        let len = input.len();
        if len == 0 {
            return Err(NeuralError::EmptySequence);
        }
        if len > self.config.max_len {
            return Err(NeuralError::SequenceTooLong {
                len,
                max: self.config.max_len,
            });
        }
        if input.segments.len() != len || input.roles.len() != len {
            return Err(NeuralError::ShapeMismatch {
                expected: vec![len],
                found: vec![input.segments.len(), input.roles.len()],
            });
        }
        if let Some(&t) = input.tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(NeuralError::IdOutOfRange {
                id: t as usize,
                size: self.vocab_size,
            });
        }
        let p = self.config.dropout;
        let ids = |v: &[u32]| v.iter().map(|&x| x as usize).collect::<Vec<_>>();
        let tok_t = g.param(self.token_emb);
        let seg_t = g.param(self.segment_emb);
        let role_t = g.param(self.role_emb);
        let tok = g.embedding(tok_t, &ids(&input.tokens));
        let seg = g.embedding(
            seg_t,
            &input.segments.iter().map(|&s| s as usize).collect::<Vec<_>>(),
        );
        let role = g.embedding(
            role_t,
            &input.roles.iter().map(|&r| r as usize).collect::<Vec<_>>(),
        );
        let x = g.add(tok, seg);
        let mut x = g.add(x, role);
        if let Some(rng) = dropout_rng.as_deref_mut() {
            x = g.dropout(x, p, rng);
        }
        let table = g.param(self.rel_table);
        let bias = g.relative_bias(table, len, len);

        for block in &self.blocks {
            let h = block.ln_attn.forward(g, x);
            let q = block.query.forward(g, h);
            let k = block.key.forward(g, h);
            let v = block.value.forward(g, h);
            let a = g.attention(q, k, v, mask, Some(bias), self.config.heads)?;
            let mut a = block.attn_out.forward(g, a);
            if let Some(rng) = dropout_rng.as_deref_mut() {
                a = g.dropout(a, p, rng);
            }
            x = g.add(x, a);

            let h = block.ln_ffn.forward(g, x);
            let f = block.ffn_in.forward(g, h);
            let f = g.gelu(f);
            let mut f = block.ffn_out.forward(g, f);
            if let Some(rng) = dropout_rng.as_deref_mut() {
                f = g.dropout(f, p, rng);
            }
            x = g.add(x, f);
        }
        Ok(self.final_ln.forward(g, x))
    }
}

