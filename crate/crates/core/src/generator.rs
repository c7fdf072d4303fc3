//! Knowledge-grounded response generation with a prefix language model.
//!
//! Input blocks are `[knowledge] [context] [BOS response EOS]`, each token
//! carrying a segment id (knowledge, context, response) and a role id (user,
//! system, knowledge source). Prefix tokens attend bidirectionally within
//! the prefix; response tokens attend to the prefix and causally to earlier
//! response tokens.

use std::path::Path;

use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{snippet_text, squash_whitespace, DialogueContext, KnowledgeSnippet};
use crate::neural::{
    checkpoint, fit, BoolMatrix, FitConfig, FitReport, Gradients, Graph, Linear, NeuralError, NodeId,
    ParamStore, SeededRng, SequenceInput, Transformer, TransformerConfig,
};
use crate::scorer::{role_of, EncodedContext, ROLE_SYSTEM};
use crate::tokenizer::{Vocab, BOS, CLS, EOS, PAD, SEP, UNK};

pub const SEG_KNOWLEDGE: u8 = 0;
pub const SEG_CONTEXT: u8 = 1;
pub const SEG_RESPONSE: u8 = 2;
pub const ROLE_KNOWLEDGE: u8 = 2;

/// Generated tokens per response, EOS included.
pub const MAX_RESPONSE_LEN: usize = 64;
/// Exponent of the length normalizer `logprob / len^alpha`.
pub const LENGTH_PENALTY: f64 = 0.8;
pub const DEFAULT_BEAM_SIZE: usize = 5;

pub const CHECKPOINT_KIND: &str = "generator";

/// Tokens never produced by decoding.
pub const BANNED_TOKENS: [u32; 5] = [PAD, UNK, CLS, SEP, BOS];

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("knowledge snippet is empty")]
    EmptyKnowledge,
    #[error("training triple {0} has an empty response")]
    NoResponse(usize),
    #[error("knowledge, last user turn and response need {needed} tokens, max_len is {max_len}")]
    InputTooLong { needed: usize, max_len: usize },
    #[error("beam size must be at least 1")]
    ZeroBeam,
    #[error("checkpoint kind {found:?} is not a generator")]
    WrongCheckpoint { found: String },
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
}

/// A generator input with its prefix length (knowledge plus context tokens).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenInput {
    pub seq: SequenceInput,
    pub prefix_len: usize,
}

impl GenInput {
    pub fn response_len(&self) -> usize {
        self.seq.len() - self.prefix_len
    }

    /// The prefix followed by `BOS` and `response`.
    pub fn with_response(&self, response: &[u32]) -> GenInput {
        let mut seq = SequenceInput::default();
        for i in 0..self.prefix_len {
            seq.push(self.seq.tokens[i], self.seq.segments[i], self.seq.roles[i]);
        }
        seq.push(BOS, SEG_RESPONSE, ROLE_SYSTEM);
        for &t in response {
            seq.push(t, SEG_RESPONSE, ROLE_SYSTEM);
        }
        GenInput {
            seq,
            prefix_len: self.prefix_len,
        }
    }
}

/// Assembles `[knowledge] [context] [BOS response EOS]` (or `[BOS]` when
/// `response` is `None`), reserving `reserve` response positions at
/// inference. Oldest context utterances are dropped first; the knowledge
/// block and the last user utterance are never cut.
pub fn assemble_input(
    knowledge: &[u32],
    ctx: &EncodedContext,
    response: Option<&[u32]>,
    max_len: usize,
    reserve: usize,
) -> Result<GenInput, GeneratorError> {
    if knowledge.is_empty() {
        return Err(GeneratorError::EmptyKnowledge);
    }
    assemble_blocks(knowledge, ctx, response, max_len, reserve)
}

/// `[context] [BOS response EOS]` without a knowledge block, the input of
/// plain dialogue language modeling.
pub fn assemble_dialogue_input(
    ctx: &EncodedContext,
    response: &[u32],
    max_len: usize,
) -> Result<GenInput, GeneratorError> {
    assemble_blocks(&[], ctx, Some(response), max_len, 0)
}

fn assemble_blocks(
    knowledge: &[u32],
    ctx: &EncodedContext,
    response: Option<&[u32]>,
    max_len: usize,
    reserve: usize,
) -> Result<GenInput, GeneratorError> {
    let resp_block = match response {
        Some(r) => r.len() + 2,
        None => 1 + reserve,
    };
    let mut start = 0;
    let mut total = knowledge.len() + ctx.utterances.iter().map(|(_, t)| t.len()).sum::<usize>();
    let min_resp = if response.is_some() { resp_block } else { 1 };
    while total + resp_block > max_len && start + 1 < ctx.utterances.len() {
        total -= ctx.utterances[start].1.len();
        start += 1;
    }
    if total + min_resp > max_len {
        return Err(GeneratorError::InputTooLong {
            needed: total + min_resp,
            max_len,
        });
    }
    let mut seq = SequenceInput::default();
    for &t in knowledge {
        seq.push(t, SEG_KNOWLEDGE, ROLE_KNOWLEDGE);
    }
    for (speaker, toks) in &ctx.utterances[start..] {
        for &t in toks {
            seq.push(t, SEG_CONTEXT, role_of(*speaker));
        }
    }
    let prefix_len = seq.len();
    seq.push(BOS, SEG_RESPONSE, ROLE_SYSTEM);
    if let Some(r) = response {
        for &t in r {
            seq.push(t, SEG_RESPONSE, ROLE_SYSTEM);
        }
        seq.push(EOS, SEG_RESPONSE, ROLE_SYSTEM);
    }
    Ok(GenInput { seq, prefix_len })
}

pub fn build_input(
    vocab: &Vocab,
    k: &KnowledgeSnippet,
    ctx: &DialogueContext,
    response: Option<&str>,
    max_len: usize,
) -> Result<GenInput, GeneratorError> {
    let knowledge = vocab.encode(&snippet_text(k));
    let r = response.map(|r| vocab.encode(r));
    assemble_input(
        &knowledge,
        &EncodedContext::new(vocab, ctx),
        r.as_deref(),
        max_len,
        MAX_RESPONSE_LEN,
    )
}

/// Prefix rows see the whole prefix and no response column; response row
/// `i` sees the prefix and response columns up to `i`.
pub fn build_mask(prefix_len: usize, response_len: usize) -> BoolMatrix {
    let n = prefix_len + response_len;
    BoolMatrix::from_fn(n, n, |i, j| j < prefix_len || (i >= prefix_len && j <= i))
}

/// Body text with whitespace squashed; no model involved.
pub fn generate_extractive(k: &KnowledgeSnippet) -> Result<String, GeneratorError> {
    let body = squash_whitespace(&k.body);
    if body.is_empty() {
        return Err(GeneratorError::EmptyKnowledge);
    }
    Ok(body)
}

/// A source of next-token distributions given the response so far.
pub trait NextTokenModel {
    /// Log-probabilities over the vocabulary of the token following
    /// `response` (BOS excluded).
    fn next_log_probs(&self, response: &[u32]) -> Result<Vec<f64>, GeneratorError>;

    /// One distribution per response, in input order.
    fn next_log_probs_batch(&self, responses: &[Vec<u32>]) -> Result<Vec<Vec<f64>>, GeneratorError> {
        responses.iter().map(|r| self.next_log_probs(r)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_len: usize,
    pub eos: u32,
    pub banned: Vec<u32>,
}

impl DecodeConfig {
    pub fn beam(beam_size: usize) -> Self {
        Self {
            beam_size,
            max_len: MAX_RESPONSE_LEN,
            eos: EOS,
            banned: BANNED_TOKENS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    /// Generated tokens, the final EOS included when finished.
    pub tokens: Vec<u32>,
    pub logprob: f64,
    /// Accumulated log-probability after each token.
    pub trace: Vec<f64>,
    pub finished: bool,
}

impl BeamHypothesis {
    /// `logprob / len^0.8`.
    pub fn normalized(&self) -> f64 {
        self.logprob / (self.tokens.len().max(1) as f64).powf(LENGTH_PENALTY)
    }
}

/// Beam search: each step keeps the `beam_size` best expansions by raw
/// log-probability (ties to the earlier beam, then the lower token id);
/// expansions ending in EOS leave the beam as finished hypotheses. Stops when
/// no live beam remains or `max_len` tokens were generated, then returns the
/// hypothesis with the best length-normalized score.
pub fn beam_search<M: NextTokenModel + ?Sized>(
    model: &M,
    config: &DecodeConfig,
) -> Result<BeamHypothesis, GeneratorError> {
    if config.beam_size == 0 {
        return Err(GeneratorError::ZeroBeam);
    }
    let mut live = vec![BeamHypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        trace: Vec::new(),
        finished: false,
    }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    for _ in 0..config.max_len {
        let prefixes: Vec<Vec<u32>> = live.iter().map(|h| h.tokens.clone()).collect();
        let dists = model.next_log_probs_batch(&prefixes)?;
        let mut expansions: Vec<(f64, usize, u32)> = Vec::new();
        for (b, dist) in dists.iter().enumerate() {
            for (t, &lp) in dist.iter().enumerate() {
                let t = t as u32;
                if lp.is_finite() && !config.banned.contains(&t) {
                    expansions.push((live[b].logprob + lp, b, t));
                }
            }
        }
        expansions.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let mut next = Vec::with_capacity(config.beam_size);
        for &(lp, b, t) in expansions.iter().take(config.beam_size) {
            let mut h = live[b].clone();
            h.tokens.push(t);
            h.logprob = lp;
            h.trace.push(lp);
            if t == config.eos {
                h.finished = true;
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    finished.extend(live);
    let mut best: Option<BeamHypothesis> = None;
    for h in finished {
        if best.as_ref().is_none_or(|b| h.normalized() > b.normalized()) {
            best = Some(h);
        }
    }
    Ok(best.expect("at least one hypothesis"))
}

/// Picks the most likely allowed token at every step until EOS or
/// `max_len`; ties go to the lower token id.
pub fn greedy_search<M: NextTokenModel + ?Sized>(
    model: &M,
    config: &DecodeConfig,
) -> Result<BeamHypothesis, GeneratorError> {
    let mut h = BeamHypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        trace: Vec::new(),
        finished: false,
    };
    while h.tokens.len() < config.max_len {
        let dist = model.next_log_probs(&h.tokens)?;
        let mut best: Option<(u32, f64)> = None;
        for (t, &lp) in dist.iter().enumerate() {
            let t = t as u32;
            if !lp.is_finite() || config.banned.contains(&t) {
                continue;
            }
            if best.is_none_or(|(_, b)| lp > b) {
                best = Some((t, lp));
            }
        }
        let Some((t, lp)) = best else { break };
        h.tokens.push(t);
        h.logprob += lp;
        h.trace.push(h.logprob);
        if t == config.eos {
            h.finished = true;
            break;
        }
    }
    Ok(h)
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct GeneratorHeader {
    transformer: TransformerConfig,
    vocab_size: usize,
}

#[derive(Debug, Clone)]
struct GenNet {
    transformer: Transformer,
    lm_head: Linear,
}

impl GenNet {
    /// Logits of rows `rows` of the sequence.
    fn logits(
        &self,
        g: &mut Graph<'_>,
        input: &GenInput,
        rows: &[usize],
        dropout: Option<&mut SeededRng>,
    ) -> Result<NodeId, NeuralError> {
        let mask = build_mask(input.prefix_len, input.response_len());
        let h = self.transformer.forward(g, &input.seq, &mask, dropout)?;
        let sel = g.select_rows(h, rows);
        Ok(self.lm_head.forward(g, sel))
    }

    /// Mean next-token cross-entropy over response positions.
    fn nll(
        &self,
        g: &mut Graph<'_>,
        input: &GenInput,
        dropout: Option<&mut SeededRng>,
    ) -> Result<NodeId, NeuralError> {
        let n = input.seq.len();
        let rows: Vec<usize> = (input.prefix_len..n - 1).collect();
        let targets: Vec<Option<usize>> = rows
            .iter()
            .map(|&p| Some(input.seq.tokens[p + 1] as usize))
            .collect();
        let logits = self.logits(g, input, &rows, dropout)?;
        Ok(g.cross_entropy(logits, &targets))
    }
}

/// Transformer with a `hidden -> vocab` output layer.
#[derive(Debug, Clone)]
pub struct GeneratorModel {
    params: ParamStore,
    net: GenNet,
}

impl GeneratorModel {
    pub fn new(config: &TransformerConfig, vocab_size: usize, seed: u64) -> Result<Self, GeneratorError> {
        let mut rng = SeededRng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let transformer = Transformer::new(&mut params, config, vocab_size, 3, 3, &mut rng)?;
        let std = 1.0 / (config.hidden as f64).sqrt();
        let lm_head = Linear::new(&mut params, "lm_head", config.hidden, vocab_size, std, &mut rng);
        Ok(Self {
            params,
            net: GenNet {
                transformer,
                lm_head,
            },
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        self.net.transformer.config()
    }

    pub fn vocab_size(&self) -> usize {
        self.net.transformer.vocab_size()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn transformer(&self) -> &Transformer {
        &self.net.transformer
    }

    pub fn lm_head(&self) -> Linear {
        self.net.lm_head
    }

    pub fn max_len(&self) -> usize {
        self.config().max_len
    }

    /// Final hidden states of every position, row-major `len x hidden`.
    pub fn hidden_states(&self, input: &GenInput) -> Result<Vec<f64>, GeneratorError> {
        let mut g = Graph::new(&self.params);
        let mask = build_mask(input.prefix_len, input.response_len());
        let h = self.net.transformer.forward(&mut g, &input.seq, &mask, None)?;
        Ok(g.value(h).data().to_vec())
    }

    /// Mean response-token NLL of one input, dropout off.
    pub fn nll(&self, input: &GenInput) -> Result<f64, GeneratorError> {
        let mut g = Graph::new(&self.params);
        let l = self.net.nll(&mut g, input, None)?;
        Ok(g.value(l).item())
    }

    /// [`Self::nll`] together with its parameter gradients.
    pub fn nll_gradients(&self, input: &GenInput) -> Result<(f64, Gradients), GeneratorError> {
        let mut g = Graph::new(&self.params);
        let l = self.net.nll(&mut g, input, None)?;
        Ok((g.value(l).item(), g.backward(l)?))
    }

    /// Per-position NLL of each response target, in order.
    pub fn token_nlls(&self, input: &GenInput) -> Result<Vec<f64>, GeneratorError> {
        let n = input.seq.len();
        let rows: Vec<usize> = (input.prefix_len..n - 1).collect();
        let mut g = Graph::new(&self.params);
        let logits = self.net.logits(&mut g, input, &rows, None)?;
        let lv = g.value(logits);
        Ok(rows
            .iter()
            .enumerate()
            .map(|(r, &p)| -log_softmax(lv.row(r))[input.seq.tokens[p + 1] as usize])
            .collect())
    }

    /// Trains on inputs built with a response; each sample's loss is its
    /// mean response-token NLL.
    pub fn train_nll<D>(&mut self, config: &FitConfig, mut epoch_inputs: D) -> Result<FitReport, GeneratorError>
    where
        D: FnMut(usize) -> Result<Vec<GenInput>, GeneratorError>,
    {
        let dropout = self.config().dropout > 0.0;
        let net = &self.net;
        fit(
            &mut self.params,
            config,
            |e| {
                let inputs = epoch_inputs(e)?;
                if let Some(i) = inputs.iter().position(|x| x.response_len() < 2) {
                    return Err(GeneratorError::NoResponse(i));
                }
                Ok(inputs)
            },
            |g, x, rng| net.nll(g, x, dropout.then_some(rng)),
        )
    }

    /// Decoder view conditioned on `prefix` (a [`GenInput`] whose response
    /// block is ignored).
    pub fn conditioned<'a>(&'a self, prefix: &'a GenInput) -> Conditioned<'a> {
        Conditioned {
            model: self,
            prefix,
        }
    }

    /// Decodes a response for `prefix`. Beam size 1 is greedy search.
    pub fn generate(
        &self,
        vocab: &Vocab,
        prefix: &GenInput,
        beam_size: usize,
    ) -> Result<String, GeneratorError> {
        let room = self.max_len().saturating_sub(prefix.prefix_len + 1);
        let mut config = DecodeConfig::beam(beam_size);
        config.max_len = config.max_len.min(room);
        let cond = self.conditioned(prefix);
        let best = beam_search(&cond, &config)?;
        Ok(vocab.decode(&best.tokens)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), GeneratorError> {
        let header = GeneratorHeader {
            transformer: self.config().clone(),
            vocab_size: self.vocab_size(),
        };
        checkpoint::save(
            path,
            CHECKPOINT_KIND,
            serde_json::to_value(header).expect("header serializes"),
            &self.params,
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GeneratorError> {
        let (header, loaded) = checkpoint::load(path)?;
        if header.kind != CHECKPOINT_KIND {
            return Err(GeneratorError::WrongCheckpoint { found: header.kind });
        }
        let h: GeneratorHeader = serde_json::from_value(header.config)
            .map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
        let mut model = Self::new(&h.transformer, h.vocab_size, 0)?;
        checkpoint::restore_into(&mut model.params, &loaded)?;
        Ok(model)
    }
}

/// A [`GeneratorModel`] bound to one knowledge+context prefix.
pub struct Conditioned<'a> {
    model: &'a GeneratorModel,
    prefix: &'a GenInput,
}

impl NextTokenModel for Conditioned<'_> {
    fn next_log_probs(&self, response: &[u32]) -> Result<Vec<f64>, GeneratorError> {
        let input = self.prefix.with_response(response);
        let last = input.seq.len() - 1;
        let mut g = Graph::new(&self.model.params);
        let logits = self.model.net.logits(&mut g, &input, &[last], None)?;
        Ok(log_softmax(g.value(logits).row(0)))
    }

    fn next_log_probs_batch(&self, responses: &[Vec<u32>]) -> Result<Vec<Vec<f64>>, GeneratorError> {
        responses.par_iter().map(|r| self.next_log_probs(r)).collect()
    }
}
