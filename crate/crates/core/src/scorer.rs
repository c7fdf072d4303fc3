//! Cross-encoder relevance scorer: `[CLS] context [SEP] candidate [SEP]` to
//! `p(l_x = 1 | C_t, x)` through a single-logit head on the CLS state.
//!
//! The same model type serves knowledge-turn detection (schema descriptions
//! and snippets as candidates), snippet selection, context-only detection
//! (`[CLS] context [SEP]`) and sentence-order pretraining.

use std::path::Path;

use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DialogueContext, Speaker};
use crate::neural::{
    checkpoint, fit, BoolMatrix, FitConfig, FitReport, Gradients, Graph, Linear, NeuralError, NodeId,
    ParamStore, SeededRng, SequenceInput, Transformer, TransformerConfig,
};
use crate::sampler::SamplerError;
use crate::tokenizer::{Vocab, CLS, SEP};

pub const ROLE_USER: u8 = 0;
pub const ROLE_SYSTEM: u8 = 1;
/// Candidate text and special tokens.
pub const ROLE_OTHER: u8 = 2;
pub const SEGMENT_CONTEXT: u8 = 0;
pub const SEGMENT_CANDIDATE: u8 = 1;

pub const CHECKPOINT_KIND: &str = "scorer";

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("candidate text is empty")]
    EmptyCandidate,
    #[error("training instance {instance} has no positive")]
    NoPositive { instance: usize },
    #[error("max_len {0} leaves no room for context and candidate")]
    MaxLenTooSmall(usize),
    #[error("checkpoint kind {found:?} is not a scorer")]
    WrongCheckpoint { found: String },
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

pub fn role_of(speaker: Speaker) -> u8 {
    match speaker {
        Speaker::User => ROLE_USER,
        Speaker::System => ROLE_SYSTEM,
    }
}

/// A tokenized dialogue context, one id list per utterance, oldest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedContext {
    pub utterances: Vec<(Speaker, Vec<u32>)>,
}

impl EncodedContext {
    pub fn new(vocab: &Vocab, ctx: &DialogueContext) -> Self {
        Self {
            utterances: ctx
                .utterances()
                .iter()
                .map(|u| (u.speaker(), vocab.encode(u.text())))
                .collect(),
        }
    }

    fn total(&self) -> usize {
        self.utterances.iter().map(|(_, t)| t.len()).sum()
    }
}

/// Fits the utterances and a candidate of `cand_len` tokens into `budget`:
/// drops whole oldest utterances, then shortens the candidate to
/// `max(1, budget - last)`, then keeps only the tail of the last utterance.
/// Returns the surviving utterance slices and the candidate length.
fn fit_budget(ctx: &EncodedContext, cand_len: usize, budget: usize) -> (Vec<(Speaker, &[u32])>, usize) {
    let mut start = 0;
    let mut total = ctx.total() + cand_len;
    while total > budget && start + 1 < ctx.utterances.len() {
        total -= ctx.utterances[start].1.len();
        start += 1;
    }
    let mut utts: Vec<(Speaker, &[u32])> = ctx.utterances[start..]
        .iter()
        .map(|(s, t)| (*s, t.as_slice()))
        .collect();
    let mut cand = cand_len;
    if total > budget && cand_len > 0 {
        let last = utts.last().map_or(0, |(_, t)| t.len());
        cand = cand_len.min(budget.saturating_sub(last).max(1));
        total = total - cand_len + cand;
    }
    if total > budget {
        let keep = budget - cand;
        let (s, t) = utts.pop().expect("at least one utterance");
        utts.push((s, &t[t.len() - keep..]));
    }
    (utts, cand)
}

fn push_context(seq: &mut SequenceInput, utts: &[(Speaker, &[u32])]) {
    for (speaker, toks) in utts {
        for &t in *toks {
            seq.push(t, SEGMENT_CONTEXT, role_of(*speaker));
        }
    }
}

/// `[CLS] context [SEP] candidate [SEP]` within `max_len` tokens. The CLS
/// token and the newest utterance tail always survive.
pub fn assemble_pair(
    ctx: &EncodedContext,
    candidate: &[u32],
    max_len: usize,
) -> Result<SequenceInput, ScorerError> {
    if candidate.is_empty() {
        return Err(ScorerError::EmptyCandidate);
    }
    if max_len < 5 {
        return Err(ScorerError::MaxLenTooSmall(max_len));
    }
    let (utts, cand) = fit_budget(ctx, candidate.len(), max_len - 3);
    let mut seq = SequenceInput::default();
    seq.push(CLS, SEGMENT_CONTEXT, ROLE_OTHER);
    push_context(&mut seq, &utts);
    seq.push(SEP, SEGMENT_CONTEXT, ROLE_OTHER);
    for &t in &candidate[..cand] {
        seq.push(t, SEGMENT_CANDIDATE, ROLE_OTHER);
    }
    seq.push(SEP, SEGMENT_CANDIDATE, ROLE_OTHER);
    Ok(seq)
}

pub fn encode_pair(
    vocab: &Vocab,
    ctx: &DialogueContext,
    candidate: &str,
    max_len: usize,
) -> Result<SequenceInput, ScorerError> {
    assemble_pair(&EncodedContext::new(vocab, ctx), &vocab.encode(candidate), max_len)
}

/// `[CLS] context [SEP]` within `max_len` tokens.
pub fn assemble_context_only(ctx: &EncodedContext, max_len: usize) -> Result<SequenceInput, ScorerError> {
    if max_len < 3 {
        return Err(ScorerError::MaxLenTooSmall(max_len));
    }
    let (utts, _) = fit_budget(ctx, 0, max_len - 2);
    let mut seq = SequenceInput::default();
    seq.push(CLS, SEGMENT_CONTEXT, ROLE_OTHER);
    push_context(&mut seq, &utts);
    seq.push(SEP, SEGMENT_CONTEXT, ROLE_OTHER);
    Ok(seq)
}

/// One binary training example.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPair {
    pub input: SequenceInput,
    pub label: f64,
}

/// The pairs of one instance: its positives and negatives. The instance loss
/// is the sum of their binary cross-entropies.
pub type PairGroup = Vec<LabeledPair>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct ScorerHeader {
    transformer: TransformerConfig,
    vocab_size: usize,
}

#[derive(Debug, Clone)]
struct ScorerNet {
    transformer: Transformer,
    head: Linear,
}

impl ScorerNet {
    fn logit(
        &self,
        g: &mut Graph<'_>,
        input: &SequenceInput,
        dropout: Option<&mut SeededRng>,
    ) -> Result<NodeId, NeuralError> {
        let mask = BoolMatrix::filled(input.len(), input.len(), true);
        let h = self.transformer.forward(g, input, &mask, dropout)?;
        let cls = g.select_rows(h, &[0]);
        Ok(self.head.forward(g, cls))
    }

    fn group_loss(
        &self,
        g: &mut Graph<'_>,
        group: &[LabeledPair],
        mut dropout: Option<&mut SeededRng>,
    ) -> Result<NodeId, NeuralError> {
        let mut total: Option<NodeId> = None;
        for pair in group {
            let z = self.logit(g, &pair.input, dropout.as_deref_mut())?;
            let l = g.bce_with_logits(z, pair.label);
            total = Some(match total {
                Some(t) => g.add(t, l),
                None => l,
            });
        }
        total.ok_or(NeuralError::EmptySequence)
    }
}

/// Transformer encoder plus a zero-initialized `hidden -> 1` head.
#[derive(Debug, Clone)]
pub struct ScorerModel {
    params: ParamStore,
    net: ScorerNet,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ScorerModel {
    pub fn new(config: &TransformerConfig, vocab_size: usize, seed: u64) -> Result<Self, ScorerError> {
        let mut rng = SeededRng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let transformer = Transformer::new(&mut params, config, vocab_size, 2, 3, &mut rng)?;
        let head = Linear::new(&mut params, "head", config.hidden, 1, 0.0, &mut rng);
        Ok(Self {
            params,
            net: ScorerNet { transformer, head },
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

    pub fn head(&self) -> Linear {
        self.net.head
    }

    pub fn transformer(&self) -> &Transformer {
        &self.net.transformer
    }

    pub fn max_len(&self) -> usize {
        self.config().max_len
    }

    /// Classification logit, dropout off.
    pub fn logit(&self, input: &SequenceInput) -> Result<f64, ScorerError> {
        let mut g = Graph::new(&self.params);
        let z = self.net.logit(&mut g, input, None)?;
        Ok(g.value(z).item())
    }

    /// `sigmoid(logit)`, always in (0, 1).
    pub fn score(&self, input: &SequenceInput) -> Result<f64, ScorerError> {
        Ok(sigmoid(self.logit(input)?))
    }

    /// Scores in input order; forwards run in parallel.
    pub fn score_batch(&self, inputs: &[SequenceInput]) -> Result<Vec<f64>, ScorerError> {
        inputs.par_iter().map(|x| self.score(x)).collect()
    }

    /// Scores each candidate id list against one context.
    pub fn score_candidates(
        &self,
        ctx: &EncodedContext,
        candidates: &[Vec<u32>],
    ) -> Result<Vec<f64>, ScorerError> {
        let max_len = self.max_len();
        candidates
            .par_iter()
            .map(|c| self.score(&assemble_pair(ctx, c, max_len)?))
            .collect()
    }

    /// Summed binary cross-entropy of one group, dropout off.
    pub fn group_loss(&self, group: &[LabeledPair]) -> Result<f64, ScorerError> {
        let mut g = Graph::new(&self.params);
        let l = self.net.group_loss(&mut g, group, None)?;
        Ok(g.value(l).item())
    }

    /// [`Self::group_loss`] together with its parameter gradients.
    pub fn group_loss_gradients(&self, group: &[LabeledPair]) -> Result<(f64, Gradients), ScorerError> {
        let mut g = Graph::new(&self.params);
        let l = self.net.group_loss(&mut g, group, None)?;
        Ok((g.value(l).item(), g.backward(l)?))
    }

    /// Minimizes the mean group loss. `epoch_groups(e)` supplies the groups
    /// of epoch `e`, so negatives can be resampled every epoch.
    pub fn train<D>(&mut self, config: &FitConfig, mut epoch_groups: D) -> Result<FitReport, ScorerError>
    where
        D: FnMut(usize) -> Result<Vec<PairGroup>, ScorerError>,
    {
        let dropout = self.config().dropout > 0.0;
        let net = &self.net;
        fit(
            &mut self.params,
            config,
            |e| {
                let groups = epoch_groups(e)?;
                if let Some(i) = groups.iter().position(|g| !g.iter().any(|p| p.label > 0.5)) {
                    return Err(ScorerError::NoPositive { instance: i });
                }
                Ok(groups)
            },
            |g, group, rng| net.group_loss(g, group, dropout.then_some(rng)),
        )
    }

    /// Plain binary classification where every sample is one pair, so
    /// negative-only samples are allowed.
    pub fn train_pairs<D>(&mut self, config: &FitConfig, mut epoch_pairs: D) -> Result<FitReport, ScorerError>
    where
        D: FnMut(usize) -> Result<Vec<LabeledPair>, ScorerError>,
    {
        let dropout = self.config().dropout > 0.0;
        let net = &self.net;
        fit(&mut self.params, config, &mut epoch_pairs, |g, pair, rng| {
            net.group_loss(g, std::slice::from_ref(pair), dropout.then_some(rng))
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ScorerError> {
        let header = ScorerHeader {
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

    pub fn load(path: &Path) -> Result<Self, ScorerError> {
        let (header, loaded) = checkpoint::load(path)?;
        if header.kind != CHECKPOINT_KIND {
            return Err(ScorerError::WrongCheckpoint { found: header.kind });
        }
        let h: ScorerHeader = serde_json::from_value(header.config)
            .map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
        let mut model = Self::new(&h.transformer, h.vocab_size, 0)?;
        checkpoint::restore_into(&mut model.params, &loaded)?;
        Ok(model)
    }
}

/// Sentence-order example: `[CLS] first [SEP] second [SEP]` with every
/// token in role [`ROLE_OTHER`], so only content reveals the order. The first
/// part keeps its tail, the second its head.
pub fn sop_input(first: &[u32], second: &[u32], max_len: usize) -> Result<SequenceInput, ScorerError> {
    if first.is_empty() || second.is_empty() {
        return Err(ScorerError::EmptyCandidate);
    }
    if max_len < 5 {
        return Err(ScorerError::MaxLenTooSmall(max_len));
    }
    let budget = max_len - 3;
    let b = second.len().min(budget.saturating_sub(first.len()).max(budget / 2));
    let a = first.len().min(budget - b);
    let mut seq = SequenceInput::default();
    seq.push(CLS, SEGMENT_CONTEXT, ROLE_OTHER);
    for &t in &first[first.len() - a..] {
        seq.push(t, SEGMENT_CONTEXT, ROLE_OTHER);
    }
    seq.push(SEP, SEGMENT_CONTEXT, ROLE_OTHER);
    for &t in &second[..b] {
        seq.push(t, SEGMENT_CANDIDATE, ROLE_OTHER);
    }
    seq.push(SEP, SEGMENT_CANDIDATE, ROLE_OTHER);
    Ok(seq)
}

/// In-order `(context, response)` labeled 1 and the swapped
/// `(response, context)` labeled 0.
pub fn sop_group(ctx: &EncodedContext, response: &[u32], max_len: usize) -> Result<PairGroup, ScorerError> {
    let flat: Vec<u32> = ctx.utterances.iter().flat_map(|(_, t)| t.iter().copied()).collect();
    Ok(vec![
        LabeledPair {
            input: sop_input(&flat, response, max_len)?,
            label: 1.0,
        },
        LabeledPair {
            input: sop_input(response, &flat, max_len)?,
            label: 0.0,
        },
    ])
}

/// Fraction of pairs whose thresholded score (`>= 0.5`) equals the label.
pub fn pair_accuracy(model: &ScorerModel, pairs: &[LabeledPair]) -> Result<f64, ScorerError> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let inputs: Vec<SequenceInput> = pairs.iter().map(|p| p.input.clone()).collect();
    let scores = model.score_batch(&inputs)?;
    let correct = scores
        .iter()
        .zip(pairs)
        .filter(|(s, p)| (**s >= 0.5) == (p.label > 0.5))
        .count();
    Ok(correct as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    pub language_model: FitConfig,
    pub sentence_order: FitConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumReport {
    pub language_model: FitReport,
    pub sentence_order: FitReport,
    /// Tensors copied from the language model into the scorer.
    pub copied: usize,
}

/// Two-stage initialization: a language model with the scorer's shape is
/// trained on `(context, response)` pairs, its matching tensors are copied
/// into `scorer`, then the scorer learns sentence-order prediction.
pub fn pretrain_curriculum(
    scorer: &mut ScorerModel,
    dialogues: &[(EncodedContext, Vec<u32>)],
    config: &CurriculumConfig,
) -> Result<CurriculumReport, ScorerError> {
    use crate::generator::{assemble_dialogue_input, GeneratorError, GeneratorModel};
    let to_scorer = |e: GeneratorError| match e {
        GeneratorError::Neural(n) => ScorerError::Neural(n),
        other => ScorerError::Neural(NeuralError::InvalidConfig(other.to_string())),
    };
    let max_len = scorer.max_len();
    let mut lm = GeneratorModel::new(scorer.config(), scorer.vocab_size(), config.language_model.seed)
        .map_err(to_scorer)?;
    let lm_inputs = dialogues
        .iter()
        .filter(|(_, r)| !r.is_empty())
        .map(|(c, r)| assemble_dialogue_input(c, r, max_len))
        .collect::<Result<Vec<_>, _>>()
        .map_err(to_scorer)?;
    let lm_report = lm
        .train_nll(&config.language_model, |_| Ok(lm_inputs.clone()))
        .map_err(to_scorer)?;
    let copied = scorer.params_mut().copy_matching_from(lm.params());
    let groups = dialogues
        .iter()
        .filter(|(_, r)| !r.is_empty())
        .map(|(c, r)| sop_group(c, r, max_len))
        .collect::<Result<Vec<_>, _>>()?;
    let sop_report = scorer.train(&config.sentence_order, |_| Ok(groups.clone()))?;
    Ok(CurriculumReport {
        language_model: lm_report,
        sentence_order: sop_report,
        copied,
    })
}
